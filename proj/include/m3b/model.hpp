#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "m3b/tensor.hpp"

namespace m3b {

// (t, c, n, s) rows of the inverted-residual sequence.
struct InvertedResidualConfig {
  int expansion = 1;
  int out_channels = 1;
  int repeats = 1;
  int first_stride = 1;
};

struct ModelConfig {
  int in_channels = 3;
  int height = 64;
  int width = 64;
  bool use_mm_block = false;
  std::array<int, 4> decoder_filters = {128, 64, 32, 16};
  int stem_channels = 32;
};

template <typename T>
struct ConvLayer {
  TensorT<T> w;  // O x I x kH x kW
  TensorT<T> b;  // undefined when batchnorm supplies the shift
  int stride = 1;
  int pad = 0;
};

template <typename T>
struct InvResBlock {
  bool has_expand = false;  // t == 1 blocks skip the expansion conv
  ConvLayer<T> expand;
  BatchNormParams<T> bn_expand;
  TensorT<T> dw;  // C x 1 x 3 x 3
  BatchNormParams<T> bn_dw;
  int dw_stride = 1;
  ConvLayer<T> project;
  BatchNormParams<T> bn_project;  // linear bottleneck, no activation
  bool residual = false;
};

// Mean-Max attention. Pathway one pools the feature map across channels and
// mixes the two pooled planes with a 3x3 conv; pathway two is a sigmoid-gated
// pointwise reduction of the raw features. Their product is expanded back to
// C channels, squashed, and added onto the input.
template <typename T>
struct MMBlock {
  ConvLayer<T> spatial;  // 2 -> 1, 3x3, pad 1
  ConvLayer<T> reduce;   // C -> 1, 1x1
  ConvLayer<T> expand;   // 1 -> C, 1x1
};

template <typename T>
TensorT<T> mm_block(TapeT<T>* tape, const MMBlock<T>& mm, const TensorT<T>& f);

template <typename T>
struct DecoderStage {
  ConvLayer<T> conv1;
  BatchNormParams<T> bn1;
  ConvLayer<T> conv2;
  BatchNormParams<T> bn2;
  std::optional<MMBlock<T>> mm;
};

// Encoder-decoder graph for both stages: stage 1 is the plain variant
// (use_mm_block = false), stage 2 adds an MM-Block at the bottleneck and
// after every decoder stage.
template <typename T>
class ModelGraphT {
 public:
  struct ParamEntry {
    std::string name;
    TensorT<T> tensor;
    bool trainable = true;  // false for batchnorm running statistics
    bool encoder = false;
  };

  // The paper's configuration: stem to 32 channels, inverted-residual blocks
  // 0..13, skip taps at strides 2/4/8/16, four decoder stages.
  static ModelGraphT build(const ModelConfig& cfg, uint64_t seed);

  // Miniature variant (8x8 input, 4-channel stem, one block, one decoder
  // stage) used for whole-graph gradient verification.
  static ModelGraphT tiny(int in_channels, uint64_t seed);

  // Probabilities in (0, 1), shape N x 1 x H x W. With the encoder frozen the
  // encoder section runs off-tape: its parameters receive no gradients.
  TensorT<T> forward(TapeT<T>* tape, const TensorT<T>& x, BnMode mode);

  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::vector<ParamEntry>& entries() { return entries_; }

  void set_encoder_frozen(bool frozen) { encoder_frozen_ = frozen; }
  bool encoder_frozen() const { return encoder_frozen_; }

  int64_t param_count() const;  // trainable scalars
  int mm_block_count() const;
  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;
  ConvLayer<T> stem_;
  BatchNormParams<T> stem_bn_;
  std::vector<InvResBlock<T>> blocks_;
  std::vector<int> tap_blocks_;  // block indices whose output feeds a skip
  std::optional<MMBlock<T>> bottleneck_mm_;
  std::vector<DecoderStage<T>> stages_;
  ConvLayer<T> head_conv_;
  BatchNormParams<T> head_bn_;
  ConvLayer<T> head_out_;
  bool encoder_frozen_ = false;
  std::vector<ParamEntry> entries_;

  static ModelGraphT assemble(const ModelConfig& cfg,
                              const std::vector<InvertedResidualConfig>& irs,
                              const std::vector<int>& taps, int head_filters,
                              const std::vector<int>& decoder_filters,
                              uint64_t seed);
};

using ModelGraph = ModelGraphT<float>;

template <typename T>
int64_t param_count(const ModelGraphT<T>& m) {
  return m.param_count();
}

// Checkpoint format: magic "M3BU", u32 version, u32 tensor count, then per
// tensor {u16 name length, name, u8 rank, u32 dims..., float32 payload,
// little-endian}. Written atomically (temp file + rename). encoder_only
// writes just the encoder tensors (transfer-learning donor files).
void save_checkpoint(const ModelGraph& model, const std::string& path,
                     bool encoder_only = false);

// Populates every tensor named in the file; shapes must match per name. With
// allow_partial (the encoder-only transfer entry point) tensors absent from
// the file keep their initialization; otherwise every model tensor must load.
void load_checkpoint(const std::string& path, ModelGraph& model,
                     bool allow_partial = false);

}  // namespace m3b
