#include "m3b/model.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <map>
#include <memory>
#include <stdexcept>

#include "m3b/rng.hpp"

namespace m3b {

namespace {

template <typename T>
TensorT<T> he_init(Rng& rng, Shape4 s) {
  TensorT<T> t(s);
  const double stddev = std::sqrt(2.0 / double(s.c * s.h * s.w));
  for (int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = T(rng.gaussian() * stddev);
  t.set_requires_grad(true);
  return t;
}

template <typename T>
TensorT<T> zero_bias(int channels) {
  TensorT<T> t({1, channels, 1, 1}, T(0));
  t.set_requires_grad(true);
  return t;
}

}  // namespace

template <typename T>
TensorT<T> mm_block(TapeT<T>* tape, const MMBlock<T>& mm, const TensorT<T>& f) {
  auto pooled = concat_channels(tape, channel_mean(tape, f),
                                channel_max(tape, f));
  auto d = conv2d(tape, pooled, mm.spatial.w, mm.spatial.b, 1, 1);
  auto h = sigmoid(tape, conv2d(tape, f, mm.reduce.w, mm.reduce.b, 1, 0));
  auto fused = mul(tape, d, h);
  auto attention =
      sigmoid(tape, conv2d(tape, fused, mm.expand.w, mm.expand.b, 1, 0));
  return add(tape, f, attention);
}

template <typename T>
ModelGraphT<T> ModelGraphT<T>::assemble(
    const ModelConfig& cfg, const std::vector<InvertedResidualConfig>& irs,
    const std::vector<int>& taps, int head_filters,
    const std::vector<int>& decoder_filters, uint64_t seed) {
  ModelGraphT<T> m;
  m.cfg_ = cfg;
  m.tap_blocks_ = taps;
  Rng rng(seed);

  auto reg = [&m](const std::string& name, TensorT<T> t, bool trainable,
                  bool encoder) {
    m.entries_.push_back({name, std::move(t), trainable, encoder});
  };
  auto reg_bn = [&](const std::string& prefix, BatchNormParams<T>& bn,
                    bool encoder) {
    reg(prefix + ".gamma", bn.gamma, true, encoder);
    reg(prefix + ".beta", bn.beta, true, encoder);
    reg(prefix + ".running_mean", bn.running_mean, false, encoder);
    reg(prefix + ".running_var", bn.running_var, false, encoder);
  };

  // --- encoder ---
  m.stem_ = {he_init<T>(rng, {cfg.stem_channels, cfg.in_channels, 3, 3}),
             TensorT<T>(), 2, 1};
  m.stem_bn_ = BatchNormParams<T>::make(cfg.stem_channels);
  reg("encoder.stem.conv.w", m.stem_.w, true, true);
  reg_bn("encoder.stem.bn", m.stem_bn_, true);

  int in_ch = cfg.stem_channels;
  int block_idx = 0;
  for (const auto& ir : irs) {
    for (int rep = 0; rep < ir.repeats; ++rep) {
      InvResBlock<T> b;
      const int stride = rep == 0 ? ir.first_stride : 1;
      const int expanded = in_ch * ir.expansion;
      const std::string p = "encoder.block" + std::to_string(block_idx);
      b.has_expand = ir.expansion != 1;
      if (b.has_expand) {
        b.expand = {he_init<T>(rng, {expanded, in_ch, 1, 1}), TensorT<T>(), 1, 0};
        b.bn_expand = BatchNormParams<T>::make(expanded);
        reg(p + ".expand.w", b.expand.w, true, true);
        reg_bn(p + ".expand_bn", b.bn_expand, true);
      }
      b.dw = he_init<T>(rng, {expanded, 1, 3, 3});
      b.bn_dw = BatchNormParams<T>::make(expanded);
      b.dw_stride = stride;
      reg(p + ".dw.w", b.dw, true, true);
      reg_bn(p + ".dw_bn", b.bn_dw, true);
      b.project = {he_init<T>(rng, {ir.out_channels, expanded, 1, 1}),
                   TensorT<T>(), 1, 0};
      b.bn_project = BatchNormParams<T>::make(ir.out_channels);
      reg(p + ".project.w", b.project.w, true, true);
      reg_bn(p + ".project_bn", b.bn_project, true);
      b.residual = stride == 1 && in_ch == ir.out_channels;
      m.blocks_.push_back(std::move(b));
      in_ch = ir.out_channels;
      ++block_idx;
    }
  }

  auto make_mm = [&](const std::string& p, int channels) {
    MMBlock<T> mm;
    mm.spatial = {he_init<T>(rng, {1, 2, 3, 3}), zero_bias<T>(1), 1, 1};
    mm.reduce = {he_init<T>(rng, {1, channels, 1, 1}), zero_bias<T>(1), 1, 0};
    mm.expand = {he_init<T>(rng, {channels, 1, 1, 1}), zero_bias<T>(channels),
                 1, 0};
    reg(p + ".spatial.w", mm.spatial.w, true, false);
    reg(p + ".spatial.b", mm.spatial.b, true, false);
    reg(p + ".reduce.w", mm.reduce.w, true, false);
    reg(p + ".reduce.b", mm.reduce.b, true, false);
    reg(p + ".expand.w", mm.expand.w, true, false);
    reg(p + ".expand.b", mm.expand.b, true, false);
    return mm;
  };

  // --- decoder ---
  if (cfg.use_mm_block) m.bottleneck_mm_ = make_mm("bottleneck.mm", in_ch);

  // tap channel counts, deepest tap consumed first
  std::vector<int> tap_ch;
  tap_ch.push_back(cfg.stem_channels);
  {
    int ch = cfg.stem_channels;
    int bi = 0;
    for (const auto& ir : irs)
      for (int rep = 0; rep < ir.repeats; ++rep) {
        ch = ir.out_channels;
        for (int t : taps)
          if (t == bi) tap_ch.push_back(ch);
        ++bi;
      }
  }

  int dec_in = in_ch;
  for (size_t i = 0; i < decoder_filters.size(); ++i) {
    DecoderStage<T> st;
    const int skip = tap_ch[tap_ch.size() - 1 - i];
    const int f = decoder_filters[i];
    const std::string p = "decoder.stage" + std::to_string(i);
    st.conv1 = {he_init<T>(rng, {f, dec_in + skip, 3, 3}), TensorT<T>(), 1, 1};
    st.bn1 = BatchNormParams<T>::make(f);
    st.conv2 = {he_init<T>(rng, {f, f, 3, 3}), TensorT<T>(), 1, 1};
    st.bn2 = BatchNormParams<T>::make(f);
    reg(p + ".conv1.w", st.conv1.w, true, false);
    reg_bn(p + ".bn1", st.bn1, false);
    reg(p + ".conv2.w", st.conv2.w, true, false);
    reg_bn(p + ".bn2", st.bn2, false);
    if (cfg.use_mm_block) st.mm = make_mm(p + ".mm", f);
    m.stages_.push_back(std::move(st));
    dec_in = f;
  }

  // --- head ---
  m.head_conv_ = {he_init<T>(rng, {head_filters, dec_in, 3, 3}), TensorT<T>(),
                  1, 1};
  m.head_bn_ = BatchNormParams<T>::make(head_filters);
  m.head_out_ = {he_init<T>(rng, {1, head_filters, 1, 1}), zero_bias<T>(1), 1,
                 0};
  reg("head.conv.w", m.head_conv_.w, true, false);
  reg_bn("head.bn", m.head_bn_, false);
  reg("head.out.w", m.head_out_.w, true, false);
  reg("head.out.b", m.head_out_.b, true, false);
  return m;
}

template <typename T>
ModelGraphT<T> ModelGraphT<T>::build(const ModelConfig& cfg, uint64_t seed) {
  if (cfg.height % 32 != 0 || cfg.width % 32 != 0)
    throw std::invalid_argument(
        "model: input dims must be divisible by 32, got " +
        std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
  if (cfg.in_channels < 1) throw std::invalid_argument("model: bad channels");
  // MobileNetV2 rows truncated at block 13 (the first 160-channel stage)
  const std::vector<InvertedResidualConfig> irs = {
      {1, 16, 1, 1}, {6, 24, 2, 2},  {6, 32, 3, 2},
      {6, 64, 4, 2}, {6, 96, 3, 1},  {6, 160, 1, 2},
  };
  // skip taps: stride 4 after block 2, stride 8 after block 5, stride 16
  // after block 12; the stem output itself is the stride-2 tap
  const std::vector<int> taps = {2, 5, 12};
  return assemble(cfg, irs, taps, cfg.decoder_filters[3],
                  {cfg.decoder_filters.begin(), cfg.decoder_filters.end()},
                  seed);
}

template <typename T>
ModelGraphT<T> ModelGraphT<T>::tiny(int in_channels, uint64_t seed) {
  ModelConfig cfg;
  cfg.in_channels = in_channels;
  cfg.height = 8;
  cfg.width = 8;
  cfg.use_mm_block = true;
  cfg.stem_channels = 4;
  const std::vector<InvertedResidualConfig> irs = {{2, 8, 1, 2}};
  return assemble(cfg, irs, {}, 4, {8}, seed);
}

template <typename T>
TensorT<T> ModelGraphT<T>::forward(TapeT<T>* tape, const TensorT<T>& x,
                                   BnMode mode) {
  TapeT<T>* enc = encoder_frozen_ ? nullptr : tape;

  auto h = relu6(enc, batchnorm(enc, conv2d(enc, x, stem_.w, stem_.b,
                                            stem_.stride, stem_.pad),
                                stem_bn_, mode));
  std::vector<TensorT<T>> skips;
  skips.push_back(h);
  for (size_t bi = 0; bi < blocks_.size(); ++bi) {
    auto& b = blocks_[bi];
    auto in = h;
    if (b.has_expand)
      h = relu6(enc, batchnorm(enc, conv2d(enc, h, b.expand.w, b.expand.b, 1, 0),
                               b.bn_expand, mode));
    h = relu6(enc, batchnorm(enc, depthwise_conv2d(enc, h, b.dw, b.dw_stride, 1),
                             b.bn_dw, mode));
    h = batchnorm(enc, conv2d(enc, h, b.project.w, b.project.b, 1, 0),
                  b.bn_project, mode);
    if (b.residual) h = add(enc, in, h);
    for (int t : tap_blocks_)
      if (t == int(bi)) skips.push_back(h);
  }

  auto d = h;
  if (bottleneck_mm_) d = mm_block(tape, *bottleneck_mm_, d);
  for (size_t i = 0; i < stages_.size(); ++i) {
    auto& st = stages_[i];
    d = upsample_bilinear2x(tape, d);
    d = concat_channels(tape, d, skips[skips.size() - 1 - i]);
    d = relu6(tape, batchnorm(tape, conv2d(tape, d, st.conv1.w, st.conv1.b, 1, 1),
                              st.bn1, mode));
    d = relu6(tape, batchnorm(tape, conv2d(tape, d, st.conv2.w, st.conv2.b, 1, 1),
                              st.bn2, mode));
    if (st.mm) d = mm_block(tape, *st.mm, d);
  }

  d = upsample_bilinear2x(tape, d);
  d = relu6(tape, batchnorm(tape, conv2d(tape, d, head_conv_.w, head_conv_.b,
                                         1, 1),
                            head_bn_, mode));
  return sigmoid(tape, conv2d(tape, d, head_out_.w, head_out_.b, 1, 0));
}

template <typename T>
int64_t ModelGraphT<T>::param_count() const {
  int64_t n = 0;
  for (const auto& e : entries_)
    if (e.trainable) n += e.tensor.numel();
  return n;
}

template <typename T>
int ModelGraphT<T>::mm_block_count() const {
  int n = bottleneck_mm_ ? 1 : 0;
  for (const auto& st : stages_) n += st.mm ? 1 : 0;
  return n;
}

template class ModelGraphT<float>;
template class ModelGraphT<double>;
template TensorT<float> mm_block<float>(TapeT<float>*, const MMBlock<float>&,
                                        const TensorT<float>&);
template TensorT<double> mm_block<double>(TapeT<double>*,
                                          const MMBlock<double>&,
                                          const TensorT<double>&);

// ---------------------------------------------------------------------------
// checkpoint I/O
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', '3', 'B', 'U'};
constexpr uint32_t kVersion = 1;

using FilePtr = std::unique_ptr<std::FILE, int (*)(std::FILE*)>;

void put_bytes(std::FILE* f, const void* p, size_t n, const std::string& path) {
  if (std::fwrite(p, 1, n, f) != n)
    throw std::runtime_error("checkpoint: short write on " + path);
}

void get_bytes(std::FILE* f, void* p, size_t n, const std::string& path) {
  if (std::fread(p, 1, n, f) != n)
    throw std::runtime_error("checkpoint truncated: " + path);
}

}  // namespace

void save_checkpoint(const ModelGraph& model, const std::string& path,
                     bool encoder_only) {
  const std::string tmp = path + ".tmp";
  {
    FilePtr f(std::fopen(tmp.c_str(), "wb"), &std::fclose);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + tmp);
    put_bytes(f.get(), kMagic, 4, tmp);
    const uint32_t version = kVersion;
    put_bytes(f.get(), &version, 4, tmp);
    uint32_t count = 0;
    for (const auto& e : model.entries())
      if (!encoder_only || e.encoder) ++count;
    put_bytes(f.get(), &count, 4, tmp);
    for (const auto& e : model.entries()) {
      if (encoder_only && !e.encoder) continue;
      const uint16_t len = uint16_t(e.name.size());
      put_bytes(f.get(), &len, 2, tmp);
      put_bytes(f.get(), e.name.data(), len, tmp);
      const uint8_t rank = 4;
      put_bytes(f.get(), &rank, 1, tmp);
      const Shape4 s = e.tensor.shape();
      const uint32_t dims[4] = {uint32_t(s.n), uint32_t(s.c), uint32_t(s.h),
                                uint32_t(s.w)};
      put_bytes(f.get(), dims, 16, tmp);
      put_bytes(f.get(), e.tensor.data(), sizeof(float) * size_t(e.tensor.numel()),
                tmp);
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw std::runtime_error("checkpoint: rename failed: " + ec.message());
}

void load_checkpoint(const std::string& path, ModelGraph& model,
                     bool allow_partial) {
  FilePtr f(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4];
  get_bytes(f.get(), magic, 4, path);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  uint32_t version = 0, count = 0;
  get_bytes(f.get(), &version, 4, path);
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(version));
  get_bytes(f.get(), &count, 4, path);

  std::map<std::string, ModelGraph::ParamEntry*> by_name;
  for (auto& e : model.entries()) by_name[e.name] = &e;

  std::vector<bool> loaded(model.entries().size(), false);
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t len = 0;
    get_bytes(f.get(), &len, 2, path);
    std::string name(len, '\0');
    get_bytes(f.get(), name.data(), len, path);
    uint8_t rank = 0;
    get_bytes(f.get(), &rank, 1, path);
    if (rank != 4)
      throw std::runtime_error("checkpoint: unsupported rank for " + name);
    uint32_t dims[4];
    get_bytes(f.get(), dims, 16, path);

    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("checkpoint: unknown tensor '" + name + "'");
    auto* entry = it->second;
    const Shape4 want = entry->tensor.shape();
    if (int(dims[0]) != want.n || int(dims[1]) != want.c ||
        int(dims[2]) != want.h || int(dims[3]) != want.w)
      throw std::runtime_error("checkpoint: shape mismatch for '" + name +
                               "'");
    get_bytes(f.get(), entry->tensor.data(),
              sizeof(float) * size_t(entry->tensor.numel()), path);
    loaded[size_t(it->second - model.entries().data())] = true;
  }

  if (!allow_partial) {
    for (size_t i = 0; i < model.entries().size(); ++i)
      if (!loaded[i])
        throw std::runtime_error("checkpoint: missing tensor '" +
                                 model.entries()[i].name + "'");
  }
}

}  // namespace m3b
