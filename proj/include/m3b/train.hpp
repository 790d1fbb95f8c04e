#pragma once

#include <limits>
#include <map>
#include <string>
#include <vector>

#include "m3b/model.hpp"
#include "m3b/rng.hpp"
#include "m3b/tensor.hpp"

namespace m3b {

struct TrainConfig {
  int batch_size = 8;
  int phase_a_epochs = 10;   // encoder frozen, decoder/head trained
  double phase_a_lr = 1e-3;
  int phase_b_epochs = 100;  // everything fine-tuned
  double phase_b_lr = 1e-4;
  double plateau_factor = 0.1;
  double lr_floor = 1e-7;
  int plateau_patience = 5;
  int early_stop_patience = 15;
  double augment_prob = 0.5;
  uint64_t seed = 1;
  std::string checkpoint_path;  // best model lands here; empty = keep in memory
};

// Patient-level k-fold partition: seeded shuffle then round-robin, so fold
// sizes differ by at most one and no patient crosses the train/test line.
struct FoldSplit {
  std::vector<std::vector<std::string>> folds;
  std::vector<std::string> train_ids(int fold) const;
  const std::vector<std::string>& test_ids(int fold) const;
};

FoldSplit make_folds(const std::vector<std::string>& patient_ids, int k,
                     uint64_t seed);

// One training pair; tensors are 1 x C x H x W and 1 x 1 x H x W.
struct Sample {
  Tensor input;
  Tensor target;
};

enum class AugmentOp { kNone, kVFlip, kHFlip, kRot90, kRot180, kRot270 };

// With probability `prob` exactly one transform, drawn uniformly from the
// five non-identity ops.
AugmentOp draw_augment(Rng& rng, double prob);
Tensor apply_augment(const Tensor& t, AugmentOp op);
std::pair<Tensor, Tensor> augment(const Tensor& img, const Tensor& mask,
                                  Rng& rng, double prob = 0.5);

// 0.5 * soft dice + 0.5 * binary cross-entropy
template <typename T>
TensorT<T> combined_loss(TapeT<T>* tape, const TensorT<T>& pred,
                         const TensorT<T>& target);

// Multiplies lr by `factor` after `patience` epochs without strict loss
// improvement, clamped at `floor`.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr0, double factor, double floor, int patience)
      : lr_(lr0), factor_(factor), floor_(floor), patience_(patience) {}

  double lr() const { return lr_; }
  bool observe(double loss) {
    if (loss < best_) {
      best_ = loss;
      wait_ = 0;
      return false;
    }
    if (++wait_ >= patience_) {
      lr_ = std::max(lr_ * factor_, floor_);
      wait_ = 0;
      return true;
    }
    return false;
  }

 private:
  double lr_;
  double factor_, floor_;
  int patience_;
  int wait_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

class EarlyStopper {
 public:
  explicit EarlyStopper(int patience) : patience_(patience) {}
  bool observe(double loss) {
    if (loss < best_) {
      best_ = loss;
      wait_ = 0;
      return false;
    }
    return ++wait_ >= patience_;
  }

 private:
  int patience_;
  int wait_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

struct EpochRecord {
  int epoch = 0;  // 1-based over the whole fit
  std::string phase;
  double lr = 0;
  double train_loss = 0;
  double train_dsc = 0;
};

struct TrainHistory {
  std::vector<EpochRecord> records;
  std::string best_checkpoint;
  double best_loss = std::numeric_limits<double>::infinity();
  std::string stop_reason;  // "completed" | "early-stop" | "nan-abort"
  std::string diagnostic;
};

// Moves encoder parameters in or out of the frozen set; frozen parameters
// receive no optimizer updates.
void freeze_encoder(ModelGraph& model, bool frozen);

// One Adam update over every trainable, non-frozen parameter.
void optimizer_step(ModelGraph& model,
                    std::map<std::string, AdamState<float>>& states, float lr);

// Deterministic full-set evaluation (eval-mode batchnorm, no augmentation):
// the loss/DSC the checkpoint and callback decisions are based on.
std::pair<double, double> evaluate_loss_dsc(ModelGraph& model,
                                            const std::vector<Sample>& samples,
                                            int batch_size);

// Two-phase protocol: phase A trains the decoder at phase_a_lr with the
// encoder frozen; phase B fine-tunes everything with plateau decay and early
// stopping. Fully deterministic under cfg.seed.
TrainHistory fit(ModelGraph& model, const std::vector<Sample>& train_set,
                 const TrainConfig& cfg);

void write_history_jsonl(const TrainHistory& hist, const std::string& path);

}  // namespace m3b
