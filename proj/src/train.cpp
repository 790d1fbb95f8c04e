#include "m3b/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "m3b/metrics.hpp"

namespace m3b {

FoldSplit make_folds(const std::vector<std::string>& patient_ids, int k,
                     uint64_t seed) {
  if (k < 2) throw std::invalid_argument("make_folds: k must be >= 2");
  if (int(patient_ids.size()) < k)
    throw std::invalid_argument("make_folds: fewer patients than folds");
  std::vector<std::string> ids = patient_ids;
  Rng rng(seed);
  rng.shuffle(ids);
  FoldSplit split;
  split.folds.assign(size_t(k), {});
  for (size_t i = 0; i < ids.size(); ++i)
    split.folds[i % size_t(k)].push_back(ids[i]);
  return split;
}

std::vector<std::string> FoldSplit::train_ids(int fold) const {
  std::vector<std::string> out;
  for (size_t i = 0; i < folds.size(); ++i)
    if (int(i) != fold)
      out.insert(out.end(), folds[i].begin(), folds[i].end());
  return out;
}

const std::vector<std::string>& FoldSplit::test_ids(int fold) const {
  return folds.at(size_t(fold));
}

AugmentOp draw_augment(Rng& rng, double prob) {
  if (rng.uniform() >= prob) return AugmentOp::kNone;
  switch (rng.uniform_int(0, 4)) {
    case 0: return AugmentOp::kVFlip;
    case 1: return AugmentOp::kHFlip;
    case 2: return AugmentOp::kRot90;
    case 3: return AugmentOp::kRot180;
    default: return AugmentOp::kRot270;
  }
}

Tensor apply_augment(const Tensor& t, AugmentOp op) {
  if (op == AugmentOp::kNone) return t;
  const Shape4 s = t.shape();
  const bool swaps = op == AugmentOp::kRot90 || op == AugmentOp::kRot270;
  if (swaps && s.h != s.w)
    throw std::invalid_argument("apply_augment: rot90 needs square images");
  Tensor out(s);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int r = 0; r < s.h; ++r)
        for (int col = 0; col < s.w; ++col) {
          int sr = r, sc = col;
          switch (op) {
            case AugmentOp::kVFlip: sr = s.h - 1 - r; break;
            case AugmentOp::kHFlip: sc = s.w - 1 - col; break;
            case AugmentOp::kRot90:  // 90 degrees counter-clockwise
              sr = col;
              sc = s.w - 1 - r;
              break;
            case AugmentOp::kRot180:
              sr = s.h - 1 - r;
              sc = s.w - 1 - col;
              break;
            case AugmentOp::kRot270:
              sr = s.h - 1 - col;
              sc = r;
              break;
            case AugmentOp::kNone: break;
          }
          out.at(n, c, r, col) = t.at(n, c, sr, sc);
        }
  return out;
}

std::pair<Tensor, Tensor> augment(const Tensor& img, const Tensor& mask,
                                  Rng& rng, double prob) {
  if (img.shape().h != mask.shape().h || img.shape().w != mask.shape().w)
    throw std::invalid_argument("augment: image/mask dims mismatch");
  const AugmentOp op = draw_augment(rng, prob);
  return {apply_augment(img, op), apply_augment(mask, op)};
}

template <typename T>
TensorT<T> combined_loss(TapeT<T>* tape, const TensorT<T>& pred,
                         const TensorT<T>& target) {
  return add(tape, scale(tape, soft_dice_loss(tape, pred, target), T(0.5)),
             scale(tape, bce_loss(tape, pred, target), T(0.5)));
}

template TensorT<float> combined_loss<float>(TapeT<float>*,
                                             const TensorT<float>&,
                                             const TensorT<float>&);
template TensorT<double> combined_loss<double>(TapeT<double>*,
                                               const TensorT<double>&,
                                               const TensorT<double>&);

void freeze_encoder(ModelGraph& model, bool frozen) {
  model.set_encoder_frozen(frozen);
}

void optimizer_step(ModelGraph& model,
                    std::map<std::string, AdamState<float>>& states,
                    float lr) {
  for (auto& e : model.entries()) {
    if (!e.trainable) continue;
    if (model.encoder_frozen() && e.encoder) continue;
    if (!e.tensor.has_grad()) continue;
    adam_step(e.tensor, states[e.name], lr);
  }
}

namespace {

Tensor stack_batch(const std::vector<Tensor>& items) {
  const Shape4 s0 = items.front().shape();
  Tensor out({int(items.size()), s0.c, s0.h, s0.w});
  const int64_t per = s0.numel();
  for (size_t i = 0; i < items.size(); ++i)
    std::copy(items[i].data(), items[i].data() + per,
              out.data() + int64_t(i) * per);
  return out;
}

double batch_mean_dsc(const Tensor& pred, const Tensor& target) {
  const Shape4 s = pred.shape();
  double acc = 0;
  for (int n = 0; n < s.n; ++n) {
    MaskImage p(s.h, s.w), g(s.h, s.w);
    for (int r = 0; r < s.h; ++r)
      for (int c = 0; c < s.w; ++c) {
        p.at(r, c) = pred.at(n, 0, r, c) >= 0.5f ? 1 : 0;
        g.at(r, c) = target.at(n, 0, r, c) >= 0.5f ? 1 : 0;
      }
    acc += dsc(confusion(p, g)) / 100.0;
  }
  return acc / s.n;
}

}  // namespace

std::pair<double, double> evaluate_loss_dsc(ModelGraph& model,
                                            const std::vector<Sample>& samples,
                                            int batch_size) {
  double loss_acc = 0, dsc_acc = 0;
  int64_t count = 0;
  for (size_t at = 0; at < samples.size(); at += size_t(batch_size)) {
    const size_t end = std::min(samples.size(), at + size_t(batch_size));
    std::vector<Tensor> xs, ys;
    for (size_t i = at; i < end; ++i) {
      xs.push_back(samples[i].input);
      ys.push_back(samples[i].target);
    }
    auto bx = stack_batch(xs);
    auto by = stack_batch(ys);
    auto pred = model.forward(nullptr, bx, BnMode::kEval);
    const double l = combined_loss<float>(nullptr, pred, by).item();
    const int n = int(end - at);
    loss_acc += l * n;
    dsc_acc += batch_mean_dsc(pred, by) * n;
    count += n;
  }
  return {loss_acc / double(count), dsc_acc / double(count)};
}

namespace {

struct PhaseOutcome {
  bool early_stopped = false;
  bool nan_abort = false;
  std::string diagnostic;
};

// One optimization epoch: seeded shuffle, per-sample augmentation, Adam.
bool run_train_epoch(ModelGraph& model, const std::vector<Sample>& train_set,
                     const TrainConfig& cfg, int epoch_global, double lr,
                     std::map<std::string, AdamState<float>>& states,
                     std::string* diagnostic) {
  Rng base(cfg.seed);
  std::vector<int> order(train_set.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
  Rng shuffle_rng =
      base.child((uint64_t(epoch_global) << 32) | 0xffffffffull);
  shuffle_rng.shuffle(order);

  for (size_t at = 0; at < order.size(); at += size_t(cfg.batch_size)) {
    const size_t end = std::min(order.size(), at + size_t(cfg.batch_size));
    std::vector<Tensor> xs, ys;
    for (size_t i = at; i < end; ++i) {
      const int idx = order[i];
      Rng aug_rng = base.child((uint64_t(epoch_global) << 32) | uint64_t(idx));
      auto [ax, ay] = augment(train_set[size_t(idx)].input,
                              train_set[size_t(idx)].target, aug_rng,
                              cfg.augment_prob);
      xs.push_back(std::move(ax));
      ys.push_back(std::move(ay));
    }
    auto bx = stack_batch(xs);
    auto by = stack_batch(ys);

    Tape tape;
    auto pred = model.forward(&tape, bx, BnMode::kTrain);
    auto loss = combined_loss<float>(&tape, pred, by);
    if (!std::isfinite(loss.item())) {
      *diagnostic = "non-finite training loss at epoch " +
                    std::to_string(epoch_global + 1);
      return false;
    }
    backward(tape, loss);
    try {
      optimizer_step(model, states, float(lr));
    } catch (const std::runtime_error& e) {
      *diagnostic = e.what();
      return false;
    }
  }
  return true;
}

}  // namespace

TrainHistory fit(ModelGraph& model, const std::vector<Sample>& train_set,
                 const TrainConfig& cfg) {
  if (train_set.empty()) throw std::invalid_argument("fit: empty train set");
  if (cfg.batch_size < 1 || cfg.phase_a_lr <= 0 || cfg.phase_b_lr <= 0)
    throw std::invalid_argument("fit: bad config");

  TrainHistory hist;
  hist.stop_reason = "completed";
  int epoch_global = 0;

  auto end_of_epoch = [&](const std::string& phase, double lr) {
    auto [loss, train_dsc] =
        evaluate_loss_dsc(model, train_set, cfg.batch_size);
    hist.records.push_back({epoch_global + 1, phase, lr, loss, train_dsc});
    if (loss < hist.best_loss) {
      hist.best_loss = loss;
      if (!cfg.checkpoint_path.empty()) {
        save_checkpoint(model, cfg.checkpoint_path);
        hist.best_checkpoint = cfg.checkpoint_path;
      }
    }
    ++epoch_global;
    return loss;
  };

  // phase A: transfer phase, encoder frozen
  {
    freeze_encoder(model, true);
    std::map<std::string, AdamState<float>> states;
    for (int e = 0; e < cfg.phase_a_epochs; ++e) {
      if (!run_train_epoch(model, train_set, cfg, epoch_global, cfg.phase_a_lr,
                           states, &hist.diagnostic)) {
        hist.stop_reason = "nan-abort";
        freeze_encoder(model, false);
        return hist;
      }
      end_of_epoch("A", cfg.phase_a_lr);
    }
    freeze_encoder(model, false);
  }

  // phase B: fine-tuning with plateau decay and early stopping; the
  // optimizer restarts fresh for the new learning-rate regime
  {
    std::map<std::string, AdamState<float>> states;
    PlateauScheduler scheduler(cfg.phase_b_lr, cfg.plateau_factor, cfg.lr_floor,
                               cfg.plateau_patience);
    EarlyStopper stopper(cfg.early_stop_patience);
    for (int e = 0; e < cfg.phase_b_epochs; ++e) {
      const double lr = scheduler.lr();
      if (!run_train_epoch(model, train_set, cfg, epoch_global, lr, states,
                           &hist.diagnostic)) {
        hist.stop_reason = "nan-abort";
        return hist;
      }
      const double loss = end_of_epoch("B", lr);
      if (stopper.observe(loss)) {
        hist.stop_reason = "early-stop";
        break;
      }
      scheduler.observe(loss);
    }
  }
  return hist;
}

void write_history_jsonl(const TrainHistory& hist, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("history: cannot open " + path);
  for (const auto& r : hist.records) {
    nlohmann::json j;
    j["epoch"] = r.epoch;
    j["phase"] = r.phase;
    j["lr"] = r.lr;
    j["train_loss"] = r.train_loss;
    j["train_dsc"] = r.train_dsc;
    out << j.dump() << "\n";
  }
  nlohmann::json tail;
  tail["stop_reason"] = hist.stop_reason;
  tail["best_loss"] = hist.best_loss;
  tail["best_checkpoint"] = hist.best_checkpoint;
  if (!hist.diagnostic.empty()) tail["diagnostic"] = hist.diagnostic;
  out << tail.dump() << "\n";
}

}  // namespace m3b
