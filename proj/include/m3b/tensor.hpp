#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace m3b {

// All network math runs over dense N x C x H x W tensors, W fastest.
struct Shape4 {
  int n = 0, c = 0, h = 0, w = 0;
  int64_t numel() const { return int64_t(n) * c * h * w; }
  int64_t plane() const { return int64_t(h) * w; }
  bool operator==(const Shape4&) const = default;
  std::string str() const;
};

template <typename T>
struct TensorStore {
  Shape4 shape;
  std::vector<T> val;
  std::vector<T> grad;  // empty until backward touches this tensor
  bool requires_grad = false;
};

// Shared-storage handle; copies alias the same values and gradient.
template <typename T>
class TensorT {
 public:
  TensorT() = default;
  explicit TensorT(Shape4 s, T fill = T(0))
      : s_(std::make_shared<TensorStore<T>>()) {
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0)
      throw std::invalid_argument("tensor: negative dimension");
    s_->shape = s;
    s_->val.assign(static_cast<size_t>(s.numel()), fill);
  }
  static TensorT from(Shape4 s, std::vector<T> v) {
    TensorT t(s);
    if (static_cast<int64_t>(v.size()) != s.numel())
      throw std::invalid_argument("tensor: data length " +
                                  std::to_string(v.size()) +
                                  " does not match shape " + s.str());
    t.s_->val = std::move(v);
    return t;
  }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape4& shape() const { return s_->shape; }
  int64_t numel() const { return s_->shape.numel(); }

  T* data() { return s_->val.data(); }
  const T* data() const { return s_->val.data(); }
  std::vector<T>& vals() { return s_->val; }
  const std::vector<T>& vals() const { return s_->val; }

  T& at(int n, int c, int h, int w) {
    const Shape4& s = s_->shape;
    return s_->val[((int64_t(n) * s.c + c) * s.h + h) * s.w + w];
  }
  T at(int n, int c, int h, int w) const {
    return const_cast<TensorT*>(this)->at(n, c, h, w);
  }

  T item() const {
    if (numel() != 1) throw std::invalid_argument("item(): tensor not scalar");
    return s_->val[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool b) { s_->requires_grad = b; }

  bool has_grad() const { return defined() && !s_->grad.empty(); }
  std::vector<T>& grad() { return s_->grad; }
  const std::vector<T>& grad() const { return s_->grad; }
  void ensure_zero_grad() {
    s_->grad.assign(static_cast<size_t>(numel()), T(0));
  }
  void drop_grad() { s_->grad.clear(); s_->grad.shrink_to_fit(); }

  const std::shared_ptr<TensorStore<T>>& store() const { return s_; }

 private:
  std::shared_ptr<TensorStore<T>> s_;
};

// Records every differentiable op in execution order; replaying the nodes in
// reverse visits each exactly once. Single-owner, not thread-safe.
template <typename T>
class TapeT {
 public:
  using Store = std::shared_ptr<TensorStore<T>>;

  void record(std::vector<Store> touched, std::function<void()> fn) {
    outputs_.insert(touched.front().get());
    nodes_.push_back({std::move(touched), std::move(fn)});
  }

  bool produced(const TensorT<T>& t) const {
    return t.defined() && outputs_.count(t.store().get()) > 0;
  }

  size_t size() const { return nodes_.size(); }
  void clear() {
    nodes_.clear();
    outputs_.clear();
  }

  // backward() drives this; closures are released as they run so activation
  // memory is reclaimed during the sweep.
  template <typename Fn>
  void for_each_reverse(Fn&& visit) {
    for (size_t i = nodes_.size(); i-- > 0;) {
      visit(nodes_[i]);
      nodes_[i].fn = nullptr;
      nodes_[i].touched.clear();
    }
  }

  struct Node {
    std::vector<Store> touched;  // touched.front() is the node's output
    std::function<void()> fn;
  };
  std::vector<Node>& nodes() { return nodes_; }

 private:
  std::vector<Node> nodes_;
  std::unordered_set<const TensorStore<T>*> outputs_;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

enum class BnMode { kTrain, kEval };

// Trainables gamma/beta plus running statistics, all shaped 1xCx1x1.
template <typename T>
struct BatchNormParams {
  TensorT<T> gamma, beta;
  TensorT<T> running_mean, running_var;
  T momentum = T(0.99);
  T eps = T(1e-3);

  static BatchNormParams make(int channels) {
    BatchNormParams p;
    p.gamma = TensorT<T>({1, channels, 1, 1}, T(1));
    p.beta = TensorT<T>({1, channels, 1, 1}, T(0));
    p.running_mean = TensorT<T>({1, channels, 1, 1}, T(0));
    p.running_var = TensorT<T>({1, channels, 1, 1}, T(1));
    p.gamma.set_requires_grad(true);
    p.beta.set_requires_grad(true);
    return p;
  }
};

// Differentiable primitives. Every op records its backward closure on `tape`
// when one is supplied; tape == nullptr runs pure inference. Cross-correlation
// convention throughout (no kernel flip).
template <typename T>
TensorT<T> conv2d(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& w,
                  const TensorT<T>& bias, int stride, int pad);
template <typename T>
TensorT<T> depthwise_conv2d(TapeT<T>* tape, const TensorT<T>& x,
                            const TensorT<T>& w, int stride, int pad);
template <typename T>
TensorT<T> channel_mean(TapeT<T>* tape, const TensorT<T>& x);
template <typename T>
TensorT<T> channel_max(TapeT<T>* tape, const TensorT<T>& x);
template <typename T>
TensorT<T> concat_channels(TapeT<T>* tape, const TensorT<T>& a,
                           const TensorT<T>& b);
template <typename T>
TensorT<T> relu6(TapeT<T>* tape, const TensorT<T>& x);
template <typename T>
TensorT<T> sigmoid(TapeT<T>* tape, const TensorT<T>& x);
template <typename T>
TensorT<T> add(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> mul(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> scale(TapeT<T>* tape, const TensorT<T>& x, T factor);
template <typename T>
TensorT<T> sum(TapeT<T>* tape, const TensorT<T>& x);
template <typename T>
TensorT<T> batchnorm(TapeT<T>* tape, const TensorT<T>& x,
                     BatchNormParams<T>& p, BnMode mode);
template <typename T>
TensorT<T> upsample_bilinear2x(TapeT<T>* tape, const TensorT<T>& x);
template <typename T>
TensorT<T> soft_dice_loss(TapeT<T>* tape, const TensorT<T>& pred,
                          const TensorT<T>& target);
template <typename T>
TensorT<T> bce_loss(TapeT<T>* tape, const TensorT<T>& pred,
                    const TensorT<T>& target);

// Zeroes the gradient of every tensor the tape touched, seeds d(loss)=1 and
// replays the tape backwards.
template <typename T>
void backward(TapeT<T>& tape, const TensorT<T>& loss);

template <typename T>
struct AdamState {
  std::vector<T> m, v;
  int64_t t = 0;
  T beta1 = T(0.9), beta2 = T(0.999), eps = T(1e-8);
};

// One bias-corrected Adam update of `param` from its accumulated gradient.
// Aborts (throws) on non-finite gradients without touching the parameter.
template <typename T>
void adam_step(TensorT<T>& param, AdamState<T>& state, T lr);

// Worker cap for the OpenMP loops inside the primitives. Results are
// bitwise identical for any thread count.
void set_num_threads(int n);
int num_threads();

}  // namespace m3b
