#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "m3b/rng.hpp"
#include "m3b/tensor.hpp"

namespace testutil {

inline m3b::TensorT<double> rand_tensor(m3b::Rng& rng, m3b::Shape4 s,
                                        double lo = -1.0, double hi = 1.0) {
  m3b::TensorT<double> t(s);
  for (int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = rng.uniform(lo, hi);
  return t;
}

inline m3b::Tensor rand_tensorf(m3b::Rng& rng, m3b::Shape4 s, float lo = -1.f,
                                float hi = 1.f) {
  m3b::Tensor t(s);
  for (int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = float(rng.uniform(lo, hi));
  return t;
}

// Pushes values away from the given kink points so central differences do not
// straddle a non-differentiable point.
inline void avoid_kinks(m3b::TensorT<double>& t, std::vector<double> kinks,
                        double margin = 0.01) {
  for (int64_t i = 0; i < t.numel(); ++i)
    for (double k : kinks)
      if (std::abs(t.data()[i] - k) < margin)
        t.data()[i] = k + (t.data()[i] >= k ? margin : -margin);
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// Central finite differences against the tape gradients. `forward` must build
// a scalar loss from the supplied leaves (through the tape when given one).
// Returns the worst relative error over every element of every leaf.
inline double grad_check(
    std::vector<m3b::TensorT<double>> leaves,
    const std::function<m3b::TensorT<double>(m3b::TapeT<double>*)>& forward,
    double h = 1e-5) {
  for (auto& l : leaves) l.set_requires_grad(true);

  m3b::TapeT<double> tape;
  auto loss = forward(&tape);
  m3b::backward(tape, loss);

  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) analytic.push_back(l.grad());

  double worst = 0.0;
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto& l = leaves[li];
    for (int64_t i = 0; i < l.numel(); ++i) {
      const double keep = l.data()[i];
      l.data()[i] = keep + h;
      const double fp = forward(nullptr).item();
      l.data()[i] = keep - h;
      const double fm = forward(nullptr).item();
      l.data()[i] = keep;
      const double fd = (fp - fm) / (2.0 * h);
      worst = std::max(worst, rel_err(fd, analytic[li][size_t(i)]));
    }
  }
  return worst;
}

// Scalar projection loss: sum(out * fixed random weights). Exercises every
// output element with distinct sensitivities.
inline m3b::TensorT<double> project(m3b::TapeT<double>* tape,
                                    const m3b::TensorT<double>& out,
                                    const m3b::TensorT<double>& proj) {
  return m3b::sum(tape, m3b::mul(tape, out, proj));
}

}  // namespace testutil
