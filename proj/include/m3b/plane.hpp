#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace m3b {

// Simple dense H x W scalar plane.
template <typename T>
struct PlaneT {
  int h = 0, w = 0;
  std::vector<T> v;

  PlaneT() = default;
  PlaneT(int h_, int w_, T fill = T(0))
      : h(h_), w(w_), v(size_t(h_) * size_t(w_), fill) {
    if (h_ < 0 || w_ < 0) throw std::invalid_argument("plane: negative dims");
  }
  T& at(int r, int c) { return v[size_t(r) * w + c]; }
  T at(int r, int c) const { return v[size_t(r) * w + c]; }
  int64_t numel() const { return int64_t(h) * w; }
};

using Plane = PlaneT<float>;

// Bilinear resize with half-pixel centers and edge clamping.
template <typename T>
PlaneT<T> resize_bilinear(const PlaneT<T>& src, int oh, int ow) {
  if (oh < 1 || ow < 1)
    throw std::invalid_argument("resize_bilinear: degenerate output size");
  PlaneT<T> out(oh, ow);
  const double sy = double(src.h) / oh, sx = double(src.w) / ow;
  for (int r = 0; r < oh; ++r) {
    double fy = (r + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, double(src.h - 1));
    const int y0 = int(fy);
    const int y1 = std::min(y0 + 1, src.h - 1);
    const double wy = fy - y0;
    for (int c = 0; c < ow; ++c) {
      double fx = (c + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, double(src.w - 1));
      const int x0 = int(fx);
      const int x1 = std::min(x0 + 1, src.w - 1);
      const double wx = fx - x0;
      const double top = src.at(y0, x0) + wx * (src.at(y0, x1) - src.at(y0, x0));
      const double bot = src.at(y1, x0) + wx * (src.at(y1, x1) - src.at(y1, x0));
      out.at(r, c) = T(top + wy * (bot - top));
    }
  }
  return out;
}

template <typename T>
PlaneT<T> resize_nearest(const PlaneT<T>& src, int oh, int ow) {
  if (oh < 1 || ow < 1)
    throw std::invalid_argument("resize_nearest: degenerate output size");
  PlaneT<T> out(oh, ow);
  const double sy = double(src.h) / oh, sx = double(src.w) / ow;
  for (int r = 0; r < oh; ++r) {
    int y = std::min(int((r + 0.5) * sy), src.h - 1);
    for (int c = 0; c < ow; ++c) {
      int x = std::min(int((c + 0.5) * sx), src.w - 1);
      out.at(r, c) = src.at(y, x);
    }
  }
  return out;
}

}  // namespace m3b
