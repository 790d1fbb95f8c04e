#include "m3b/wavelet.hpp"

#include <cmath>
#include <stdexcept>

namespace m3b {

WaveletFilters db2_filters() {
  const double s3 = std::sqrt(3.0);
  const double norm = 4.0 * std::sqrt(2.0);
  WaveletFilters f;
  f.lowpass = {(1.0 + s3) / norm, (3.0 + s3) / norm, (3.0 - s3) / norm,
               (1.0 - s3) / norm};
  for (int k = 0; k < 4; ++k)
    f.highpass[size_t(k)] = (k % 2 == 0 ? 1.0 : -1.0) * f.lowpass[size_t(3 - k)];
  return f;
}

namespace {

// y[n] = sum_k f[k] * x[(2n+k) mod N], n = 0..ceil(N/2)-1
template <typename T>
void analyze_1d(const T* x, int n, int stride, const std::array<double, 4>& f,
                T* lo_out, const std::array<double, 4>& g, T* hi_out,
                int out_stride) {
  const int half = (n + 1) / 2;
  for (int i = 0; i < half; ++i) {
    double lo = 0.0, hi = 0.0;
    for (int k = 0; k < 4; ++k) {
      const double v = double(x[((2 * i + k) % n) * stride]);
      lo += f[size_t(k)] * v;
      hi += g[size_t(k)] * v;
    }
    lo_out[i * out_stride] = T(lo);
    hi_out[i * out_stride] = T(hi);
  }
}

// x[(2n+k) mod N] += lo[n]*f[k] + hi[n]*g[k]
template <typename T>
void synthesize_1d(const T* lo, const T* hi, int half, int in_stride,
                   const std::array<double, 4>& f,
                   const std::array<double, 4>& g, T* x, int n, int stride) {
  for (int i = 0; i < n; ++i) x[i * stride] = T(0);
  for (int i = 0; i < half; ++i) {
    const double l = double(lo[i * in_stride]);
    const double h = double(hi[i * in_stride]);
    for (int k = 0; k < 4; ++k)
      x[((2 * i + k) % n) * stride] += T(l * f[size_t(k)] + h * g[size_t(k)]);
  }
}

}  // namespace

template <typename T>
SubbandSet<T> dwt2(const PlaneT<T>& img, const WaveletFilters& f) {
  if (img.h < 4 || img.w < 4)
    throw std::invalid_argument("dwt2: image smaller than filter support");
  const int hw = (img.w + 1) / 2;
  const int hh = (img.h + 1) / 2;

  // pass 1: filter along the width of every row
  PlaneT<T> rows_lo(img.h, hw), rows_hi(img.h, hw);
  for (int r = 0; r < img.h; ++r)
    analyze_1d(img.v.data() + size_t(r) * img.w, img.w, 1, f.lowpass,
               rows_lo.v.data() + size_t(r) * hw, f.highpass,
               rows_hi.v.data() + size_t(r) * hw, 1);

  // pass 2: filter along the height of every column
  SubbandSet<T> sb;
  sb.ll = PlaneT<T>(hh, hw);
  sb.horizontal = PlaneT<T>(hh, hw);
  sb.vertical = PlaneT<T>(hh, hw);
  sb.diagonal = PlaneT<T>(hh, hw);
  for (int c = 0; c < hw; ++c) {
    analyze_1d(rows_lo.v.data() + c, img.h, hw, f.lowpass, sb.ll.v.data() + c,
               f.highpass, sb.horizontal.v.data() + c, hw);
    analyze_1d(rows_hi.v.data() + c, img.h, hw, f.lowpass,
               sb.vertical.v.data() + c, f.highpass, sb.diagonal.v.data() + c,
               hw);
  }
  return sb;
}

template <typename T>
PlaneT<T> idwt2(const SubbandSet<T>& sb, const WaveletFilters& f) {
  const int hh = sb.ll.h, hw = sb.ll.w;
  for (const PlaneT<T>* p : {&sb.horizontal, &sb.vertical, &sb.diagonal})
    if (p->h != hh || p->w != hw)
      throw std::invalid_argument("idwt2: subband dims mismatch");
  const int H = hh * 2, W = hw * 2;

  // undo the column pass
  PlaneT<T> rows_lo(H, hw), rows_hi(H, hw);
  for (int c = 0; c < hw; ++c) {
    synthesize_1d(sb.ll.v.data() + c, sb.horizontal.v.data() + c, hh, hw,
                  f.lowpass, f.highpass, rows_lo.v.data() + c, H, hw);
    synthesize_1d(sb.vertical.v.data() + c, sb.diagonal.v.data() + c, hh, hw,
                  f.lowpass, f.highpass, rows_hi.v.data() + c, H, hw);
  }

  // undo the row pass
  PlaneT<T> out(H, W);
  for (int r = 0; r < H; ++r)
    synthesize_1d(rows_lo.v.data() + size_t(r) * hw,
                  rows_hi.v.data() + size_t(r) * hw, hw, 1, f.lowpass,
                  f.highpass, out.v.data() + size_t(r) * W, W, 1);
  return out;
}

template <typename T>
std::pair<PlaneT<T>, PlaneT<T>> vertical_details(const PlaneT<T>& img) {
  if (img.h < 8 || img.w < 8)
    throw std::invalid_argument("vertical_details: image must be at least 8x8");
  const WaveletFilters f = db2_filters();
  auto level1 = dwt2(img, f);
  auto level2 = dwt2(level1.ll, f);
  return {std::move(level1.vertical), std::move(level2.vertical)};
}

template <typename T>
PlaneT<T> detail_to_channel(const PlaneT<T>& detail, int out) {
  PlaneT<T> resized = resize_bilinear(detail, out, out);
  T lo = resized.v[0], hi = resized.v[0];
  for (T x : resized.v) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  const double range = double(hi) - double(lo);
  // a numerically flat plane (e.g. details of a constant image) is all zeros
  if (range <= 1e-9 * std::max({1.0, std::abs(double(lo)),
                                std::abs(double(hi))})) {
    return PlaneT<T>(out, out, T(0));
  }
  for (T& x : resized.v) x = T((double(x) - double(lo)) / range);
  return resized;
}

#define M3B_INSTANTIATE_WAVELET(T)                                          \
  template SubbandSet<T> dwt2<T>(const PlaneT<T>&, const WaveletFilters&); \
  template PlaneT<T> idwt2<T>(const SubbandSet<T>&, const WaveletFilters&); \
  template std::pair<PlaneT<T>, PlaneT<T>> vertical_details<T>(             \
      const PlaneT<T>&);                                                    \
  template PlaneT<T> detail_to_channel<T>(const PlaneT<T>&, int);

M3B_INSTANTIATE_WAVELET(float)
M3B_INSTANTIATE_WAVELET(double)

}  // namespace m3b
