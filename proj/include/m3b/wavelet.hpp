#pragma once

#include <array>
#include <utility>

#include "m3b/plane.hpp"

namespace m3b {

// 4-tap orthonormal Daubechies pair; highpass is the quadrature mirror of the
// lowpass: g[k] = (-1)^k h[3-k].
struct WaveletFilters {
  std::array<double, 4> lowpass;
  std::array<double, 4> highpass;
};

WaveletFilters db2_filters();

// One analysis level. Orientation names follow the edge content each subband
// emphasizes: `vertical` is highpass along the width (row direction) and
// lowpass along the height, so vertical image edges light up there.
template <typename T>
struct SubbandSet {
  PlaneT<T> ll;
  PlaneT<T> horizontal;  // row-lowpass along width, highpass along height
  PlaneT<T> vertical;    // highpass along width, lowpass along height
  PlaneT<T> diagonal;
  int level = 1;
};

// Separable analysis with periodic boundary extension; each subband plane is
// ceil(H/2) x ceil(W/2). Requires H, W >= 4 (the filter support).
template <typename T>
SubbandSet<T> dwt2(const PlaneT<T>& img, const WaveletFilters& f);

// Synthesis bank; exact inverse of dwt2 for even input dims. Output is
// (2*sb.h) x (2*sb.w).
template <typename T>
PlaneT<T> idwt2(const SubbandSet<T>& sb, const WaveletFilters& f);

// Two-level vertical-detail extraction: V1 from the image, V2 from the
// level-1 LL. Requires at least 8x8 input.
template <typename T>
std::pair<PlaneT<T>, PlaneT<T>> vertical_details(const PlaneT<T>& img);

// Resizes a detail plane to out x out and min-max normalizes to [0, 1].
// Planes with (numerically) no range map to all-zeros.
template <typename T>
PlaneT<T> detail_to_channel(const PlaneT<T>& detail, int out = 64);

}  // namespace m3b
