#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "m3b/plane.hpp"

namespace m3b {

struct GrayImage {
  int h = 0, w = 0;
  std::vector<uint8_t> px;

  GrayImage() = default;
  GrayImage(int h_, int w_, uint8_t fill = 0)
      : h(h_), w(w_), px(size_t(h_) * size_t(w_), fill) {}
  uint8_t& at(int r, int c) { return px[size_t(r) * w + c]; }
  uint8_t at(int r, int c) const { return px[size_t(r) * w + c]; }
};

// Binary plane, values restricted to {0, 1}.
struct MaskImage {
  int h = 0, w = 0;
  std::vector<uint8_t> px;

  MaskImage() = default;
  MaskImage(int h_, int w_, uint8_t fill = 0)
      : h(h_), w(w_), px(size_t(h_) * size_t(w_), fill) {}
  uint8_t& at(int r, int c) { return px[size_t(r) * w + c]; }
  uint8_t at(int r, int c) const { return px[size_t(r) * w + c]; }
  int64_t foreground() const {
    int64_t n = 0;
    for (uint8_t p : px) n += p;
    return n;
  }
};

// 3-D CT scan in Hounsfield units with per-axis spacing in millimeters.
struct Volume {
  int d = 0, h = 0, w = 0;
  std::vector<int16_t> voxels;
  double sz = 1.0, sy = 1.0, sx = 1.0;

  Volume() = default;
  Volume(int d_, int h_, int w_, int16_t fill = 0)
      : d(d_), h(h_), w(w_), voxels(size_t(d_) * h_ * w_, fill) {}
  int16_t& at(int z, int y, int x) {
    return voxels[(size_t(z) * h + y) * w + x];
  }
  int16_t at(int z, int y, int x) const {
    return voxels[(size_t(z) * h + y) * w + x];
  }
};

// Ordered outer border of one 8-connected foreground component. `area` counts
// the component's foreground pixels, so contour areas sum to the mask's total
// foreground.
struct Contour {
  std::vector<std::pair<int, int>> points;  // (row, col), closed loop
  int64_t area = 0;
  int min_r = 0, min_c = 0, max_r = 0, max_c = 0;  // inclusive pixel bbox
};

// Source-geometry record of one abdomen_crop so masks and predictions can be
// mapped through the identical transform. bbox is [r0, r1) x [c0, c1) in the
// (resampled) source frame.
struct CropRecord {
  int slice = 0;
  int r0 = 0, c0 = 0, r1 = 0, c1 = 0;
  int src_h = 0, src_w = 0;
  bool uncropped = false;
};

inline constexpr int kStandardSize = 376;  // post-crop image side
inline constexpr uint8_t kContourThreshold = 77;

PlaneT<int16_t> slice_of(const Volume& vol, int z);

// Clamps HU to [lo, hi] and maps linearly onto [0, 255], rounding to nearest.
GrayImage window_to_u8(const PlaneT<int16_t>& hu, int lo = -100, int hi = 240);

// Bilinear resampling of a windowed slice to 1 mm in-plane spacing; target
// dims are round(H*sy) x round(W*sx).
GrayImage resample_inplane(const GrayImage& img, double sy, double sx);
MaskImage resample_mask_inplane(const MaskImage& mask, double sy, double sx);

// Keeps slice i iff area(mask_i) > 5% of the volume's maximal per-slice area.
std::vector<int> slice_filter(const std::vector<MaskImage>& masks);

// pixel >= delta -> 1 (inclusive lower bound)
MaskImage binarize(const GrayImage& img, uint8_t delta = kContourThreshold);

// Border following over 8-connected components; outermost borders only, hole
// boundaries never appear.
std::vector<Contour> external_contours(const MaskImage& mask);

struct CropResult {
  GrayImage image;  // kStandardSize x kStandardSize
  CropRecord record;
};

// Binarize, keep the largest external contour, zero everything outside its
// filled footprint (detached arcs and background), crop to the contour bbox
// and stretch to kStandardSize. An all-background image comes back whole with
// record.uncropped set.
CropResult abdomen_crop(const GrayImage& img, uint8_t delta = kContourThreshold);

// Same geometric transform for a ground-truth mask (nearest-neighbor).
MaskImage apply_crop_to_mask(const MaskImage& mask, const CropRecord& rec);

// Inverse transform: paste a cropped-frame mask back into source dims.
MaskImage uncrop_mask(const MaskImage& cropped, const CropRecord& rec);

PlaneT<float> plane_from_gray(const GrayImage& img);
PlaneT<double> dplane_from_gray(const GrayImage& img);
GrayImage gray_from_plane(const PlaneT<float>& p);  // rounds, clamps to [0,255]

}  // namespace m3b
