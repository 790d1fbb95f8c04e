#include "m3b/image.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace m3b {

PlaneT<int16_t> slice_of(const Volume& vol, int z) {
  if (z < 0 || z >= vol.d) throw std::invalid_argument("slice_of: z out of range");
  PlaneT<int16_t> p(vol.h, vol.w);
  std::copy(vol.voxels.begin() + size_t(z) * vol.h * vol.w,
            vol.voxels.begin() + size_t(z + 1) * vol.h * vol.w, p.v.begin());
  return p;
}

GrayImage window_to_u8(const PlaneT<int16_t>& hu, int lo, int hi) {
  if (lo >= hi) throw std::invalid_argument("window_to_u8: lo must be < hi");
  GrayImage out(hu.h, hu.w);
  const double span = double(hi) - double(lo);
  for (int64_t i = 0; i < hu.numel(); ++i) {
    int v = hu.v[size_t(i)];
    v = std::clamp(v, lo, hi);
    out.px[size_t(i)] = uint8_t(std::lround(255.0 * (v - lo) / span));
  }
  return out;
}

GrayImage resample_inplane(const GrayImage& img, double sy, double sx) {
  if (sy <= 0 || sx <= 0)
    throw std::invalid_argument("resample_inplane: spacing must be > 0");
  const int oh = int(std::lround(img.h * sy));
  const int ow = int(std::lround(img.w * sx));
  if (oh < 1 || ow < 1)
    throw std::invalid_argument("resample_inplane: degenerate output size");
  if (oh == img.h && ow == img.w) return img;
  PlaneT<float> p = plane_from_gray(img);
  return gray_from_plane(resize_bilinear(p, oh, ow));
}

MaskImage resample_mask_inplane(const MaskImage& mask, double sy, double sx) {
  if (sy <= 0 || sx <= 0)
    throw std::invalid_argument("resample_mask_inplane: spacing must be > 0");
  const int oh = int(std::lround(mask.h * sy));
  const int ow = int(std::lround(mask.w * sx));
  if (oh < 1 || ow < 1)
    throw std::invalid_argument("resample_mask_inplane: degenerate output size");
  if (oh == mask.h && ow == mask.w) return mask;
  PlaneT<float> p(mask.h, mask.w);
  for (size_t i = 0; i < mask.px.size(); ++i) p.v[i] = float(mask.px[i]);
  PlaneT<float> r = resize_nearest(p, oh, ow);
  MaskImage out(oh, ow);
  for (size_t i = 0; i < out.px.size(); ++i) out.px[i] = r.v[i] > 0.5f ? 1 : 0;
  return out;
}

std::vector<int> slice_filter(const std::vector<MaskImage>& masks) {
  if (masks.empty()) throw std::invalid_argument("slice_filter: empty stack");
  int64_t max_area = 0;
  std::vector<int64_t> areas(masks.size());
  for (size_t i = 0; i < masks.size(); ++i) {
    areas[i] = masks[i].foreground();
    max_area = std::max(max_area, areas[i]);
  }
  std::vector<int> keep;
  if (max_area == 0) return keep;  // pancreas-free volume
  for (size_t i = 0; i < masks.size(); ++i)
    if (double(areas[i]) > 0.05 * double(max_area)) keep.push_back(int(i));
  return keep;
}

MaskImage binarize(const GrayImage& img, uint8_t delta) {
  MaskImage out(img.h, img.w);
  for (size_t i = 0; i < img.px.size(); ++i)
    out.px[i] = img.px[i] >= delta ? 1 : 0;
  return out;
}

namespace {

// 8-connected component labeling; labels are 1-based in raster-scan order of
// first contact, so results are deterministic.
struct Components {
  std::vector<int32_t> label;  // 0 = background
  std::vector<int64_t> area;   // per label, index 0 unused
  int h = 0, w = 0;
};

Components label_components(const MaskImage& mask) {
  Components comp;
  comp.h = mask.h;
  comp.w = mask.w;
  comp.label.assign(mask.px.size(), 0);
  comp.area.push_back(0);
  std::vector<int64_t> stack;
  int32_t next = 1;
  for (int64_t start = 0; start < int64_t(mask.px.size()); ++start) {
    if (!mask.px[size_t(start)] || comp.label[size_t(start)]) continue;
    int64_t area = 0;
    stack.push_back(start);
    comp.label[size_t(start)] = next;
    while (!stack.empty()) {
      const int64_t cur = stack.back();
      stack.pop_back();
      ++area;
      const int r = int(cur / mask.w), c = int(cur % mask.w);
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          if (!dr && !dc) continue;
          const int nr = r + dr, nc = c + dc;
          if (nr < 0 || nr >= mask.h || nc < 0 || nc >= mask.w) continue;
          const int64_t ni = int64_t(nr) * mask.w + nc;
          if (mask.px[size_t(ni)] && !comp.label[size_t(ni)]) {
            comp.label[size_t(ni)] = next;
            stack.push_back(ni);
          }
        }
    }
    comp.area.push_back(area);
    ++next;
  }
  return comp;
}

// Moore border following, clockwise, around one component's outer border.
// `start` is the component's raster-first pixel (west neighbor is background).
std::vector<std::pair<int, int>> trace_border(const Components& comp,
                                              int32_t id, int start_r,
                                              int start_c) {
  static const int dr[8] = {0, 1, 1, 1, 0, -1, -1, -1};
  static const int dc[8] = {1, 1, 0, -1, -1, -1, 0, 1};
  auto is_fg = [&](int r, int c) {
    return r >= 0 && r < comp.h && c >= 0 && c < comp.w &&
           comp.label[size_t(r) * comp.w + c] == id;
  };

  std::vector<std::pair<int, int>> pts;
  pts.emplace_back(start_r, start_c);

  int back = 4;  // direction from start pixel toward its (background) west
  int cr = start_r, cc = start_c;
  int first_move = -1;
  while (true) {
    int dir = -1;
    for (int k = 1; k <= 8; ++k) {
      const int d = (back + k) % 8;
      if (is_fg(cr + dr[d], cc + dc[d])) {
        dir = d;
        break;
      }
    }
    if (dir < 0) break;  // isolated pixel
    cr += dr[dir];
    cc += dc[dir];
    if (cr == start_r && cc == start_c && first_move == dir) break;
    if (first_move < 0) first_move = dir;
    if (cr == start_r && cc == start_c) {
      // re-entered the start; peek whether the next move repeats the cycle
      int nb = (dir + 4) % 8;
      int ndir = -1;
      for (int k = 1; k <= 8; ++k) {
        const int d = (nb + k) % 8;
        if (is_fg(cr + dr[d], cc + dc[d])) {
          ndir = d;
          break;
        }
      }
      if (ndir == first_move) break;
    }
    pts.emplace_back(cr, cc);
    back = (dir + 4) % 8;
    if (pts.size() > size_t(4) * comp.label.size()) break;  // safety net
  }
  return pts;
}

}  // namespace

std::vector<Contour> external_contours(const MaskImage& mask) {
  Components comp = label_components(mask);
  const int32_t n = int32_t(comp.area.size()) - 1;
  std::vector<Contour> out;
  if (n <= 0) return out;

  std::vector<std::pair<int, int>> first(size_t(n) + 1, {-1, -1});
  for (int r = 0; r < mask.h; ++r)
    for (int c = 0; c < mask.w; ++c) {
      const int32_t id = comp.label[size_t(r) * mask.w + c];
      if (id && first[size_t(id)].first < 0) first[size_t(id)] = {r, c};
    }

  for (int32_t id = 1; id <= n; ++id) {
    Contour ct;
    ct.points = trace_border(comp, id, first[size_t(id)].first,
                             first[size_t(id)].second);
    ct.area = comp.area[size_t(id)];
    ct.min_r = ct.max_r = ct.points.front().first;
    ct.min_c = ct.max_c = ct.points.front().second;
    for (auto& [r, c] : ct.points) {
      ct.min_r = std::min(ct.min_r, r);
      ct.max_r = std::max(ct.max_r, r);
      ct.min_c = std::min(ct.min_c, c);
      ct.max_c = std::max(ct.max_c, c);
    }
    out.push_back(std::move(ct));
  }
  return out;
}

namespace {

// Everything not reachable from the image border without entering the chosen
// component is "inside" it (the component plus its holes).
std::vector<uint8_t> filled_footprint(const Components& comp, int32_t id) {
  const int h = comp.h, w = comp.w;
  std::vector<uint8_t> outside(size_t(h) * w, 0);
  std::vector<int64_t> stack;
  auto push = [&](int r, int c) {
    const int64_t i = int64_t(r) * w + c;
    if (!outside[size_t(i)] && comp.label[size_t(i)] != id) {
      outside[size_t(i)] = 1;
      stack.push_back(i);
    }
  };
  for (int c = 0; c < w; ++c) {
    push(0, c);
    push(h - 1, c);
  }
  for (int r = 0; r < h; ++r) {
    push(r, 0);
    push(r, w - 1);
  }
  while (!stack.empty()) {
    const int64_t cur = stack.back();
    stack.pop_back();
    const int r = int(cur / w), c = int(cur % w);
    if (r > 0) push(r - 1, c);
    if (r + 1 < h) push(r + 1, c);
    if (c > 0) push(r, c - 1);
    if (c + 1 < w) push(r, c + 1);
  }
  for (auto& v : outside) v = !v;
  return outside;  // now marks the inside
}

MaskImage resample_to(const MaskImage& m, int oh, int ow) {
  if (m.h == oh && m.w == ow) return m;
  PlaneT<uint8_t> p;
  p.h = m.h;
  p.w = m.w;
  p.v = m.px;
  PlaneT<uint8_t> r = resize_nearest(p, oh, ow);
  MaskImage out(oh, ow);
  out.px = std::move(r.v);
  return out;
}

}  // namespace

CropResult abdomen_crop(const GrayImage& img, uint8_t delta) {
  CropResult res;
  res.record.src_h = img.h;
  res.record.src_w = img.w;

  MaskImage bin = binarize(img, delta);
  Components comp = label_components(bin);

  if (comp.area.size() <= 1) {
    res.record.uncropped = true;
    res.record.r1 = img.h;
    res.record.c1 = img.w;
    res.image = gray_from_plane(
        resize_bilinear(plane_from_gray(img), kStandardSize, kStandardSize));
    return res;
  }

  int32_t best = 1;
  for (int32_t id = 2; id < int32_t(comp.area.size()); ++id)
    if (comp.area[size_t(id)] > comp.area[size_t(best)]) best = id;

  const std::vector<uint8_t> inside = filled_footprint(comp, best);

  int r0 = img.h, c0 = img.w, r1 = -1, c1 = -1;
  for (int r = 0; r < img.h; ++r)
    for (int c = 0; c < img.w; ++c)
      if (comp.label[size_t(r) * img.w + c] == best) {
        r0 = std::min(r0, r);
        r1 = std::max(r1, r);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c);
      }

  PlaneT<float> cropped(r1 - r0 + 1, c1 - c0 + 1);
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c)
      cropped.at(r - r0, c - c0) =
          inside[size_t(r) * img.w + c] ? float(img.at(r, c)) : 0.f;

  res.image =
      gray_from_plane(resize_bilinear(cropped, kStandardSize, kStandardSize));
  res.record.r0 = r0;
  res.record.c0 = c0;
  res.record.r1 = r1 + 1;
  res.record.c1 = c1 + 1;
  return res;
}

MaskImage apply_crop_to_mask(const MaskImage& mask, const CropRecord& rec) {
  if (mask.h != rec.src_h || mask.w != rec.src_w)
    throw std::invalid_argument("apply_crop_to_mask: mask dims do not match record");
  if (rec.uncropped)
    return resample_to(mask, kStandardSize, kStandardSize);
  MaskImage region(rec.r1 - rec.r0, rec.c1 - rec.c0);
  for (int r = rec.r0; r < rec.r1; ++r)
    for (int c = rec.c0; c < rec.c1; ++c)
      region.at(r - rec.r0, c - rec.c0) = mask.at(r, c);
  return resample_to(region, kStandardSize, kStandardSize);
}

MaskImage uncrop_mask(const MaskImage& cropped, const CropRecord& rec) {
  if (cropped.h != kStandardSize || cropped.w != kStandardSize)
    throw std::invalid_argument("uncrop_mask: expected a standardized mask");
  if (rec.uncropped)
    return resample_to(cropped, rec.src_h, rec.src_w);
  MaskImage region = resample_to(cropped, rec.r1 - rec.r0, rec.c1 - rec.c0);
  MaskImage out(rec.src_h, rec.src_w);
  for (int r = 0; r < region.h; ++r)
    for (int c = 0; c < region.w; ++c)
      out.at(rec.r0 + r, rec.c0 + c) = region.at(r, c);
  return out;
}

PlaneT<float> plane_from_gray(const GrayImage& img) {
  PlaneT<float> p(img.h, img.w);
  for (size_t i = 0; i < img.px.size(); ++i) p.v[i] = float(img.px[i]);
  return p;
}

PlaneT<double> dplane_from_gray(const GrayImage& img) {
  PlaneT<double> p(img.h, img.w);
  for (size_t i = 0; i < img.px.size(); ++i) p.v[i] = double(img.px[i]);
  return p;
}

GrayImage gray_from_plane(const PlaneT<float>& p) {
  GrayImage out(p.h, p.w);
  for (size_t i = 0; i < out.px.size(); ++i)
    out.px[i] = uint8_t(std::clamp(std::lround(p.v[i]), 0l, 255l));
  return out;
}

}  // namespace m3b
