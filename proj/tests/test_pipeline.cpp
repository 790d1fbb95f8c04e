#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "m3b/pipeline.hpp"
#include "m3b/rng.hpp"
#include "m3b/synth.hpp"

using namespace m3b;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  auto p = fs::temp_directory_path() / "m3b_pipeline_tests";
  fs::create_directories(p);
  return p;
}

ModelGraph make_stage1(uint64_t seed = 1) {
  ModelConfig c;
  c.height = c.width = kStage1Size;
  c.use_mm_block = false;
  return ModelGraph::build(c, seed);
}

ModelGraph make_stage2(uint64_t seed = 2) {
  ModelConfig c;
  c.height = c.width = kStage2Size;
  c.use_mm_block = true;
  return ModelGraph::build(c, seed);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("threshold_prob puts the boundary pixel in the foreground") {
  PlaneT<float> p(1, 3);
  p.v = {0.4999f, 0.5f, 0.5001f};
  auto m = threshold_prob(p);
  CHECK(m.px[0] == 0);
  CHECK(m.px[1] == 1);
  CHECK(m.px[2] == 1);
}

TEST_CASE("roi_from_mask: extreme coordinates plus 15-pixel padding") {
  MaskImage m(kStandardSize, kStandardSize);
  for (int r = 100; r <= 150; ++r)
    for (int c = 120; c <= 200; ++c) m.at(r, c) = 1;
  auto box = roi_from_mask(m);
  CHECK(box.source == RoiBox::Source::kPredicted);
  CHECK(box.r0 == 85);
  CHECK(box.r1 == 166);
  CHECK(box.c0 == 105);
  CHECK(box.c1 == 216);
}

TEST_CASE("roi_from_mask: empty mask falls back to the centered default") {
  MaskImage empty(kStandardSize, kStandardSize);
  auto box = roi_from_mask(empty);
  CHECK(box.source == RoiBox::Source::kDefault);
  CHECK(box.height() == kDefaultRoiHeight);
  CHECK(box.width() == kDefaultRoiWidth);
  CHECK(box.r0 == 104);
  CHECK(box.r1 == 272);
  CHECK(box.c0 == 73);
  CHECK(box.c1 == 302);
}

TEST_CASE("roi_from_mask clamps at the frame edges") {
  MaskImage m(kStandardSize, kStandardSize);
  m.at(0, 5) = 1;
  m.at(10, 0) = 1;
  auto box = roi_from_mask(m);
  CHECK(box.r0 == 0);
  CHECK(box.c0 == 0);
  CHECK(box.r1 == 10 + kRoiPadding + 1);
  CHECK(box.c1 == 5 + kRoiPadding + 1);
}

TEST_CASE("roi boxes honor exact padding pre-clamp on random masks") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    MaskImage m(kStandardSize, kStandardSize);
    int mn_r = 1 << 30, mx_r = -1, mn_c = 1 << 30, mx_c = -1;
    const int points = rng.uniform_int(1, 40);
    for (int i = 0; i < points; ++i) {
      const int r = rng.uniform_int(0, kStandardSize - 1);
      const int c = rng.uniform_int(0, kStandardSize - 1);
      m.at(r, c) = 1;
      mn_r = std::min(mn_r, r);
      mx_r = std::max(mx_r, r);
      mn_c = std::min(mn_c, c);
      mx_c = std::max(mx_c, c);
    }
    auto box = roi_from_mask(m);
    CHECK(box.source == RoiBox::Source::kPredicted);
    CHECK(box.r0 == std::max(0, mn_r - kRoiPadding));
    CHECK(box.c0 == std::max(0, mn_c - kRoiPadding));
    CHECK(box.r1 == std::min(kStandardSize, mx_r + kRoiPadding + 1));
    CHECK(box.c1 == std::min(kStandardSize, mx_c + kRoiPadding + 1));
    CHECK(box.r0 >= 0);
    CHECK(box.r1 <= kStandardSize);
    CHECK(box.r0 < box.r1);
  }
}

TEST_CASE("make_multi_input contract") {
  Rng rng(23);
  GrayImage img(kStandardSize, kStandardSize);
  for (auto& p : img.px) p = uint8_t(rng.uniform_int(0, 255));
  RoiBox roi{100, 120, 200, 260};

  auto multi = make_multi_input(img, roi);
  CHECK(multi.shape() == Shape4{1, 3, kStage2Size, kStage2Size});
  for (int64_t i = 0; i < multi.numel(); ++i) {
    CHECK(multi.data()[i] >= 0.f);
    CHECK(multi.data()[i] <= 1.f);
  }

  // a flat region has no detail energy: channels 1 and 2 are exactly zero
  GrayImage flat(kStandardSize, kStandardSize, 180);
  auto fm = make_multi_input(flat, roi);
  const int64_t plane = int64_t(kStage2Size) * kStage2Size;
  for (int64_t i = 0; i < plane; ++i) {
    CHECK(fm.data()[i] == doctest::Approx(180.f / 255.f));
    CHECK(fm.data()[plane + i] == 0.f);
    CHECK(fm.data()[2 * plane + i] == 0.f);
  }

  // shrinking the roi never changes the output geometry
  RoiBox smaller{101, 121, 199, 259};
  auto sm = make_multi_input(img, smaller);
  CHECK(sm.shape() == multi.shape());

  // ablation hook blanks the detail channels
  auto zeroed = make_multi_input(img, roi, true);
  for (int64_t i = plane; i < 3 * plane; ++i) CHECK(zeroed.data()[i] == 0.f);

  RoiBox bad{10, 10, 10, 40};
  CHECK_THROWS_AS(make_multi_input(img, bad), std::invalid_argument);
}

TEST_CASE("stage1_infer contract") {
  auto s1 = make_stage1();
  Rng rng(29);
  GrayImage img(kStandardSize, kStandardSize);
  for (auto& p : img.px) p = uint8_t(rng.uniform_int(0, 255));

  auto out = stage1_infer(s1, img);
  CHECK(out.prob.h == kStage1Size);
  CHECK(out.mask.h == kStage1Size);
  CHECK(out.mask_std.h == kStandardSize);
  CHECK(out.mask_std.w == kStandardSize);
  for (float v : out.prob.v) {
    CHECK(v > 0.f);
    CHECK(v < 1.f);
  }
  for (size_t i = 0; i < out.prob.v.size(); ++i)
    CHECK(out.mask.px[i] == (out.prob.v[i] >= 0.5f ? 1 : 0));

  auto s2 = make_stage2();
  CHECK_THROWS_AS(stage1_infer(s2, img), std::invalid_argument);
  ModelGraph unbuilt;
  CHECK_THROWS_AS(stage1_infer(unbuilt, img), std::invalid_argument);
}

TEST_CASE("stage2_infer contract") {
  auto s2 = make_stage2();
  Rng rng(31);
  Tensor multi({1, 3, kStage2Size, kStage2Size});
  for (int64_t i = 0; i < multi.numel(); ++i)
    multi.data()[i] = float(rng.uniform());

  auto out = stage2_infer(s2, multi);
  CHECK(out.prob.h == kStage2Size);
  CHECK(out.mask.h == kStage2Size);
  auto again = stage2_infer(s2, multi);
  CHECK(out.prob.v == again.prob.v);

  Tensor zeros({1, 3, kStage2Size, kStage2Size}, 0.f);
  auto z = stage2_infer(s2, zeros);
  for (float v : z.prob.v) {
    CHECK(std::isfinite(v));
    CHECK(v > 0.f);
    CHECK(v < 1.f);
  }

  auto s1 = make_stage1();
  CHECK_THROWS_AS(stage2_infer(s1, multi), std::invalid_argument);
}

TEST_CASE("reassemble geometry") {
  CropRecord rec;
  rec.r0 = 40;
  rec.c0 = 50;
  rec.r1 = 240;
  rec.c1 = 260;
  rec.src_h = 320;
  rec.src_w = 320;

  MaskImage empty64(kStage2Size, kStage2Size);
  RoiBox roi{100, 120, 200, 260};
  auto out = reassemble(empty64, roi, rec);
  CHECK(out.h == 320);
  CHECK(out.foreground() == 0);

  MaskImage full64(kStage2Size, kStage2Size, 1);
  auto painted = reassemble(full64, roi, rec);
  CHECK(painted.foreground() > 0);
  // foreground stays inside the roi's back-projected footprint
  const double sy = double(rec.r1 - rec.r0) / kStandardSize;
  const double sx = double(rec.c1 - rec.c0) / kStandardSize;
  for (int r = 0; r < painted.h; ++r)
    for (int c = 0; c < painted.w; ++c)
      if (painted.at(r, c)) {
        CHECK(r >= int(rec.r0 + roi.r0 * sy) - 1);
        CHECK(r <= int(rec.r0 + roi.r1 * sy) + 1);
        CHECK(c >= int(rec.c0 + roi.c0 * sx) - 1);
        CHECK(c <= int(rec.c0 + roi.c1 * sx) + 1);
      }
}

TEST_CASE("ground-truth masks survive the crop/roi/64 round trip") {
  PhantomSpec spec;
  spec.seed = 77;
  spec.depth = 3;
  auto ph = gen_phantom(spec);
  const int z = 1;

  auto windowed = window_to_u8(slice_of(ph.volume, z));
  auto resampled = resample_inplane(windowed, ph.volume.sy, ph.volume.sx);
  auto crop = abdomen_crop(resampled);
  auto gt1mm =
      resample_mask_inplane(ph.masks[size_t(z)], ph.volume.sy, ph.volume.sx);
  auto gt376 = apply_crop_to_mask(gt1mm, crop.record);

  auto roi = roi_from_mask(gt376);
  MaskImage region(roi.height(), roi.width());
  for (int r = 0; r < region.h; ++r)
    for (int c = 0; c < region.w; ++c)
      region.at(r, c) = gt376.at(roi.r0 + r, roi.c0 + c);
  PlaneT<uint8_t> g;
  g.h = region.h;
  g.w = region.w;
  g.v = region.px;
  PlaneT<uint8_t> small = resize_nearest(g, kStage2Size, kStage2Size);
  MaskImage m64(kStage2Size, kStage2Size);
  m64.px = std::move(small.v);

  auto back = reassemble(m64, roi, crop.record);
  const double d = dsc(confusion(back, gt1mm));
  CHECK(d >= 90.0);
}

TEST_CASE("run_pipeline end to end with untrained models") {
  PhantomSpec spec;
  spec.seed = 41;
  spec.depth = 3;
  spec.height = spec.width = 128;
  spec.blob_radius_lo = 6;
  spec.blob_radius_hi = 9;
  auto ph = gen_phantom(spec);

  auto s1 = make_stage1();
  auto s2 = make_stage2();

  auto res = run_pipeline(ph.volume, &ph.masks, s1, s2);
  const auto retained = slice_filter(ph.masks);
  REQUIRE(res.slices.size() == retained.size());
  for (const auto& s : res.slices) {
    REQUIRE(s.error.empty());
    CHECK(s.roi.r0 >= 0);
    CHECK(s.roi.r1 <= kStandardSize);
    CHECK(s.mask.h == int(std::lround(128 * ph.volume.sy)));
    CHECK(s.dsc_pct.has_value());
  }
  REQUIRE(res.metrics.has_value());
  CHECK(res.metrics->dsc.n == int64_t(retained.size()));

  // without ground truth: all slices processed, no metrics
  auto blind = run_pipeline(ph.volume, nullptr, s1, s2);
  CHECK(blind.slices.size() == size_t(ph.volume.d));
  CHECK(!blind.metrics.has_value());

  // determinism: bit-identical masks across runs
  auto res2 = run_pipeline(ph.volume, &ph.masks, s1, s2);
  for (size_t i = 0; i < res.slices.size(); ++i)
    CHECK(res.slices[i].mask.px == res2.slices[i].mask.px);
}

TEST_CASE("write_predictions emits stable manifests and PNG masks") {
  PhantomSpec spec;
  spec.seed = 43;
  spec.depth = 2;
  spec.height = spec.width = 96;
  spec.blob_radius_lo = 6;
  spec.blob_radius_hi = 8;
  auto ph = gen_phantom(spec);
  auto s1 = make_stage1();
  auto s2 = make_stage2();
  auto res = run_pipeline(ph.volume, &ph.masks, s1, s2);

  const auto d1 = temp_dir() / "pred_a";
  const auto d2 = temp_dir() / "pred_b";
  fs::remove_all(d1);
  fs::remove_all(d2);
  write_predictions(d1.string(), "case_000", res);
  write_predictions(d2.string(), "case_000", res);

  CHECK(slurp(d1 / "case_000_manifest.jsonl") ==
        slurp(d2 / "case_000_manifest.jsonl"));
  for (const auto& s : res.slices) {
    char name[64];
    std::snprintf(name, sizeof(name), "case_000_%04d.png", s.slice);
    CHECK(fs::exists(d1 / name));
    CHECK(slurp(d1 / name) == slurp(d2 / name));
  }

  // manifest carries roi and dsc per line
  std::ifstream in(d1 / "case_000_manifest.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    ++lines;
    CHECK(line.find("\"roi\"") != std::string::npos);
    CHECK(line.find("\"dsc\"") != std::string::npos);
  }
  CHECK(lines == int(res.slices.size()));
}
