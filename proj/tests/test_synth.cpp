#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "m3b/image.hpp"
#include "m3b/nifti.hpp"
#include "m3b/synth.hpp"

using namespace m3b;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("phantoms are seed-deterministic") {
  PhantomSpec spec;
  spec.seed = 99;
  auto a = gen_phantom(spec);
  auto b = gen_phantom(spec);
  CHECK(a.volume.voxels == b.volume.voxels);
  for (size_t z = 0; z < a.masks.size(); ++z)
    CHECK(a.masks[z].px == b.masks[z].px);

  spec.seed = 100;
  auto c = gen_phantom(spec);
  CHECK(a.volume.voxels != c.volume.voxels);
}

TEST_CASE("mask foreground lies strictly inside the abdomen ellipse") {
  for (uint64_t seed : {1u, 7u, 23u}) {
    PhantomSpec spec;
    spec.seed = seed;
    auto ph = gen_phantom(spec);
    for (int z = 0; z < spec.depth; ++z)
      for (int y = 0; y < spec.height; ++y)
        for (int x = 0; x < spec.width; ++x)
          if (ph.masks[size_t(z)].at(y, x)) {
            const double ey = (y - ph.ell_cy) / ph.ell_ry;
            const double ex = (x - ph.ell_cx) / ph.ell_rx;
            CHECK(ey * ey + ex * ex <= 1.0);
          }
  }
}

TEST_CASE("phantom HU histogram stays in the valid CT range") {
  PhantomSpec spec;
  spec.seed = 5;
  auto ph = gen_phantom(spec);
  int16_t lo = 32767, hi = -32768;
  for (int16_t v : ph.volume.voxels) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(lo >= -1000);
  CHECK(hi <= 400);
}

TEST_CASE("every phantom passes slice_filter with at least one slice") {
  for (uint64_t seed = 1; seed <= 12; ++seed) {
    PhantomSpec spec;
    spec.seed = seed;
    auto ph = gen_phantom(spec);
    CHECK(!slice_filter(ph.masks).empty());
  }
}

TEST_CASE("abdomen_crop recovers the analytic ellipse bbox despite arcs") {
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    PhantomSpec spec;
    spec.seed = seed * 31;
    auto ph = gen_phantom(spec);
    const int z = spec.depth / 2;
    auto img = window_to_u8(slice_of(ph.volume, z));
    auto res = abdomen_crop(img);
    REQUIRE(!res.record.uncropped);
    CHECK(std::abs(res.record.r0 - (ph.ell_cy - ph.ell_ry)) <= 1.0);
    CHECK(std::abs(res.record.c0 - (ph.ell_cx - ph.ell_rx)) <= 1.0);
    CHECK(std::abs(res.record.r1 - (ph.ell_cy + ph.ell_ry)) <= 1.0);
    CHECK(std::abs(res.record.c1 - (ph.ell_cx + ph.ell_rx)) <= 1.0);
  }
}

TEST_CASE("corpus generation is reproducible and readable") {
  const auto dir = fs::temp_directory_path() / "m3b_corpus_a";
  const auto dir2 = fs::temp_directory_path() / "m3b_corpus_b";
  fs::remove_all(dir);
  fs::remove_all(dir2);
  PhantomSpec proto;
  proto.depth = 3;
  proto.height = proto.width = 96;
  proto.blob_radius_lo = 6;
  proto.blob_radius_hi = 10;
  gen_corpus(dir.string(), 4, 42, proto);
  gen_corpus(dir2.string(), 4, 42, proto);

  auto manifest = read_manifest(dir.string());
  REQUIRE(manifest.cases.size() == 4);
  CHECK(manifest.cases[0].id == "case_000");
  CHECK(manifest.cases[3].id == "case_003");

  // byte-identical regeneration
  CHECK(slurp(dir / "manifest.json") == slurp(dir2 / "manifest.json"));
  for (const auto& c : manifest.cases) {
    CHECK(slurp(dir / c.volume_path) == slurp(dir2 / c.volume_path));
    CHECK(slurp(dir / c.mask_path) == slurp(dir2 / c.mask_path));
  }

  // volumes and masks round-trip through the NIfTI layer
  auto vol = read_nifti((dir / manifest.cases[0].volume_path).string());
  CHECK(!vol.masks.has_value());
  CHECK(vol.volume.d == 3);
  CHECK(vol.volume.h == 96);
  auto mask = read_nifti((dir / manifest.cases[0].mask_path).string());
  REQUIRE(mask.masks.has_value());
  CHECK(mask.masks->size() == 3);

  CHECK_THROWS_AS(gen_corpus((dir / "sub").string(), 3, 1, proto),
                  std::invalid_argument);
}
