#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "m3b/rng.hpp"
#include "m3b/wavelet.hpp"

using namespace m3b;

namespace {

PlaneT<double> random_plane(Rng& rng, int h, int w, double lo = -1.0,
                            double hi = 1.0) {
  PlaneT<double> p(h, w);
  for (auto& v : p.v) v = rng.uniform(lo, hi);
  return p;
}

double energy(const PlaneT<double>& p) {
  double s = 0;
  for (double v : p.v) s += v * v;
  return s;
}

double max_abs_diff(const PlaneT<double>& a, const PlaneT<double>& b) {
  double m = 0;
  for (size_t i = 0; i < a.v.size(); ++i)
    m = std::max(m, std::abs(a.v[i] - b.v[i]));
  return m;
}

// Direct 2-D analysis: every subband coefficient as an explicit double
// convolution over the periodic image, no separable row/column passes.
SubbandSet<double> dwt2_bruteforce(const PlaneT<double>& img,
                                   const WaveletFilters& f) {
  const int hh = (img.h + 1) / 2, hw = (img.w + 1) / 2;
  SubbandSet<double> sb;
  sb.ll = PlaneT<double>(hh, hw);
  sb.horizontal = PlaneT<double>(hh, hw);
  sb.vertical = PlaneT<double>(hh, hw);
  sb.diagonal = PlaneT<double>(hh, hw);
  for (int i = 0; i < hh; ++i)
    for (int j = 0; j < hw; ++j) {
      double ll = 0, ho = 0, ve = 0, di = 0;
      for (int k = 0; k < 4; ++k)
        for (int l = 0; l < 4; ++l) {
          const double v = img.at((2 * i + k) % img.h, (2 * j + l) % img.w);
          ll += f.lowpass[size_t(k)] * f.lowpass[size_t(l)] * v;
          ho += f.highpass[size_t(k)] * f.lowpass[size_t(l)] * v;
          ve += f.lowpass[size_t(k)] * f.highpass[size_t(l)] * v;
          di += f.highpass[size_t(k)] * f.highpass[size_t(l)] * v;
        }
      sb.ll.at(i, j) = ll;
      sb.horizontal.at(i, j) = ho;
      sb.vertical.at(i, j) = ve;
      sb.diagonal.at(i, j) = di;
    }
  return sb;
}

}  // namespace

TEST_CASE("db2 filter identities") {
  const auto f = db2_filters();
  double sh = 0, sh2 = 0, sg = 0, hg = 0;
  for (int k = 0; k < 4; ++k) {
    sh += f.lowpass[size_t(k)];
    sh2 += f.lowpass[size_t(k)] * f.lowpass[size_t(k)];
    sg += f.highpass[size_t(k)];
    hg += f.lowpass[size_t(k)] * f.highpass[size_t(k)];
  }
  CHECK(std::abs(sh - std::sqrt(2.0)) < 1e-12);
  CHECK(std::abs(sh2 - 1.0) < 1e-12);
  CHECK(std::abs(sg) < 1e-12);
  CHECK(std::abs(hg) < 1e-12);
  // even-shift orthogonality, the remaining orthonormality condition
  CHECK(std::abs(f.lowpass[0] * f.lowpass[2] + f.lowpass[1] * f.lowpass[3]) <
        1e-12);
}

TEST_CASE("constant image: LL doubles, details vanish") {
  const auto f = db2_filters();
  const double c = 3.25;
  PlaneT<double> img(16, 16, c);
  auto sb = dwt2(img, f);
  for (double v : sb.ll.v) CHECK(std::abs(v - 2.0 * c) < 1e-10);
  for (const auto* d : {&sb.horizontal, &sb.vertical, &sb.diagonal})
    for (double v : d->v) CHECK(std::abs(v) < 1e-10);
}

TEST_CASE("perfect reconstruction on random images") {
  const auto f = db2_filters();
  Rng rng(71);
  for (int size : {16, 32, 64}) {
    for (int trial = 0; trial < 5; ++trial) {
      auto img = random_plane(rng, size, size);
      auto rec = idwt2(dwt2(img, f), f);
      REQUIRE(rec.h == size);
      CHECK(max_abs_diff(img, rec) < 1e-10);
    }
  }
  // non-square as well
  auto img = random_plane(rng, 24, 40);
  CHECK(max_abs_diff(img, idwt2(dwt2(img, f), f)) < 1e-10);
}

TEST_CASE("energy conservation") {
  const auto f = db2_filters();
  Rng rng(73);
  for (int trial = 0; trial < 10; ++trial) {
    auto img = random_plane(rng, 32, 32);
    auto sb = dwt2(img, f);
    const double e = energy(sb.ll) + energy(sb.horizontal) +
                     energy(sb.vertical) + energy(sb.diagonal);
    CHECK(std::abs(e - energy(img)) < 1e-8);
  }
}

TEST_CASE("dwt2 equals the brute-force 2-D oracle") {
  const auto f = db2_filters();
  Rng rng(79);
  for (int trial = 0; trial < 10; ++trial) {
    auto img = random_plane(rng, 8, 8);
    auto got = dwt2(img, f);
    auto want = dwt2_bruteforce(img, f);
    CHECK(max_abs_diff(got.ll, want.ll) < 1e-10);
    CHECK(max_abs_diff(got.horizontal, want.horizontal) < 1e-10);
    CHECK(max_abs_diff(got.vertical, want.vertical) < 1e-10);
    CHECK(max_abs_diff(got.diagonal, want.diagonal) < 1e-10);
  }
}

TEST_CASE("vertical edge concentrates in the vertical subband") {
  const auto f = db2_filters();
  PlaneT<double> img(32, 32);
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 32; ++c) img.at(r, c) = c < 16 ? 0.0 : 1.0;
  auto sb = dwt2(img, f);
  CHECK(energy(sb.vertical) > 10.0 * energy(sb.horizontal) + 1e-12);
  CHECK(energy(sb.vertical) > 1e-6);
}

TEST_CASE("subband dims use ceiling halves") {
  const auto f = db2_filters();
  Rng rng(83);
  auto img = random_plane(rng, 9, 13);
  auto sb = dwt2(img, f);
  CHECK(sb.ll.h == 5);
  CHECK(sb.ll.w == 7);
  PlaneT<double> tiny(3, 3);
  CHECK_THROWS_AS(dwt2(tiny, f), std::invalid_argument);
}

TEST_CASE("idwt2 of zero subbands is zero; dim mismatch rejected") {
  const auto f = db2_filters();
  SubbandSet<double> sb;
  sb.ll = PlaneT<double>(8, 8);
  sb.horizontal = PlaneT<double>(8, 8);
  sb.vertical = PlaneT<double>(8, 8);
  sb.diagonal = PlaneT<double>(8, 8);
  auto img = idwt2(sb, f);
  for (double v : img.v) CHECK(v == 0.0);

  sb.diagonal = PlaneT<double>(4, 8);
  CHECK_THROWS_AS(idwt2(sb, f), std::invalid_argument);
}

TEST_CASE("LL-only reconstruction of a constant is the constant") {
  const auto f = db2_filters();
  PlaneT<double> img(16, 16, 5.0);
  auto sb = dwt2(img, f);
  // detail planes are already (numerically) zero for a constant
  auto rec = idwt2(sb, f);
  for (double v : rec.v) CHECK(std::abs(v - 5.0) < 1e-10);
}

TEST_CASE("vertical_details levels and dims") {
  Rng rng(89);
  auto img = random_plane(rng, 64, 64);
  auto [v1, v2] = vertical_details(img);
  CHECK(v1.h == 32);
  CHECK(v1.w == 32);
  CHECK(v2.h == 16);
  CHECK(v2.w == 16);

  PlaneT<double> flat(64, 64, 9.0);
  auto [f1, f2] = vertical_details(flat);
  for (double v : f1.v) CHECK(std::abs(v) < 1e-10);
  for (double v : f2.v) CHECK(std::abs(v) < 1e-10);

  PlaneT<double> small(4, 4);
  CHECK_THROWS_AS(vertical_details(small), std::invalid_argument);
}

TEST_CASE("level-2 vertical detail localizes vertical edges") {
  // bright vertical band with edges at columns 24 and 40; no wrap-around
  // discontinuity, so the only detail energy is at the band edges
  PlaneT<double> img(64, 64);
  for (int r = 0; r < 64; ++r)
    for (int c = 0; c < 64; ++c)
      img.at(r, c) = (c >= 24 && c < 40) ? 200.0 : 10.0;
  auto [v1, v2] = vertical_details(img);
  double e2 = 0;
  for (double v : v2.v) e2 += v * v;
  CHECK(e2 > 1e-6);
  // edges map to level-2 columns ~6 and ~10; far columns stay quiet
  for (int r = 2; r < 14; ++r) {
    double near_edge = 0, far_away = 0;
    for (int c = 4; c <= 12; ++c)
      near_edge = std::max(near_edge, std::abs(v2.at(r, c)));
    for (int c : {0, 1, 2, 14, 15})
      far_away = std::max(far_away, std::abs(v2.at(r, c)));
    CHECK(near_edge > 10.0 * far_away);
  }
}

TEST_CASE("detail_to_channel contract") {
  PlaneT<double> flat(20, 20, 7.7);
  auto z = detail_to_channel(flat, 64);
  CHECK(z.h == 64);
  CHECK(z.w == 64);
  for (double v : z.v) CHECK(v == 0.0);

  PlaneT<double> ramp(16, 16);
  for (int r = 0; r < 16; ++r)
    for (int c = 0; c < 16; ++c) ramp.at(r, c) = -2.0 + 4.0 * (c / 15.0);
  auto n = detail_to_channel(ramp, 64);
  CHECK(n.h == 64);
  double lo = 1e9, hi = -1e9;
  for (double v : n.v) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(lo == doctest::Approx(0.0));
  CHECK(hi == doctest::Approx(1.0));

  // output dims fixed regardless of input dims
  PlaneT<double> odd(13, 57, 1.0);
  odd.at(5, 5) = 2.0;
  auto c = detail_to_channel(odd, 64);
  CHECK(c.h == 64);
  CHECK(c.w == 64);
}
