#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "m3b/metrics.hpp"
#include "m3b/rng.hpp"

using namespace m3b;

namespace {

MaskImage random_mask(Rng& rng, int h, int w, double density) {
  MaskImage m(h, w);
  for (auto& p : m.px) p = rng.uniform() < density ? 1 : 0;
  return m;
}

// Independent per-pixel double-loop oracle for all five scores.
struct OracleScores {
  double dsc, iou, spec, prec, rec;
};

OracleScores oracle(const MaskImage& pred, const MaskImage& gt) {
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (int r = 0; r < pred.h; ++r)
    for (int c = 0; c < pred.w; ++c) {
      const bool p = pred.at(r, c) != 0, g = gt.at(r, c) != 0;
      tp += p && g;
      fp += p && !g;
      fn += !p && g;
      tn += !p && !g;
    }
  OracleScores s{};
  s.dsc = (2 * tp + fp + fn) ? 200.0 * tp / (2 * tp + fp + fn) : 100.0;
  s.iou = (tp + fp + fn) ? 100.0 * tp / (tp + fp + fn) : 100.0;
  s.spec = (tn + fp) ? 100.0 * tn / (tn + fp) : 100.0;
  s.prec = (tp + fp) ? 100.0 * tp / (tp + fp) : (fn == 0 ? 100.0 : 0.0);
  s.rec = (tp + fn) ? 100.0 * tp / (tp + fn) : (fp == 0 ? 100.0 : 0.0);
  return s;
}

}  // namespace

TEST_CASE("confusion counts") {
  MaskImage pred(2, 2), gt(2, 2);
  pred.at(0, 0) = 1;
  pred.at(0, 1) = 1;
  gt.at(0, 1) = 1;
  gt.at(1, 1) = 1;
  auto c = confusion(pred, gt);
  CHECK(c.tp == 1);
  CHECK(c.fp == 1);
  CHECK(c.fn == 1);
  CHECK(c.tn == 1);
  CHECK(c.total() == 4);
  CHECK(dsc(c) == doctest::Approx(50.0));
  CHECK(iou(c) == doctest::Approx(100.0 / 3.0));

  MaskImage both(3, 3);
  both.at(1, 1) = 1;
  auto same = confusion(both, both);
  CHECK(same.fp == 0);
  CHECK(same.fn == 0);
  CHECK(dsc(same) == 100.0);
  CHECK(iou(same) == 100.0);
  CHECK(precision(same) == 100.0);
  CHECK(recall(same) == 100.0);
  CHECK(specificity(same) == 100.0);

  MaskImage bad(2, 3);
  CHECK_THROWS_AS(confusion(pred, bad), std::invalid_argument);
}

TEST_CASE("empty-mask conventions") {
  MaskImage empty(4, 4);
  auto ee = confusion(empty, empty);
  CHECK(ee.tn == 16);
  CHECK(dsc(ee) == 100.0);
  CHECK(iou(ee) == 100.0);
  CHECK(precision(ee) == 100.0);
  CHECK(recall(ee) == 100.0);

  MaskImage gt(4, 4);
  gt.at(2, 2) = 1;
  auto en = confusion(empty, gt);
  CHECK(dsc(en) == 0.0);
  CHECK(recall(en) == 0.0);
  CHECK(precision(en) == 0.0);  // predicted nothing but something was there
}

TEST_CASE("metrics match the per-pixel oracle exactly") {
  Rng rng(61);
  for (int trial = 0; trial < 100; ++trial) {
    const double dp = rng.uniform(0.0, 0.6), dg = rng.uniform(0.0, 0.6);
    auto pred = random_mask(rng, 64, 64, dp);
    auto gt = random_mask(rng, 64, 64, dg);
    auto c = confusion(pred, gt);
    auto o = oracle(pred, gt);
    CHECK(dsc(c) == o.dsc);
    CHECK(iou(c) == o.iou);
    CHECK(specificity(c) == o.spec);
    CHECK(precision(c) == o.prec);
    CHECK(recall(c) == o.rec);
  }
}

TEST_CASE("dsc dominates iou and follows the algebraic identity") {
  Rng rng(67);
  for (int trial = 0; trial < 50; ++trial) {
    auto pred = random_mask(rng, 32, 32, 0.4);
    auto gt = random_mask(rng, 32, 32, 0.4);
    auto c = confusion(pred, gt);
    if (c.tp == 0) continue;
    CHECK(dsc(c) >= iou(c));
    const double i = iou(c) / 100.0;
    CHECK(dsc(c) == doctest::Approx(100.0 * 2.0 * i / (1.0 + i)));
  }
}

TEST_CASE("swapping pred and gt exchanges precision and recall") {
  Rng rng(71);
  auto a = random_mask(rng, 32, 32, 0.3);
  auto b = random_mask(rng, 32, 32, 0.3);
  auto ab = confusion(a, b);
  auto ba = confusion(b, a);
  CHECK(precision(ab) == recall(ba));
  CHECK(recall(ab) == precision(ba));
  CHECK(dsc(ab) == dsc(ba));
  CHECK(iou(ab) == iou(ba));
}

TEST_CASE("aggregation") {
  auto s = aggregate_values({40.0, 60.0});
  CHECK(s.mean == doctest::Approx(50.0));
  CHECK(s.stddev == doctest::Approx(10.0));
  CHECK(s.n == 2);

  auto one = aggregate_values({73.25});
  CHECK(one.mean == doctest::Approx(73.25));
  CHECK(one.stddev == 0.0);

  auto p = aggregate_values({10, 20, 30, 40});
  auto q = aggregate_values({40, 10, 30, 20});
  CHECK(p.mean == q.mean);
  CHECK(p.stddev == q.stddev);

  CHECK_THROWS_AS(aggregate_values({}), std::invalid_argument);
  CHECK_THROWS_AS(aggregate({}), std::invalid_argument);

  MaskImage m(2, 2);
  m.at(0, 0) = 1;
  std::vector<ConfusionCounts> counts = {confusion(m, m), confusion(m, m)};
  auto rep = aggregate(counts);
  CHECK(rep.dsc.mean == 100.0);
  CHECK(rep.dsc.stddev == 0.0);
  CHECK(rep.recall.n == 2);
}
