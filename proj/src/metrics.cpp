#include "m3b/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace m3b {

ConfusionCounts confusion(const MaskImage& pred, const MaskImage& gt) {
  if (pred.h != gt.h || pred.w != gt.w)
    throw std::invalid_argument("confusion: mask dims mismatch");
  ConfusionCounts c;
  for (size_t i = 0; i < pred.px.size(); ++i) {
    const bool p = pred.px[i] != 0, g = gt.px[i] != 0;
    if (p && g)
      ++c.tp;
    else if (p && !g)
      ++c.fp;
    else if (!p && g)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

double dsc(const ConfusionCounts& c) {
  const int64_t den = 2 * c.tp + c.fp + c.fn;
  if (den == 0) return 100.0;  // both masks empty
  return 200.0 * double(c.tp) / double(den);
}

double iou(const ConfusionCounts& c) {
  const int64_t den = c.tp + c.fp + c.fn;
  if (den == 0) return 100.0;
  return 100.0 * double(c.tp) / double(den);
}

double specificity(const ConfusionCounts& c) {
  const int64_t den = c.tn + c.fp;
  if (den == 0) return 100.0;  // no negatives exist
  return 100.0 * double(c.tn) / double(den);
}

double precision(const ConfusionCounts& c) {
  const int64_t den = c.tp + c.fp;
  if (den == 0) return (c.fn == 0) ? 100.0 : 0.0;  // predicted nothing
  return 100.0 * double(c.tp) / double(den);
}

double recall(const ConfusionCounts& c) {
  const int64_t den = c.tp + c.fn;
  if (den == 0) return (c.fp == 0) ? 100.0 : 0.0;  // nothing to find
  return 100.0 * double(c.tp) / double(den);
}

MetricStat aggregate_values(const std::vector<double>& values) {
  if (values.empty())
    throw std::invalid_argument("aggregate: no per-image values");
  MetricStat s;
  s.n = int64_t(values.size());
  double acc = 0;
  for (double v : values) acc += v;
  s.mean = acc / double(s.n);
  double var = 0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(var / double(s.n));
  return s;
}

MetricsReport aggregate(const std::vector<ConfusionCounts>& per_image) {
  if (per_image.empty())
    throw std::invalid_argument("aggregate: no per-image counts");
  std::vector<double> d, i, s, p, r;
  d.reserve(per_image.size());
  for (const auto& c : per_image) {
    d.push_back(dsc(c));
    i.push_back(iou(c));
    s.push_back(specificity(c));
    p.push_back(precision(c));
    r.push_back(recall(c));
  }
  MetricsReport rep;
  rep.dsc = aggregate_values(d);
  rep.iou = aggregate_values(i);
  rep.specificity = aggregate_values(s);
  rep.precision = aggregate_values(p);
  rep.recall = aggregate_values(r);
  return rep;
}

}  // namespace m3b
