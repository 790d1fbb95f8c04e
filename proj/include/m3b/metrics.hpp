#pragma once

#include <vector>

#include "m3b/image.hpp"

namespace m3b {

struct ConfusionCounts {
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  int64_t total() const { return tp + fp + fn + tn; }
};

ConfusionCounts confusion(const MaskImage& pred, const MaskImage& gt);

// All five scores are percentages in [0, 100]. Empty-denominator convention:
// a score whose denominator is zero is 100 when the counterpart mask is also
// empty (nothing to find, nothing predicted) and 0 otherwise.
double dsc(const ConfusionCounts& c);
double iou(const ConfusionCounts& c);
double specificity(const ConfusionCounts& c);
double precision(const ConfusionCounts& c);
double recall(const ConfusionCounts& c);

struct MetricStat {
  double mean = 0.0;
  double stddev = 0.0;  // population
  int64_t n = 0;
};

struct MetricsReport {
  MetricStat dsc, iou, specificity, precision, recall;
};

MetricStat aggregate_values(const std::vector<double>& values);
MetricsReport aggregate(const std::vector<ConfusionCounts>& per_image);

}  // namespace m3b
