#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace ppc {

// Scores are probabilities of conformance: the positive (anomalous) class is
// the one with LOW scores, and an item is flagged when its score is below alpha.

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::uint64_t total() const { return tp + fp + tn + fn; }
  bool operator==(const ConfusionCounts&) const = default;
};

// labels: true = anomalous.
ConfusionCounts confusion(std::span<const double> scores, std::span<const bool> labels, double alpha);

// Undefined ratios (zero denominators) are empty.
struct MetricsSuite {
  std::optional<double> recall, precision, specificity, balanced_accuracy, mcc, f1;
};

MetricsSuite metrics_suite(const ConfusionCounts& c);

struct CurvePoint {
  double threshold = 0.0;
  double x = 0.0;
  double y = 0.0;
};

// (FPR, TPR) for alpha sweeping from below the lowest score to above the highest.
std::vector<CurvePoint> roc_curve(std::span<const double> scores, std::span<const bool> labels);
// (recall, precision) at each distinct score, recall increasing.
std::vector<CurvePoint> pr_curve(std::span<const double> scores, std::span<const bool> labels);

double roc_auc(std::span<const double> scores, std::span<const bool> labels);
// Step-wise average precision.
double pr_auc(std::span<const double> scores, std::span<const bool> labels);

// Alpha maximizing F1 among the distinct scores (each flagging everything
// strictly below it) plus one value above the maximum; ties go to the smaller alpha.
double select_threshold_max_f1(std::span<const double> scores, std::span<const bool> labels);

struct GaussianFit {
  double mu = 0.0;
  double sigma = 0.0;
};

// Moment fit to pdf values sampled on a uniform grid.
GaussianFit fit_gaussian(std::span<const double> xs, std::span<const double> pdf);

// sup |F_n(p) - p|.
double ks_uniformity(std::span<const double> ps);

}  // namespace ppc
