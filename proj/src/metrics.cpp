#include "ppc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "ppc/errors.hpp"

namespace ppc {

namespace {

void check_inputs(std::span<const double> scores, std::span<const bool> labels, const char* what) {
  if (scores.empty()) throw DataError(std::string(what) + ": empty input");
  if (scores.size() != labels.size()) {
    throw DataError(std::string(what) + ": " + std::to_string(scores.size()) + " scores vs " +
                    std::to_string(labels.size()) + " labels");
  }
  for (double s : scores) {
    if (!std::isfinite(s)) throw DataError(std::string(what) + ": non-finite score");
  }
}

// Distinct scores in ascending order with the positives and negatives at each.
struct Group {
  double score;
  std::uint64_t pos = 0;
  std::uint64_t neg = 0;
};

struct Groups {
  std::vector<Group> groups;
  std::uint64_t pos = 0;
  std::uint64_t neg = 0;
};

Groups group_scores(std::span<const double> scores, std::span<const bool> labels, const char* what, bool need_both) {
  check_inputs(scores, labels, what);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  Groups g;
  for (std::size_t i : order) {
    if (g.groups.empty() || g.groups.back().score != scores[i]) g.groups.push_back({scores[i]});
    if (labels[i]) {
      ++g.groups.back().pos;
      ++g.pos;
    } else {
      ++g.groups.back().neg;
      ++g.neg;
    }
  }
  if (need_both && (g.pos == 0 || g.neg == 0)) throw DataError(std::string(what) + ": both classes must be present");
  return g;
}

double ratio(std::uint64_t num, std::uint64_t den) { return static_cast<double>(num) / static_cast<double>(den); }

double f1_of(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn) {
  const std::uint64_t den = 2 * tp + fp + fn;
  return den == 0 ? 0.0 : ratio(2 * tp, den);
}

double above(double v) { return std::nextafter(v, std::numeric_limits<double>::infinity()); }

}  // namespace

ConfusionCounts confusion(std::span<const double> scores, std::span<const bool> labels, double alpha) {
  check_inputs(scores, labels, "confusion");
  ConfusionCounts c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool flagged = scores[i] < alpha;
    if (labels[i]) {
      flagged ? ++c.tp : ++c.fn;
    } else {
      flagged ? ++c.fp : ++c.tn;
    }
  }
  return c;
}

MetricsSuite metrics_suite(const ConfusionCounts& c) {
  MetricsSuite m;
  if (c.tp + c.fn) m.recall = ratio(c.tp, c.tp + c.fn);
  if (c.tp + c.fp) m.precision = ratio(c.tp, c.tp + c.fp);
  if (c.tn + c.fp) m.specificity = ratio(c.tn, c.tn + c.fp);
  if (m.recall && m.specificity) m.balanced_accuracy = 0.5 * (*m.recall + *m.specificity);
  if (2 * c.tp + c.fp + c.fn) m.f1 = f1_of(c.tp, c.fp, c.fn);
  const double den = static_cast<double>(c.tp + c.fp) * static_cast<double>(c.tp + c.fn) *
                     static_cast<double>(c.tn + c.fp) * static_cast<double>(c.tn + c.fn);
  if (den > 0.0) {
    const double num = static_cast<double>(c.tp) * static_cast<double>(c.tn) -
                       static_cast<double>(c.fp) * static_cast<double>(c.fn);
    m.mcc = num / std::sqrt(den);
  }
  return m;
}

std::vector<CurvePoint> roc_curve(std::span<const double> scores, std::span<const bool> labels) {
  const Groups g = group_scores(scores, labels, "roc_curve", true);
  std::vector<CurvePoint> out{{g.groups.front().score, 0.0, 0.0}};
  std::uint64_t tp = 0, fp = 0;
  for (std::size_t k = 0; k < g.groups.size(); ++k) {
    tp += g.groups[k].pos;
    fp += g.groups[k].neg;
    const double next = k + 1 < g.groups.size() ? g.groups[k + 1].score : above(g.groups[k].score);
    out.push_back({next, ratio(fp, g.neg), ratio(tp, g.pos)});
  }
  return out;
}

std::vector<CurvePoint> pr_curve(std::span<const double> scores, std::span<const bool> labels) {
  const Groups g = group_scores(scores, labels, "pr_curve", true);
  std::vector<CurvePoint> out;
  std::uint64_t tp = 0, flagged = 0;
  for (std::size_t k = 0; k < g.groups.size(); ++k) {
    tp += g.groups[k].pos;
    flagged += g.groups[k].pos + g.groups[k].neg;
    const double next = k + 1 < g.groups.size() ? g.groups[k + 1].score : above(g.groups[k].score);
    out.push_back({next, ratio(tp, g.pos), ratio(tp, flagged)});
  }
  return out;
}

double roc_auc(std::span<const double> scores, std::span<const bool> labels) {
  const auto curve = roc_curve(scores, labels);
  double area = 0.0;
  for (std::size_t k = 1; k < curve.size(); ++k) {
    area += (curve[k].x - curve[k - 1].x) * 0.5 * (curve[k].y + curve[k - 1].y);
  }
  return area;
}

double pr_auc(std::span<const double> scores, std::span<const bool> labels) {
  const auto curve = pr_curve(scores, labels);
  double area = 0.0, prev_recall = 0.0;
  for (const auto& p : curve) {
    area += (p.x - prev_recall) * p.y;
    prev_recall = p.x;
  }
  return area;
}

double select_threshold_max_f1(std::span<const double> scores, std::span<const bool> labels) {
  const Groups g = group_scores(scores, labels, "select_threshold_max_f1", true);
  // alpha = groups[k].score flags groups [0, k); the last candidate flags all.
  double best_alpha = g.groups.front().score;
  double best_f1 = -1.0;
  std::uint64_t tp = 0, fp = 0;
  const std::size_t n = g.groups.size();
  const bool can_flag_all = g.groups.back().score < 1.0;
  for (std::size_t k = 0; k <= n; ++k) {
    if (k == n && !can_flag_all) break;
    const double alpha = k < n ? g.groups[k].score : above(g.groups.back().score);
    const double f1 = f1_of(tp, fp, g.pos - tp);
    if (f1 > best_f1) {
      best_f1 = f1;
      best_alpha = alpha;
    }
    if (k < n) {
      tp += g.groups[k].pos;
      fp += g.groups[k].neg;
    }
  }
  return best_alpha;
}

GaussianFit fit_gaussian(std::span<const double> xs, std::span<const double> pdf) {
  if (xs.size() != pdf.size() || xs.size() < 2) throw DataError("fit_gaussian: need matching grids of >= 2 points");
  double mass = 0.0, first = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!(pdf[i] >= 0.0)) throw DataError("fit_gaussian: pdf values must be >= 0");
    mass += pdf[i];
    first += xs[i] * pdf[i];
  }
  if (!(mass > 0.0)) throw DataError("fit_gaussian: zero mass");
  GaussianFit fit;
  fit.mu = first / mass;
  double second = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) second += (xs[i] - fit.mu) * (xs[i] - fit.mu) * pdf[i];
  fit.sigma = std::sqrt(second / mass);
  return fit;
}

double ks_uniformity(std::span<const double> ps) {
  if (ps.empty()) throw DataError("ks_uniformity: empty input");
  std::vector<double> s(ps.begin(), ps.end());
  std::sort(s.begin(), s.end());
  const double n = static_cast<double>(s.size());
  double d = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double p = std::clamp(s[i], 0.0, 1.0);
    d = std::max({d, static_cast<double>(i + 1) / n - p, p - static_cast<double>(i) / n});
  }
  return d;
}

}  // namespace ppc
