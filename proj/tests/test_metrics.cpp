#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <set>
#include <vector>

#include "ppc/errors.hpp"
#include "ppc/metrics.hpp"
#include "ppc/random.hpp"

using namespace ppc;

namespace {

// std::vector<bool> has no contiguous storage to span over.
struct Labels {
  std::unique_ptr<bool[]> data;
  std::size_t n = 0;
  explicit Labels(const std::vector<int>& v) : data(std::make_unique<bool[]>(v.size())), n(v.size()) {
    for (std::size_t i = 0; i < n; ++i) data[i] = v[i] != 0;
  }
  std::span<const bool> span() const { return {data.get(), n}; }
};

// P(score of a positive < score of a negative), ties counted as half.
double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      pairs += 1.0;
      wins += s[i] < s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  }
  return wins / pairs;
}

// Candidate thresholds: every distinct score plus one above the largest.
std::vector<double> candidates(const std::vector<double>& s) {
  std::set<double> u(s.begin(), s.end());
  std::vector<double> out(u.begin(), u.end());
  out.push_back(std::nextafter(out.back(), 2.0));
  return out;
}

double f1_at(const std::vector<double>& s, const Labels& y, double alpha) {
  const ConfusionCounts c = confusion(s, y.span(), alpha);
  const double den = static_cast<double>(2 * c.tp + c.fp + c.fn);
  return den == 0.0 ? 0.0 : 2.0 * static_cast<double>(c.tp) / den;
}

double brute_average_precision(const std::vector<double>& s, const Labels& y) {
  double area = 0.0, prev = 0.0;
  for (double t : std::set<double>(s.begin(), s.end())) {
    const ConfusionCounts c = confusion(s, y.span(), std::nextafter(t, 2.0));
    const double r = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    const double p = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    area += (r - prev) * p;
    prev = r;
  }
  return area;
}

void random_case(Rng& rng, std::size_t n, std::vector<double>& s, std::vector<int>& y) {
  s.resize(n);
  y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = rng.uniform() < 0.4;
    // Coarse rounding produces ties.
    s[i] = std::round((rng.uniform() - (y[i] ? 0.2 : 0.0)) * 20.0) / 20.0;
    s[i] = std::clamp(s[i], 0.0, 1.0);
  }
  y[0] = 1;
  y[1] = 0;
}

}  // namespace

TEST_CASE("metrics from the reference confusion counts") {
  SUBCASE("sine column") {
    const ConfusionCounts c{95910, 685, 99315, 4090};
    const MetricsSuite m = metrics_suite(c);
    CHECK(*m.recall == doctest::Approx(0.959).epsilon(5e-4 / 0.959));
    CHECK(*m.precision == doctest::Approx(0.993).epsilon(5e-4 / 0.993));
    CHECK(*m.specificity == doctest::Approx(0.993).epsilon(5e-4 / 0.993));
    CHECK(*m.balanced_accuracy == doctest::Approx(0.976).epsilon(5e-4 / 0.976));
    CHECK(*m.mcc == doctest::Approx(0.953).epsilon(5e-4 / 0.953));
    CHECK(*m.f1 == doctest::Approx(0.976).epsilon(5e-4 / 0.976));
    // Independent evaluation in Python.
    CHECK(*m.recall == doctest::Approx(0.9591).epsilon(1e-9));
    CHECK(*m.precision == doctest::Approx(0.992909).epsilon(1e-6));
    CHECK(*m.specificity == doctest::Approx(0.99315).epsilon(1e-9));
    CHECK(*m.balanced_accuracy == doctest::Approx(0.976125).epsilon(1e-9));
    CHECK(*m.mcc == doctest::Approx(0.952803).epsilon(1e-6));
    CHECK(*m.f1 == doctest::Approx(0.975711).epsilon(1e-6));
  }
  SUBCASE("mnist column") {
    const ConfusionCounts c{88347875, 3925349, 6080573, 1646203};
    const MetricsSuite m = metrics_suite(c);
    CHECK(*m.recall == doctest::Approx(0.981708).epsilon(1e-6));
    CHECK(*m.precision == doctest::Approx(0.95746).epsilon(1e-6));
    CHECK(*m.specificity == doctest::Approx(0.607697).epsilon(1e-6));
    CHECK(*m.balanced_accuracy == doctest::Approx(0.794703).epsilon(1e-6));
    CHECK(*m.mcc == doctest::Approx(0.662388).epsilon(1e-6));
    CHECK(*m.f1 == doctest::Approx(0.969432).epsilon(1e-6));
  }
}

TEST_CASE("metrics suite edge cases") {
  const MetricsSuite perfect = metrics_suite({10, 0, 7, 0});
  for (const auto& v : {perfect.recall, perfect.precision, perfect.specificity, perfect.balanced_accuracy,
                        perfect.mcc, perfect.f1}) {
    REQUIRE(v.has_value());
    CHECK(*v == 1.0);
  }
  const MetricsSuite none_flagged = metrics_suite({0, 0, 7, 3});
  CHECK(*none_flagged.recall == 0.0);
  CHECK(*none_flagged.specificity == 1.0);
  CHECK_FALSE(none_flagged.precision.has_value());
  CHECK_FALSE(none_flagged.mcc.has_value());
  const MetricsSuite empty = metrics_suite({});
  CHECK_FALSE(empty.recall.has_value());
  CHECK_FALSE(empty.f1.has_value());
}

TEST_CASE("confusion counts") {
  const std::vector<double> s{0.01, 0.2, 0.05, 0.9, 1.0, 0.04};
  const Labels y({1, 0, 1, 0, 1, 0});
  const ConfusionCounts c = confusion(s, y.span(), 0.05);
  CHECK(c == ConfusionCounts{1, 1, 2, 2});
  CHECK(c.total() == 6);
  const std::vector<double> ones(6, 1.0);
  CHECK(confusion(ones, y.span(), 0.99) == ConfusionCounts{0, 0, 3, 3});
  const ConfusionCounts all = confusion(s, y.span(), 1.0);
  CHECK(all.tp + all.fp == 5);
  CHECK_THROWS_AS(confusion({}, {}, 0.5), DataError);
  CHECK_THROWS_AS(confusion(s, Labels({1, 0}).span(), 0.5), DataError);
}

TEST_CASE("auc against the pairwise oracle") {
  SUBCASE("six items") {
    const std::vector<double> s{0.02, 0.4, 0.4, 0.7, 0.1, 0.95};
    const std::vector<int> yv{1, 0, 1, 0, 0, 1};
    const Labels y(yv);
    CHECK(roc_auc(s, y.span()) == doctest::Approx(pairwise_auc(s, yv)).epsilon(1e-14));
    CHECK(roc_auc(s, y.span()) == doctest::Approx(4.5 / 9.0).epsilon(1e-14));
  }
  SUBCASE("random inputs up to 200 items") {
    Rng rng(31, 0);
    std::vector<double> s;
    std::vector<int> yv;
    for (std::size_t n : {2, 3, 10, 57, 200}) {
      for (int rep = 0; rep < 5; ++rep) {
        random_case(rng, n, s, yv);
        const Labels y(yv);
        CHECK(roc_auc(s, y.span()) == doctest::Approx(pairwise_auc(s, yv)).epsilon(1e-12));
        CHECK(pr_auc(s, y.span()) == doctest::Approx(brute_average_precision(s, y)).epsilon(1e-12));
      }
    }
  }
  SUBCASE("separated scores") {
    const std::vector<double> s{0.01, 0.02, 0.5, 0.8};
    const Labels y({1, 1, 0, 0});
    CHECK(roc_auc(s, y.span()) == 1.0);
    CHECK(pr_auc(s, y.span()) == 1.0);
  }
  SUBCASE("scores independent of labels") {
    Rng rng(32, 0);
    const std::size_t n = 20000;
    std::vector<double> s(n);
    std::vector<int> yv(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = rng.uniform();
      yv[i] = i % 2;
    }
    const double se = std::sqrt((n + 1.0) / (12.0 * (n / 2.0) * (n / 2.0)));
    CHECK(std::abs(roc_auc(s, Labels(yv).span()) - 0.5) < 3.0 * se);
  }
  CHECK_THROWS_AS(roc_auc(std::vector<double>{0.1, 0.2}, Labels({1, 1}).span()), DataError);
  CHECK_THROWS_AS(pr_auc(std::vector<double>{0.1, 0.2}, Labels({0, 0}).span()), DataError);
}

TEST_CASE("curves") {
  Rng rng(33, 0);
  std::vector<double> s;
  std::vector<int> yv;
  random_case(rng, 120, s, yv);
  const Labels y(yv);
  const auto roc = roc_curve(s, y.span());
  CHECK(roc.front().x == 0.0);
  CHECK(roc.front().y == 0.0);
  CHECK(roc.back().x == 1.0);
  CHECK(roc.back().y == 1.0);
  for (std::size_t k = 1; k < roc.size(); ++k) {
    CHECK(roc[k].threshold > roc[k - 1].threshold);
    CHECK(roc[k].x >= roc[k - 1].x);
    CHECK(roc[k].y >= roc[k - 1].y);
    const ConfusionCounts c = confusion(s, y.span(), roc[k].threshold);
    CHECK(roc[k].y == doctest::Approx(static_cast<double>(c.tp) / (c.tp + c.fn)));
  }
  const auto pr = pr_curve(s, y.span());
  for (std::size_t k = 1; k < pr.size(); ++k) {
    CHECK(pr[k].threshold > pr[k - 1].threshold);
    CHECK(pr[k].x >= pr[k - 1].x);
  }
  CHECK(pr.back().x == 1.0);
}

TEST_CASE("max-F1 threshold") {
  SUBCASE("separable scores flag exactly the positives") {
    const std::vector<double> s{0.001, 0.01, 0.02, 0.3, 0.6, 0.9};
    const Labels y({1, 1, 1, 0, 0, 0});
    const double a = select_threshold_max_f1(s, y.span());
    CHECK(confusion(s, y.span(), a) == ConfusionCounts{3, 0, 3, 0});
  }
  SUBCASE("one mislabeled point matches the exhaustive scan") {
    const std::vector<double> s{0.001, 0.01, 0.02, 0.3, 0.6, 0.9, 0.05};
    const Labels y({1, 1, 1, 0, 0, 0, 0});
    const double a = select_threshold_max_f1(s, y.span());
    double best = -1.0, best_alpha = 0.0;
    for (double c : candidates(s)) {
      const double f = f1_at(s, y, c);
      if (f > best) {
        best = f;
        best_alpha = c;
      }
    }
    CHECK(a == best_alpha);
  }
  SUBCASE("never worse than any candidate, ties to the smaller alpha") {
    Rng rng(34, 0);
    std::vector<double> s;
    std::vector<int> yv;
    for (std::size_t n : {5, 40, 300, 500}) {
      random_case(rng, n, s, yv);
      const Labels y(yv);
      const double a = select_threshold_max_f1(s, y.span());
      const double fa = f1_at(s, y, a);
      for (double c : candidates(s)) {
        if (c > 1.0) continue;
        CHECK(fa >= f1_at(s, y, c));
        if (f1_at(s, y, c) == fa) CHECK(a <= c);
      }
    }
  }
  SUBCASE("all scores equal") {
    const std::vector<double> s(4, 0.5);
    const Labels y({1, 0, 1, 1});
    const double a = select_threshold_max_f1(s, y.span());
    CHECK(confusion(s, y.span(), a) == ConfusionCounts{3, 1, 0, 0});
  }
  CHECK_THROWS_AS(select_threshold_max_f1(std::vector<double>{0.1}, Labels({1}).span()), DataError);
}

TEST_CASE("gaussian fit") {
  std::vector<double> xs, pdf;
  for (int i = 0; i <= 880; ++i) {
    const double x = -16.0 + 0.05 * i;
    xs.push_back(x);
    pdf.push_back(std::exp(-x * x / 8.0) / (2.0 * std::sqrt(2.0 * std::numbers::pi)));
  }
  const GaussianFit f = fit_gaussian(xs, pdf);
  CHECK(std::abs(f.mu) < 1e-3);
  CHECK(std::abs(f.sigma - 2.0) < 1e-3);

  std::vector<double> shifted = xs;
  for (double& x : shifted) x += 3.25;
  const GaussianFit g = fit_gaussian(shifted, pdf);
  CHECK(g.mu == doctest::Approx(f.mu + 3.25).epsilon(1e-12));
  CHECK(g.sigma == doctest::Approx(f.sigma).epsilon(1e-12));

  std::vector<double> scaled = pdf;
  for (double& p : scaled) p *= 17.0;
  CHECK(fit_gaussian(xs, scaled).sigma == doctest::Approx(f.sigma).epsilon(1e-12));
  CHECK_THROWS_AS(fit_gaussian(xs, std::vector<double>(xs.size(), 0.0)), DataError);
  CHECK_THROWS_AS(fit_gaussian(std::vector<double>{1.0}, std::vector<double>{1.0}), DataError);
}

TEST_CASE("ks uniformity statistic") {
  const std::size_t n = 1000;
  std::vector<double> grid;
  for (std::size_t i = 1; i <= n; ++i) grid.push_back(static_cast<double>(i) / n);
  CHECK(ks_uniformity(grid) <= 1.0 / n + 1e-15);
  CHECK(ks_uniformity(std::vector<double>(200, 0.5)) == doctest::Approx(0.5));
  Rng rng(35, 0);
  std::vector<double> u(10000);
  for (double& v : u) v = rng.uniform();
  CHECK(ks_uniformity(u) < 1.63 / std::sqrt(10000.0));
  CHECK_THROWS_AS(ks_uniformity({}), DataError);
}
