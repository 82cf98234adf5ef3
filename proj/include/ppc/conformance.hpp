#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "ppc/model.hpp"
#include "ppc/training.hpp"

namespace ppc {

// Regularized gamma functions P(a, x) and Q(a, x) = 1 - P(a, x).
double regularized_gamma_p(double a, double x);
double regularized_gamma_q(double a, double x);
double log_regularized_gamma_q(double a, double x);

// P(chi2(k) > x).
double chi2_survival(double x, double k);

// Upper tail of the standard normal distribution.
double normal_tail(double d);

double mahalanobis(std::span<const double> z, std::span<const double> z_hat, std::span<const double> sigma);

// chi2_survival(d^2, N_e) with d the Mahalanobis distance.
double probability_of_conformance(std::span<const double> z, std::span<const double> z_hat,
                                  std::span<const double> sigma);

// Log of the diagonal Gaussian density of z.
double log_likelihood(std::span<const double> z, std::span<const double> z_hat, std::span<const double> sigma);

enum class Verdict { normal, anomalous };

// Anomalous iff p < alpha.
Verdict classify(double p, double alpha);

struct StepScore {
  std::size_t step = 0;  // 1-based forecast step
  double log_likelihood = 0.0;
  double distance = 0.0;
  double p = 1.0;
};

// Per-step metrics plus the sequence aggregate: p_sequence is the chi-squared
// survival of the summed squared distances with N_f * N_e degrees of freedom,
// and mean_log_likelihood averages the steps.
struct ConformanceReport {
  std::vector<StepScore> steps;
  double p_sequence = 1.0;
  double mean_log_likelihood = 0.0;
};

ConformanceReport make_report(std::span<const std::vector<double>> z_true, std::span<const Forecast> forecasts);

// Scores one sequence of N_p + N_f flattened segments.
template <typename T>
ConformanceReport score_sequence(const PpcModel<T>& model, std::span<const std::vector<double>> segments);

// Scores items [0, source.size()) in batches and hands each report to `sink` in index order.
template <typename T>
void score_source(const PpcModel<T>& model, const SequenceSource& source,
                  const std::function<void(std::size_t index, const ConformanceReport&)>& sink,
                  std::size_t chunk = 256);

}  // namespace ppc
