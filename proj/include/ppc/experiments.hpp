#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "ppc/datagen.hpp"
#include "ppc/metrics.hpp"
#include "ppc/model.hpp"
#include "ppc/training.hpp"

namespace ppc {

// Normalized latent likelihood of x2 given x1, sampled on [lo, hi].
struct PropPdf {
  double x1 = 0.0;
  std::vector<double> xs;
  std::vector<double> pdf;
  GaussianFit fit;
};

struct PropGrid {
  double lo = -16.0;
  double hi = 28.0;
  double step = 0.05;
};

template <typename T>
std::vector<PropPdf> evaluate_prop_model(const PpcModel<T>& model, const PropTestConfig& data, const PropGrid& grid = {});

struct PropTestOptions {
  PipelineConfig config;  // proportionality architecture and schedule
  PropTestConfig data;
  PropGrid grid;
  std::size_t runs = 10;
  std::uint64_t seed = 0;
  std::size_t train_count = 100000;
  std::size_t val_count = 4096;
};

struct PropRunResult {
  std::size_t run = 0;
  TrainResult training;
  std::vector<PropPdf> pdfs;
};

// Trains `runs` independent models; run r uses seed + r for initialization,
// batch order and its training data.
std::vector<PropRunResult> run_prop_test(const PropTestOptions& options,
                                         const std::function<void(const PropRunResult&)>& on_run = {});

struct PropRow {
  double x1 = 0.0;
  double mu = 0.0;
  double sigma = 0.0;
  std::vector<double> mu_hats;
  std::vector<double> sigma_hats;
};

std::vector<PropRow> summarize_prop_test(const PropTestConfig& data, std::span<const PropRunResult> runs);

// x1,mu,sigma,mu_hat_mean,mu_hat_sd,sigma_hat_mean,sigma_hat_sd,runs; sd is NA for a single run.
void write_prop_csv(std::ostream& out, std::span<const PropRow> rows);

struct GridCell {
  double f_before = 0.0;
  double f_after = 0.0;
  double mean_log_likelihood = 0.0;
  double mean_p = 0.0;  // mean sequence-level probability of conformance
};

template <typename T>
std::vector<GridCell> evaluate_grid(const PpcModel<T>& model, const FrequencyGrid& grid);

void write_grid_csv(std::ostream& out, std::span<const GridCell> cells);

// Sample mean and standard deviation (n - 1); sd is NaN for fewer than two values.
struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;
};
MeanSd mean_sd(std::span<const double> xs);

}  // namespace ppc
