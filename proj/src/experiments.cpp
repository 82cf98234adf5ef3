#include "ppc/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "ppc/conformance.hpp"

namespace ppc {

template <typename T>
std::vector<PropPdf> evaluate_prop_model(const PpcModel<T>& model, const PropTestConfig& data, const PropGrid& grid) {
  const PipelineConfig& cfg = model.config();
  if (cfg.past_steps != 1 || cfg.future_steps != 1 || cfg.segment_size() != 1) {
    throw ConfigError("proportionality evaluation needs N_p = N_f = 1 and scalar segments");
  }
  if (!(grid.step > 0.0) || !(grid.hi > grid.lo)) throw ConfigError("proportionality grid must be non-empty");
  const auto n = static_cast<std::size_t>(std::floor((grid.hi - grid.lo) / grid.step + 1e-9)) + 1;
  std::vector<std::vector<double>> xs2(n);
  std::vector<double> xs(n);
  for (std::size_t j = 0; j < n; ++j) {
    xs[j] = grid.lo + static_cast<double>(j) * grid.step;
    xs2[j] = {xs[j]};
  }
  const auto z2 = model.encode(xs2);

  std::vector<PropPdf> out;
  for (double x1 : data.x1_values) {
    const std::vector<std::vector<double>> past{{x1}};
    const auto z1 = model.encode(past);
    const Forecast f = model.predict(z1).front();
    PropPdf pdf;
    pdf.x1 = x1;
    pdf.xs = xs;
    pdf.pdf.resize(n);
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      pdf.pdf[j] = log_likelihood(z2[j], f.z_hat, f.sigma);
      top = std::max(top, pdf.pdf[j]);
    }
    double mass = 0.0;
    for (double& v : pdf.pdf) {
      v = std::exp(v - top);
      mass += v;
    }
    for (double& v : pdf.pdf) v /= mass * grid.step;
    pdf.fit = fit_gaussian(pdf.xs, pdf.pdf);
    out.push_back(std::move(pdf));
  }
  return out;
}

std::vector<PropRunResult> run_prop_test(const PropTestOptions& options,
                                         const std::function<void(const PropRunResult&)>& on_run) {
  if (options.runs == 0) throw ConfigError("prop-test needs at least one run");
  std::vector<PropRunResult> out;
  for (std::size_t r = 0; r < options.runs; ++r) {
    const std::uint64_t seed = options.seed + r;
    PipelineConfig cfg = options.config;
    cfg.seed = seed;
    DatasetSpec train_spec;
    train_spec.kind = DatasetKind::prop;
    train_spec.prop = options.data;
    train_spec.count = options.train_count;
    train_spec.seed = seed;
    DatasetSpec val_spec = train_spec;
    val_spec.count = options.val_count;
    val_spec.seed = ~seed;
    const GeneratedSource train_data(train_spec);
    const GeneratedSource val_data(val_spec);

    PpcModel<float> model(cfg);
    PropRunResult result;
    result.run = r;
    result.training = train(model, train_data, val_data);
    result.pdfs = evaluate_prop_model(model, options.data, options.grid);
    if (on_run) on_run(result);
    out.push_back(std::move(result));
  }
  return out;
}

MeanSd mean_sd(std::span<const double> xs) {
  MeanSd m;
  if (xs.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  for (double x : xs) m.mean += x;
  m.mean /= static_cast<double>(xs.size());
  if (xs.size() < 2) {
    m.sd = std::numeric_limits<double>::quiet_NaN();
    return m;
  }
  for (double x : xs) m.sd += (x - m.mean) * (x - m.mean);
  m.sd = std::sqrt(m.sd / static_cast<double>(xs.size() - 1));
  return m;
}

std::vector<PropRow> summarize_prop_test(const PropTestConfig& data, std::span<const PropRunResult> runs) {
  std::vector<PropRow> rows;
  for (std::size_t i = 0; i < data.x1_values.size(); ++i) {
    PropRow row;
    row.x1 = data.x1_values[i];
    row.mu = data.mean(row.x1);
    row.sigma = data.stddev(row.x1);
    for (const auto& run : runs) {
      row.mu_hats.push_back(run.pdfs.at(i).fit.mu);
      row.sigma_hats.push_back(run.pdfs.at(i).fit.sigma);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_prop_csv(std::ostream& out, std::span<const PropRow> rows) {
  auto num = [](double v) { return std::isfinite(v) ? format_real(v) : std::string("NA"); };
  out << "x1,mu,sigma,mu_hat_mean,mu_hat_sd,sigma_hat_mean,sigma_hat_sd,runs\n";
  for (const auto& r : rows) {
    const MeanSd mu = mean_sd(r.mu_hats);
    const MeanSd sd = mean_sd(r.sigma_hats);
    out << format_real(r.x1) << ',' << format_real(r.mu) << ',' << format_real(r.sigma) << ',' << num(mu.mean) << ','
        << num(mu.sd) << ',' << num(sd.mean) << ',' << num(sd.sd) << ',' << r.mu_hats.size() << '\n';
  }
}

template <typename T>
std::vector<GridCell> evaluate_grid(const PpcModel<T>& model, const FrequencyGrid& grid) {
  const std::size_t cells = grid.cells_per_axis();
  std::vector<GridCell> out(cells * cells);
  for (std::size_t i = 0; i < cells; ++i) {
    for (std::size_t j = 0; j < cells; ++j) {
      out[i * cells + j].f_before = grid.center(i);
      out[i * cells + j].f_after = grid.center(j);
    }
  }
  const GridSource source(grid);
  score_source<T>(model, source, [&](std::size_t index, const ConformanceReport& r) {
    GridCell& c = out[index / grid.reps];
    c.mean_log_likelihood += r.mean_log_likelihood / static_cast<double>(grid.reps);
    c.mean_p += r.p_sequence / static_cast<double>(grid.reps);
  });
  return out;
}

void write_grid_csv(std::ostream& out, std::span<const GridCell> cells) {
  out << "f_before,f_after,mean_log_likelihood,mean_p\n";
  for (const auto& c : cells) {
    out << format_real(c.f_before) << ',' << format_real(c.f_after) << ',' << format_real(c.mean_log_likelihood) << ','
        << format_real(c.mean_p) << '\n';
  }
}

template std::vector<PropPdf> evaluate_prop_model<float>(const PpcModel<float>&, const PropTestConfig&, const PropGrid&);
template std::vector<PropPdf> evaluate_prop_model<double>(const PpcModel<double>&, const PropTestConfig&, const PropGrid&);
template std::vector<GridCell> evaluate_grid<float>(const PpcModel<float>&, const FrequencyGrid&);
template std::vector<GridCell> evaluate_grid<double>(const PpcModel<double>&, const FrequencyGrid&);

}  // namespace ppc
