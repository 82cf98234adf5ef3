#include "ppc/conformance.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace ppc {

namespace {

constexpr int kMaxIterations = 100000;
constexpr double kTiny = 1e-300;
constexpr double kTolerance = 1e-16;

// log(e^-x x^a / Gamma(a))
double log_prefactor(double a, double x) { return -x + a * std::log(x) - std::lgamma(a); }

// P(a, x) by its power series; converges quickly for x < a + 1.
double gamma_p_series(double a, double x) {
  double ap = a;
  double del = 1.0 / a;
  double sum = del;
  for (int n = 0; n < kMaxIterations; ++n) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::abs(del) < std::abs(sum) * kTolerance) break;
  }
  return sum * std::exp(log_prefactor(a, x));
}

// log Q(a, x) by the modified Lentz continued fraction; for x >= a + 1.
double log_gamma_q_fraction(double a, double x) {
  double b = x + 1.0 - a;
  double c = 1.0 / kTiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < kMaxIterations; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < kTiny) d = kTiny;
    c = b + an / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kTolerance) break;
  }
  return log_prefactor(a, x) + std::log(h);
}

void check_args(double a, double x) {
  if (!(a > 0.0)) throw NumericError("incomplete gamma: shape must be > 0");
  if (!(x >= 0.0)) throw NumericError("incomplete gamma: x must be >= 0, got " + std::to_string(x));
}

void check_lengths(std::span<const double> z, std::span<const double> z_hat, std::span<const double> sigma) {
  if (z.size() != z_hat.size() || z.size() != sigma.size() || z.empty()) {
    throw ShapeError("conformance: z, z_hat and sigma lengths differ (" + std::to_string(z.size()) + ", " +
                     std::to_string(z_hat.size()) + ", " + std::to_string(sigma.size()) + ")");
  }
  for (double s : sigma) {
    if (!(s > 0.0)) throw NumericError("conformance: sigma must be > 0");
  }
}

}  // namespace

double regularized_gamma_p(double a, double x) {
  check_args(a, x);
  if (x == 0.0) return 0.0;
  if (x < a + 1.0) return std::clamp(gamma_p_series(a, x), 0.0, 1.0);
  return std::clamp(-std::expm1(log_gamma_q_fraction(a, x)), 0.0, 1.0);
}

double log_regularized_gamma_q(double a, double x) {
  check_args(a, x);
  if (x == 0.0) return 0.0;
  if (x < a + 1.0) return std::log1p(-std::min(gamma_p_series(a, x), 1.0));
  return std::min(log_gamma_q_fraction(a, x), 0.0);
}

double regularized_gamma_q(double a, double x) { return std::clamp(std::exp(log_regularized_gamma_q(a, x)), 0.0, 1.0); }

double chi2_survival(double x, double k) {
  if (!(k > 0.0)) throw NumericError("chi2_survival: degrees of freedom must be > 0");
  if (!(x >= 0.0)) throw NumericError("chi2_survival: x must be >= 0");
  return regularized_gamma_q(0.5 * k, 0.5 * x);
}

double normal_tail(double d) { return 0.5 * std::erfc(d / std::numbers::sqrt2); }

double mahalanobis(std::span<const double> z, std::span<const double> z_hat, std::span<const double> sigma) {
  check_lengths(z, z_hat, sigma);
  double sum = 0.0;
  for (std::size_t n = 0; n < z.size(); ++n) {
    const double r = (z[n] - z_hat[n]) / sigma[n];
    sum += r * r;
  }
  return std::sqrt(sum);
}

double probability_of_conformance(std::span<const double> z, std::span<const double> z_hat,
                                  std::span<const double> sigma) {
  const double d = mahalanobis(z, z_hat, sigma);
  return chi2_survival(d * d, static_cast<double>(z.size()));
}

double log_likelihood(std::span<const double> z, std::span<const double> z_hat, std::span<const double> sigma) {
  check_lengths(z, z_hat, sigma);
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  double sum = 0.0;
  for (std::size_t n = 0; n < z.size(); ++n) {
    const double r = (z[n] - z_hat[n]) / sigma[n];
    sum += -half_log_2pi - std::log(sigma[n]) - 0.5 * r * r;
  }
  return sum;
}

Verdict classify(double p, double alpha) { return p < alpha ? Verdict::anomalous : Verdict::normal; }

ConformanceReport make_report(std::span<const std::vector<double>> z_true, std::span<const Forecast> forecasts) {
  if (z_true.size() != forecasts.size() || z_true.empty()) {
    throw ShapeError("conformance: " + std::to_string(z_true.size()) + " latents vs " +
                     std::to_string(forecasts.size()) + " forecasts");
  }
  ConformanceReport r;
  double d2 = 0.0;
  double ll = 0.0;
  for (std::size_t i = 0; i < z_true.size(); ++i) {
    const Forecast& f = forecasts[i];
    StepScore s;
    s.step = i + 1;
    s.distance = mahalanobis(z_true[i], f.z_hat, f.sigma);
    s.p = chi2_survival(s.distance * s.distance, static_cast<double>(z_true[i].size()));
    s.log_likelihood = log_likelihood(z_true[i], f.z_hat, f.sigma);
    d2 += s.distance * s.distance;
    ll += s.log_likelihood;
    r.steps.push_back(s);
  }
  r.p_sequence = chi2_survival(d2, static_cast<double>(z_true.size() * z_true.front().size()));
  r.mean_log_likelihood = ll / static_cast<double>(z_true.size());
  return r;
}

template <typename T>
ConformanceReport score_sequence(const PpcModel<T>& model, std::span<const std::vector<double>> segments) {
  const PipelineConfig& cfg = model.config();
  if (segments.size() != cfg.steps()) {
    throw ShapeError("score_sequence: expected " + std::to_string(cfg.steps()) + " segments, got " +
                     std::to_string(segments.size()));
  }
  const auto z = model.encode(segments);
  const auto forecasts = model.predict(std::span<const std::vector<double>>(z.data(), cfg.past_steps));
  return make_report(std::span<const std::vector<double>>(z.data() + cfg.past_steps, cfg.future_steps), forecasts);
}

template <typename T>
void score_source(const PpcModel<T>& model, const SequenceSource& source,
                  const std::function<void(std::size_t, const ConformanceReport&)>& sink, std::size_t chunk) {
  const PipelineConfig& cfg = model.config();
  if (source.steps() != cfg.steps()) {
    throw DataError("data sequences have " + std::to_string(source.steps()) + " segments, model expects " +
                    std::to_string(cfg.steps()));
  }
  if (source.segment_size() != cfg.segment_size()) {
    throw DataError("data segments hold " + std::to_string(source.segment_size()) + " values, model expects " +
                    to_string(cfg.segment_shape));
  }
  const std::size_t e = cfg.latent_size;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < source.size(); start += chunk) {
    const std::size_t n = std::min(chunk, source.size() - start);
    idx.resize(n);
    for (std::size_t j = 0; j < n; ++j) idx[j] = start + j;
    const Tensor<T> z = model.encode_batch(assemble_batch<T>(source, idx, cfg.segment_shape));
    std::vector<Tensor<T>> past;
    for (std::size_t k = 0; k < cfg.past_steps; ++k) {
      past.emplace_back(Shape{n, e}, std::vector<T>(z.data().begin() + k * n * e, z.data().begin() + (k + 1) * n * e));
    }
    const auto batch = model.predict_batch(past);
    for (std::size_t j = 0; j < n; ++j) {
      std::vector<std::vector<double>> truth(cfg.future_steps);
      std::vector<Forecast> forecasts(cfg.future_steps);
      for (std::size_t i = 0; i < cfg.future_steps; ++i) {
        const std::size_t row = (cfg.past_steps + i) * n + j;
        truth[i].assign(z.data().begin() + row * e, z.data().begin() + (row + 1) * e);
        Forecast& f = forecasts[i];
        f.step = i + 1;
        f.z_hat.assign(batch[i].mean.data().begin() + j * e, batch[i].mean.data().begin() + (j + 1) * e);
        for (std::size_t m = 0; m < e; ++m) {
          f.sigma.push_back(std::exp(static_cast<double>(batch[i].log_sigma[j * e + m])));
        }
      }
      sink(start + j, make_report(truth, forecasts));
    }
  }
}

template ConformanceReport score_sequence<float>(const PpcModel<float>&, std::span<const std::vector<double>>);
template ConformanceReport score_sequence<double>(const PpcModel<double>&, std::span<const std::vector<double>>);
template void score_source<float>(const PpcModel<float>&, const SequenceSource&,
                                  const std::function<void(std::size_t, const ConformanceReport&)>&, std::size_t);
template void score_source<double>(const PpcModel<double>&, const SequenceSource&,
                                   const std::function<void(std::size_t, const ConformanceReport&)>&, std::size_t);

}  // namespace ppc
