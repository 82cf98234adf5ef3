#include "ppc/losses.hpp"

#include <cmath>
#include <numbers>

namespace ppc {

namespace {

void check_steps(std::size_t a, std::size_t b, const char* what) {
  if (a == 0 || a != b) {
    throw ShapeError(std::string(what) + ": " + std::to_string(a) + " targets vs " + std::to_string(b) + " predictions");
  }
}

}  // namespace

double gaussian_constant(std::size_t latent_size) {
  return static_cast<double>(latent_size) * 0.5 * std::log(2.0 * std::numbers::pi);
}

double mle_loss(std::span<const std::vector<double>> z_true, std::span<const Forecast> forecasts) {
  check_steps(z_true.size(), forecasts.size(), "mle_loss");
  const std::size_t e = z_true.front().size();
  double total = 0.0;
  for (std::size_t i = 0; i < z_true.size(); ++i) {
    const Forecast& f = forecasts[i];
    if (z_true[i].size() != e || f.z_hat.size() != e || f.sigma.size() != e) {
      throw ShapeError("mle_loss: latent lengths differ at step " + std::to_string(i + 1));
    }
    for (std::size_t n = 0; n < e; ++n) {
      if (!(f.sigma[n] > 0.0)) throw NumericError("mle_loss: non-positive sigma at step " + std::to_string(i + 1));
      const double r = (z_true[i][n] - f.z_hat[n]) / f.sigma[n];
      total += std::log(f.sigma[n]) + 0.5 * r * r;
    }
  }
  return gaussian_constant(e) + total / static_cast<double>(z_true.size());
}

double warmup_loss(std::span<const std::vector<double>> z_true, std::span<const std::vector<double>> z_hat) {
  check_steps(z_true.size(), z_hat.size(), "warmup_loss");
  const std::size_t e = z_true.front().size();
  double total = 0.0;
  for (std::size_t i = 0; i < z_true.size(); ++i) {
    if (z_true[i].size() != e || z_hat[i].size() != e) {
      throw ShapeError("warmup_loss: latent lengths differ at step " + std::to_string(i + 1));
    }
    for (std::size_t n = 0; n < e; ++n) {
      const double d = z_true[i][n] - z_hat[i][n];
      total += d * d;
    }
  }
  return gaussian_constant(e) + total / (2.0 * static_cast<double>(z_true.size()));
}

double recon_loss(std::span<const std::vector<double>> x, std::span<const std::vector<double>> x_hat) {
  check_steps(x.size(), x_hat.size(), "recon_loss");
  double total = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    if (x[k].size() != x_hat[k].size() || x[k].empty()) {
      throw ShapeError("recon_loss: segment " + std::to_string(k) + " has " + std::to_string(x[k].size()) +
                       " samples, reconstruction has " + std::to_string(x_hat[k].size()));
    }
    double mse = 0.0;
    for (std::size_t j = 0; j < x[k].size(); ++j) {
      const double d = x[k][j] - x_hat[k][j];
      mse += d * d;
    }
    total += mse / static_cast<double>(x[k].size());
  }
  return total / static_cast<double>(x.size());
}

double joint_loss(double mle, double recon, double lambda) {
  if (!(lambda >= 0.0)) throw ConfigError("joint_loss: lambda must be >= 0");
  return mle + lambda * recon;
}

namespace graph {

template <typename T>
Var<T> mle_loss(std::span<const Var<T>> z_true, std::span<const Var<T>> z_hat, std::span<const Var<T>> log_sigma) {
  check_steps(z_true.size(), z_hat.size(), "mle_loss");
  check_steps(z_true.size(), log_sigma.size(), "mle_loss");
  Tape<T>& tape = z_true.front().tape();
  const Shape s = z_true.front().shape();
  Var<T> total;
  for (std::size_t i = 0; i < z_true.size(); ++i) {
    if (z_true[i].shape() != s || z_hat[i].shape() != s || log_sigma[i].shape() != s) {
      throw ShapeError("mle_loss: step " + std::to_string(i + 1) + " shapes differ from " + to_string(s));
    }
    Var<T> sq = ops::square(ops::sub(z_true[i], z_hat[i]));
    Var<T> weighted = ops::mul(sq, ops::exp(ops::scale(log_sigma[i], T(-2))));
    Var<T> term = ops::add(ops::reduce_sum(log_sigma[i]), ops::scale(ops::reduce_sum(weighted), T(0.5)));
    total = total.valid() ? ops::add(total, term) : term;
  }
  const double denom = static_cast<double>(z_true.size()) * static_cast<double>(s.at(0));
  Var<T> c = tape.constant(Tensor<T>::scalar(static_cast<T>(gaussian_constant(s.at(1)))));
  return ops::add(c, ops::scale(total, static_cast<T>(1.0 / denom)));
}

template <typename T>
Var<T> warmup_loss(std::span<const Var<T>> z_true, std::span<const Var<T>> z_hat) {
  check_steps(z_true.size(), z_hat.size(), "warmup_loss");
  Tape<T>& tape = z_true.front().tape();
  const Shape s = z_true.front().shape();
  Var<T> total;
  for (std::size_t i = 0; i < z_true.size(); ++i) {
    if (z_true[i].shape() != s || z_hat[i].shape() != s) {
      throw ShapeError("warmup_loss: step " + std::to_string(i + 1) + " shapes differ from " + to_string(s));
    }
    Var<T> term = ops::reduce_sum(ops::square(ops::sub(z_true[i], z_hat[i])));
    total = total.valid() ? ops::add(total, term) : term;
  }
  const double denom = 2.0 * static_cast<double>(z_true.size()) * static_cast<double>(s.at(0));
  Var<T> c = tape.constant(Tensor<T>::scalar(static_cast<T>(gaussian_constant(s.at(1)))));
  return ops::add(c, ops::scale(total, static_cast<T>(1.0 / denom)));
}

template <typename T>
Var<T> recon_loss(Var<T> x, Var<T> x_hat) {
  if (x.shape() != x_hat.shape()) {
    throw ShapeError("recon_loss: input " + to_string(x.shape()) + " vs reconstruction " + to_string(x_hat.shape()));
  }
  return ops::reduce_mean(ops::square(ops::sub(x_hat, x)));
}

#define PPC_INSTANTIATE_LOSSES(T)                                                                            \
  template Var<T> mle_loss<T>(std::span<const Var<T>>, std::span<const Var<T>>, std::span<const Var<T>>); \
  template Var<T> warmup_loss<T>(std::span<const Var<T>>, std::span<const Var<T>>);                       \
  template Var<T> recon_loss<T>(Var<T>, Var<T>);

PPC_INSTANTIATE_LOSSES(float)
PPC_INSTANTIATE_LOSSES(double)

}  // namespace graph

}  // namespace ppc
