#pragma once

#include <span>
#include <vector>

#include "ppc/autodiff.hpp"
#include "ppc/model.hpp"

namespace ppc {

// N_e * log(sqrt(2 pi))
double gaussian_constant(std::size_t latent_size);

// Negative mean log-likelihood of the true latents under the N_f forecasts.
double mle_loss(std::span<const std::vector<double>> z_true, std::span<const Forecast> forecasts);

// mle_loss with every sigma fixed to 1.
double warmup_loss(std::span<const std::vector<double>> z_true, std::span<const std::vector<double>> z_hat);

// Mean over k of MSE(x_k, x_hat_k).
double recon_loss(std::span<const std::vector<double>> x, std::span<const std::vector<double>> x_hat);

double joint_loss(double mle, double recon, double lambda);

namespace graph {

// Batched forms; every tensor is [batch, latent] and the loss is averaged over the batch.
template <typename T>
Var<T> mle_loss(std::span<const Var<T>> z_true, std::span<const Var<T>> z_hat, std::span<const Var<T>> log_sigma);

template <typename T>
Var<T> warmup_loss(std::span<const Var<T>> z_true, std::span<const Var<T>> z_hat);

// Mean squared error over all elements; equals the mean of per-step MSEs when
// every step holds the same number of samples.
template <typename T>
Var<T> recon_loss(Var<T> x, Var<T> x_hat);

}  // namespace graph

}  // namespace ppc
