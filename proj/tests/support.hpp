#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ppc/autodiff.hpp"
#include "ppc/random.hpp"

namespace ppc::test {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Entries bounded away from zero, for ops with a kink or pole there.
inline Tensor<double> away_from_zero(Shape shape, Rng& rng) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.data()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 1.5);
  return t;
}

// Largest |analytic - numeric| / max(|analytic|, |numeric|, 1e-3) over every
// element of `leaves`, with central differences of step h. `build` records a
// scalar loss on the tape it is given; leaves are tracked, so const layers
// binding them through tape.parameter() still receive gradients.
template <typename Build>
double gradcheck(const std::vector<Tensor<double>*>& leaves, Build build, double h = 1e-4) {
  for (auto* t : leaves) t->set_requires_grad(true);
  {
    Tape<double> tape;
    for (auto* t : leaves) tape.track(*t);
    tape.backward(build(tape));
  }
  auto eval = [&] {
    Tape<double> tape;
    return build(tape).value().item();
  };
  double worst = 0.0;
  for (auto* t : leaves) {
    const std::vector<double> analytic(t->grad().begin(), t->grad().end());
    for (std::size_t i = 0; i < t->size(); ++i) {
      const double saved = (*t)[i];
      (*t)[i] = saved + h;
      const double up = eval();
      (*t)[i] = saved - h;
      const double down = eval();
      (*t)[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double scale = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-3});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / scale);
    }
  }
  for (auto* t : leaves) t->set_requires_grad(false);
  return worst;
}

// Fixed random projection to a scalar, so every output element gets a distinct weight.
inline Var<double> project(Tape<double>& tape, Var<double> y, std::uint64_t seed = 99) {
  Rng rng(seed, 0);
  const Shape s = y.shape();
  Tensor<double> w = random_tensor(s, rng);
  return ops::reduce_sum(ops::mul(y, tape.constant(std::move(w))));
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("ppc_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace ppc::test
