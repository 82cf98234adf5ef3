#include <doctest.h>

#include <cmath>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "ppc/datagen.hpp"
#include "ppc/losses.hpp"
#include "ppc/training.hpp"
#include "support.hpp"

using namespace ppc;
using test::gradcheck;

namespace {

constexpr double kLogSqrt2Pi = 0.91893853320467274178;

// log N(z; z_hat, sigma^2) as the log of a product of univariate densities.
double log_density(const std::vector<double>& z, const std::vector<double>& z_hat, const std::vector<double>& sigma) {
  double prod = 1.0;
  for (std::size_t n = 0; n < z.size(); ++n) {
    const double u = (z[n] - z_hat[n]) / sigma[n];
    prod *= std::exp(-0.5 * u * u) / (sigma[n] * std::sqrt(2.0 * std::numbers::pi));
  }
  return std::log(prod);
}

// Two past and two future steps of 8-sample segments through conv, batchnorm,
// pooling, reshape and upsampling.
PipelineConfig small_config(double lambda) {
  PipelineConfig c;
  c.past_steps = 2;
  c.future_steps = 2;
  c.latent_size = 3;
  c.gru_units = 4;
  c.segment_shape = {8, 1};
  c.encoder = {parse_layer("conv1d filters=2 kernel=3 activation=relu batchnorm=true pool=2"),
               parse_layer("dense units=3 activation=linear")};
  c.forecaster = {parse_layer("dense units=5 activation=sigmoid")};
  c.decoder = {parse_layer("dense units=8 activation=sigmoid"), parse_layer("reshape shape=4x2"),
               parse_layer("conv1d filters=1 kernel=3 activation=linear upsample=2")};
  c.lambda = lambda;
  c.seed = 5;
  c.validate();
  return c;
}

PpcModel<double> small_model(double lambda) {
  PpcModel<double> m(small_config(lambda));
  Rng rng(17, 0);
  for (auto& p : m.parameters()) {
    if (!p.trainable) continue;
    for (double& v : p.tensor->data()) v = rng.uniform(-0.6, 0.6);
  }
  return m;
}

Tensor<double> small_batch(std::size_t items) {
  Rng rng(23, 0);
  return test::random_tensor({4 * items, 8, 1}, rng, -1.5, 1.5);
}

std::vector<Tensor<double>*> trainable(PpcModel<double>& m) {
  std::vector<Tensor<double>*> out;
  for (auto& p : m.parameters()) {
    if (p.trainable) out.push_back(p.tensor);
  }
  return out;
}

std::vector<std::vector<double>> gradients(PpcModel<double>& m, auto build) {
  auto leaves = trainable(m);
  Tape<double> tape;
  for (auto* t : leaves) {
    tape.track(*t);
    t->zero_grad();
  }
  tape.backward(build(tape));
  std::vector<std::vector<double>> out;
  for (auto* t : leaves) {
    out.emplace_back(t->grad().begin(), t->grad().end());
    t->set_requires_grad(false);
  }
  return out;
}

DatasetSpec prop_spec(std::size_t count, std::uint64_t seed) {
  DatasetSpec s;
  s.kind = DatasetKind::prop;
  s.count = count;
  s.seed = seed;
  return s;
}

PipelineConfig short_prop_schedule() {
  PipelineConfig c = preset("proportionality");
  c.seed = 3;
  c.schedule.warmup_iters = 20;
  c.schedule.max_iters = 80;
  c.schedule.eval_every = 20;
  c.schedule.batch_size = 16;
  c.schedule.val_size = 128;
  return c;
}

// Every sample is NaN.
class NanSource : public SequenceSource {
 public:
  std::size_t size() const override { return 4; }
  std::size_t steps() const override { return 2; }
  std::size_t segment_size() const override { return 1; }
  void read(std::size_t, std::span<float> out) const override { std::fill(out.begin(), out.end(), std::nanf("")); }
};

}  // namespace

TEST_CASE("mle loss examples") {
  SUBCASE("zero error with unit sigma") {
    const std::vector<std::vector<double>> z{std::vector<double>(16, 0.3)};
    const std::vector<Forecast> f{{std::vector<double>(16, 0.3), std::vector<double>(16, 1.0), 1}};
    CHECK(mle_loss(z, f) == doctest::Approx(14.7030165312747).epsilon(1e-12));
    CHECK(gaussian_constant(16) == doctest::Approx(14.7030165312747).epsilon(1e-12));
  }
  SUBCASE("doubling sigma adds N_e log 2") {
    const std::vector<std::vector<double>> z{{0.1, -0.4, 2.0}};
    std::vector<Forecast> f{{{0.1, -0.4, 2.0}, {0.5, 1.5, 3.0}, 1}};
    const double base = mle_loss(z, f);
    for (double& s : f[0].sigma) s *= 2.0;
    CHECK(mle_loss(z, f) - base == doctest::Approx(3.0 * std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("random case matches the summed Gaussian log-density") {
    Rng rng(41, 0);
    std::vector<std::vector<double>> z;
    std::vector<Forecast> f;
    double expect = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      Forecast fc;
      std::vector<double> zi;
      for (std::size_t n = 0; n < 4; ++n) {
        zi.push_back(rng.uniform(-2, 2));
        fc.z_hat.push_back(rng.uniform(-2, 2));
        fc.sigma.push_back(rng.uniform(0.3, 2.5));
      }
      expect -= log_density(zi, fc.z_hat, fc.sigma) / 3.0;
      z.push_back(zi);
      f.push_back(fc);
    }
    CHECK(mle_loss(z, f) == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("errors") {
    const std::vector<std::vector<double>> z{{0.0}};
    CHECK_THROWS_AS(mle_loss(z, std::vector<Forecast>{{{0.0}, {0.0}, 1}}), NumericError);
    CHECK_THROWS_AS(mle_loss(z, std::vector<Forecast>{}), ShapeError);
  }
}

TEST_CASE("warm-up loss examples") {
  const std::vector<std::vector<double>> z{{1.0, -2.0}, {0.5, 0.25}};
  const std::vector<std::vector<double>> zh{{0.0, -1.0}, {1.5, 0.25}};
  CHECK(warmup_loss(z, z) == doctest::Approx(2.0 * kLogSqrt2Pi).epsilon(1e-14));
  // ((1 + 1) + (1 + 0)) / (2 * 2)
  CHECK(warmup_loss(z, zh) == doctest::Approx(2.0 * kLogSqrt2Pi + 0.75).epsilon(1e-14));
  std::vector<Forecast> unit;
  for (std::size_t i = 0; i < 2; ++i) unit.push_back({zh[i], {1.0, 1.0}, i + 1});
  CHECK(warmup_loss(z, zh) == doctest::Approx(mle_loss(z, unit)).epsilon(1e-14));
}

TEST_CASE("reconstruction and joint loss examples") {
  Rng rng(5, 0);
  std::vector<std::vector<double>> x(3, std::vector<double>(7));
  for (auto& s : x) {
    for (double& v : s) v = rng.uniform(-1, 1);
  }
  CHECK(recon_loss(x, x) == 0.0);
  auto shifted = x;
  for (auto& s : shifted) {
    for (double& v : s) v += 0.3;
  }
  CHECK(recon_loss(x, shifted) == doctest::Approx(0.09).epsilon(1e-12));
  auto noisy = x;
  double expect = 0.0;
  for (std::size_t k = 0; k < 3; ++k) {
    double mse = 0.0;
    for (std::size_t j = 0; j < 7; ++j) {
      noisy[k][j] += rng.uniform(-0.5, 0.5);
      mse += (noisy[k][j] - x[k][j]) * (noisy[k][j] - x[k][j]);
    }
    expect += mse / 7.0 / 3.0;
  }
  CHECK(recon_loss(x, noisy) == doctest::Approx(expect).epsilon(1e-12));
  CHECK_THROWS_AS(recon_loss(x, std::vector<std::vector<double>>(3, std::vector<double>(6))), ShapeError);

  CHECK(joint_loss(2.5, 0.1, 0.0) == 2.5);
  CHECK(joint_loss(2.5, 0.1, 100.0) == doctest::Approx(12.5));
  CHECK_THROWS_AS(joint_loss(1.0, 1.0, -1.0), ConfigError);
  CHECK(preset("proportionality").lambda == 100.0);
  CHECK(preset("sine").lambda == 1e4);
}

TEST_CASE("graph losses agree with the scalar forms") {
  Rng rng(8, 0);
  Tape<double> tape;
  std::vector<Var<double>> z, zh, ls;
  std::vector<std::vector<double>> zs, zhs;
  std::vector<Forecast> f;
  for (std::size_t i = 0; i < 2; ++i) {
    Tensor<double> a = test::random_tensor({1, 3}, rng), b = test::random_tensor({1, 3}, rng),
                   c = test::random_tensor({1, 3}, rng);
    zs.push_back(a.values());
    zhs.push_back(b.values());
    Forecast fc{b.values(), {}, i + 1};
    for (double v : c.data()) fc.sigma.push_back(std::exp(v));
    f.push_back(fc);
    z.push_back(tape.constant(a));
    zh.push_back(tape.constant(b));
    ls.push_back(tape.constant(c));
  }
  CHECK(graph::mle_loss<double>(z, zh, ls).value().item() == doctest::Approx(mle_loss(zs, f)).epsilon(1e-12));
  CHECK(graph::warmup_loss<double>(z, zh).value().item() == doctest::Approx(warmup_loss(zs, zhs)).epsilon(1e-12));
}

TEST_CASE("rmsprop") {
  OptimizerConfig oc{0.1, 0.9, 1e-8};
  SUBCASE("zero gradient leaves parameters unchanged") {
    Tensor<double> p(Shape{3}, std::vector<double>{1, 2, 3});
    p.set_requires_grad(true);
    RmsProp<double> opt(oc);
    Tensor<double>* ps[] = {&p};
    opt.step(ps);
    CHECK(p.values() == std::vector<double>{1, 2, 3});
  }
  SUBCASE("first step moves by about lr / sqrt(1 - rho)") {
    Tensor<double> p(Shape{2}, std::vector<double>{0.0, 0.0});
    p.set_requires_grad(true);
    p.grad()[0] = 50.0;
    p.grad()[1] = -50.0;
    RmsProp<double> opt(oc);
    Tensor<double>* ps[] = {&p};
    opt.step(ps);
    CHECK(p[0] == doctest::Approx(-0.1 / std::sqrt(0.1)).epsilon(1e-9));
    CHECK(p[1] == doctest::Approx(0.1 / std::sqrt(0.1)).epsilon(1e-9));
  }
  SUBCASE("three-step scalar trace") {
    Tensor<double> p(Shape{1}, std::vector<double>{1.0});
    p.set_requires_grad(true);
    RmsProp<double> opt(oc);
    Tensor<double>* ps[] = {&p};
    const double g[] = {0.5, -1.0, 2.0};
    const double want_p[] = {0.6837722972286963, 0.9694865712811751, 0.6894991731743685};
    const double want_s[] = {0.025, 0.1225, 0.51025};
    for (int k = 0; k < 3; ++k) {
      p.grad()[0] = g[k];
      opt.step(ps);
      CHECK(p[0] == doctest::Approx(want_p[k]).epsilon(1e-14));
      CHECK(opt.state(&p)[0] == doctest::Approx(want_s[k]).epsilon(1e-14));
      CHECK(opt.state(&p)[0] >= 0.0);
    }
  }
}

TEST_CASE("loss paths pass gradient checks") {
  const Tensor<double> batch = small_batch(3);
  for (Phase phase : {Phase::warmup, Phase::full}) {
    for (bool training : {true, false}) {
      CAPTURE(to_string(phase));
      CAPTURE(training);
      PpcModel<double> m = small_model(0.7);
      // A small step keeps the probes clear of relu and maxpool switch points.
      const double err = gradcheck(
          trainable(m), [&](Tape<double>& t) { return build_loss(t, m, batch, phase, training); }, 1e-6);
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("warm-up graph leaves the std heads out") {
  PpcModel<double> m = small_model(0.7);
  const Tensor<double> batch = small_batch(3);
  auto g = gradients(m, [&](Tape<double>& t) { return build_loss(t, m, batch, Phase::warmup, true); });
  const auto params = m.parameters();
  std::size_t k = 0, heads = 0;
  for (const auto& p : params) {
    if (!p.trainable) continue;
    if (p.variance_head) {
      ++heads;
      for (double v : g[k]) CHECK(v == 0.0);
    }
    ++k;
  }
  CHECK(heads == 2 * m.config().future_steps);
}

TEST_CASE("joint gradient is the mle gradient plus lambda times the recon gradient") {
  const Tensor<double> batch = small_batch(3);
  const double lambda = 7.5;
  PpcModel<double> mle_only = small_model(0.0);
  PpcModel<double> joint = small_model(lambda);
  PpcModel<double> ae = small_model(0.0);
  auto g_mle = gradients(mle_only, [&](Tape<double>& t) { return build_loss(t, mle_only, batch, Phase::full, false); });
  auto g_joint = gradients(joint, [&](Tape<double>& t) { return build_loss(t, joint, batch, Phase::full, false); });
  auto g_recon = gradients(ae, [&](Tape<double>& t) {
    Var<double> x = t.constant(batch);
    return graph::recon_loss(x, ae.decode(t, ae.encode_graph(t, x)));
  });
  double worst = 0.0;
  for (std::size_t k = 0; k < g_joint.size(); ++k) {
    for (std::size_t i = 0; i < g_joint[k].size(); ++i) {
      const double want = g_mle[k][i] + lambda * g_recon[k][i];
      worst = std::max(worst, std::abs(g_joint[k][i] - want) / std::max(1.0, std::abs(want)));
    }
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("assemble_batch is step-major") {
  Dataset d = Dataset::generate(prop_spec(5, 9));
  const std::vector<std::size_t> idx{3, 0, 4};
  const Tensor<double> b = assemble_batch<double>(d, idx, Shape{1});
  REQUIRE(b.shape() == Shape{6, 1});
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t j = 0; j < 3; ++j) CHECK(b[k * 3 + j] == static_cast<double>(d.samples(idx[j])[k]));
  }
}

TEST_CASE("training runs are deterministic per seed") {
  const Dataset tr = Dataset::generate(prop_spec(2000, 1));
  const Dataset va = Dataset::generate(prop_spec(256, 2));
  auto run = [&](std::uint64_t seed) {
    PipelineConfig c = short_prop_schedule();
    c.seed = seed;
    PpcModel<float> m(c);
    TrainResult r = train(m, tr, va);
    std::ostringstream csv;
    write_history_csv(csv, r.history);
    std::vector<float> values;
    for (auto& p : m.parameters()) {
      auto v = p.tensor->values();
      values.insert(values.end(), v.begin(), v.end());
    }
    return std::pair{csv.str(), values};
  };
  const auto a = run(3), b = run(3), c = run(4);
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
  CHECK(a.first != c.first);
}

TEST_CASE("std heads stay frozen through warm-up and move afterwards") {
  const Dataset tr = Dataset::generate(prop_spec(2000, 1));
  const Dataset va = Dataset::generate(prop_spec(256, 2));
  PipelineConfig c = short_prop_schedule();
  PpcModel<float> m(c);
  auto heads = [&] {
    std::vector<std::vector<float>> out;
    for (auto& p : m.parameters()) {
      if (p.variance_head) out.push_back(p.tensor->values());
    }
    return out;
  };
  auto others = [&] {
    std::vector<std::vector<float>> out;
    for (auto& p : m.parameters()) {
      if (!p.variance_head && p.trainable) out.push_back(p.tensor->values());
    }
    return out;
  };
  const auto initial = heads();
  const auto initial_others = others();
  REQUIRE_FALSE(initial.empty());
  std::size_t frozen_steps = 0;
  bool moved_after = false, others_moved = false;
  TrainOptions<float> opts;
  opts.on_step = [&](std::size_t it, Phase phase, PpcModel<float>&) {
    if (phase == Phase::warmup) {
      frozen_steps += heads() == initial;
      others_moved = others_moved || others() != initial_others;
    } else if (it == c.schedule.warmup_iters + 1) {
      moved_after = heads() != initial;
    }
  };
  train(m, tr, va, opts);
  CHECK(frozen_steps == c.schedule.warmup_iters);
  CHECK(others_moved);
  CHECK(moved_after);
}

TEST_CASE("a schedule that ends at warm-up trains only the fixed-variance objective") {
  const Dataset tr = Dataset::generate(prop_spec(1000, 1));
  const Dataset va = Dataset::generate(prop_spec(128, 2));
  PipelineConfig c = short_prop_schedule();
  c.schedule.max_iters = c.schedule.warmup_iters;
  PpcModel<float> m(c);
  std::vector<std::vector<float>> initial;
  for (auto& p : m.parameters()) {
    if (p.variance_head) initial.push_back(p.tensor->values());
  }
  const TrainResult r = train(m, tr, va);
  CHECK(r.iterations == c.schedule.warmup_iters);
  for (const auto& row : r.history) CHECK(row.phase == Phase::warmup);
  std::vector<std::vector<float>> after;
  for (auto& p : m.parameters()) {
    if (p.variance_head) after.push_back(p.tensor->values());
  }
  CHECK(after == initial);
}

TEST_CASE("returned model is the best validation snapshot") {
  const Dataset tr = Dataset::generate(prop_spec(4000, 11));
  const Dataset va = Dataset::generate(prop_spec(512, 12));
  PipelineConfig c = short_prop_schedule();
  c.schedule.max_iters = 400;
  c.schedule.eval_every = 20;
  c.schedule.patience = 3;
  c.optimizer.lr = 1e-3;
  PpcModel<float> m(c);
  const TrainResult r = train(m, tr, va);
  CHECK(r.best_val_loss <= r.warmup_end_val_loss);
  CHECK(r.best_iteration >= c.schedule.warmup_iters);
  const LossParts now = evaluate_loss(m, va, c.schedule.val_size);
  CHECK(now.total == doctest::Approx(r.best_val_loss).epsilon(1e-6));
  if (r.stopped_early) CHECK(r.iterations < c.schedule.max_iters);
}

TEST_CASE("proportionality training beats the constant-prediction baseline") {
  const Dataset tr = Dataset::generate(prop_spec(20000, 21));
  const Dataset va = Dataset::generate(prop_spec(2048, 22));
  PipelineConfig c = preset("proportionality");
  c.seed = 21;
  c.schedule.max_iters = 3000;
  c.schedule.eval_every = 500;
  c.schedule.val_size = 2048;
  PpcModel<float> m(c);
  train(m, tr, va);
  const LossParts v = evaluate_loss(m, va, va.size());

  // Unit-sigma forecast of the global mean of the target latents.
  std::vector<std::vector<double>> targets;
  for (std::size_t i = 0; i < va.size(); ++i) {
    const std::vector<double> seg{static_cast<double>(va.samples(i)[1])};
    targets.push_back(m.encode(std::span(&seg, 1))[0]);
  }
  const std::size_t e = c.latent_size;
  std::vector<double> mean(e, 0.0);
  for (const auto& z : targets) {
    for (std::size_t n = 0; n < e; ++n) mean[n] += z[n] / static_cast<double>(targets.size());
  }
  double baseline = 0.0;
  for (const auto& z : targets) {
    baseline += warmup_loss(std::span(&z, 1), std::span(&mean, 1)) / static_cast<double>(targets.size());
  }
  CHECK(v.mle < baseline);
}

TEST_CASE("non-finite losses abort with a diagnostic") {
  NanSource bad;
  PipelineConfig c = short_prop_schedule();
  PpcModel<float> m(c);
  try {
    train(m, bad, bad);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("iteration 1") != std::string::npos);
    CHECK(msg.find("mle=") != std::string::npos);
  }
}

TEST_CASE("history csv") {
  std::vector<HistoryRow> rows(2);
  rows[0] = {10, Phase::warmup, std::nan(""), 2.5, std::nan(""), std::nan("")};
  rows[1] = {20, Phase::full, 1.5, 1.25, 0.5, 0.01};
  std::ostringstream out;
  write_history_csv(out, rows);
  CHECK(out.str() ==
        "iteration,phase,train_loss,val_loss,mle_component,recon_component\n"
        "10,warmup,NA,2.5,NA,NA\n"
        "20,full,1.5,1.25,0.5,0.01\n");
}

TEST_CASE("training rejects mismatched data") {
  const Dataset prop = Dataset::generate(prop_spec(16, 1));
  PpcModel<float> m(small_config(1.0));
  CHECK_THROWS_AS(train(m, prop, prop), DataError);
}
