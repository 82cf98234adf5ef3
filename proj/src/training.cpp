#include "ppc/training.hpp"

#include <cmath>
#include <limits>
#include <ostream>
#include <type_traits>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "ppc/losses.hpp"
#include "ppc/random.hpp"

namespace ppc {

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

template <typename T>
Tensor<T> assemble_batch(const SequenceSource& source, std::span<const std::size_t> indices, const Shape& segment_shape) {
  const std::size_t seg = numel(segment_shape);
  if (seg != source.segment_size()) {
    throw DataError("data segments hold " + std::to_string(source.segment_size()) + " values, model expects " +
                    to_string(segment_shape));
  }
  const std::size_t k_steps = source.steps();
  const std::size_t b_size = indices.size();
  Shape shape{k_steps * b_size};
  shape.insert(shape.end(), segment_shape.begin(), segment_shape.end());
  Tensor<T> out(shape, Uninitialized{});
  std::vector<float> item(k_steps * seg);
  auto dst = out.data();
  for (std::size_t b = 0; b < b_size; ++b) {
    source.read(indices[b], item);
    for (std::size_t k = 0; k < k_steps; ++k) {
      const float* src = item.data() + k * seg;
      T* row = dst.data() + (k * b_size + b) * seg;
      for (std::size_t j = 0; j < seg; ++j) row[j] = static_cast<T>(src[j]);
    }
  }
  return out;
}

template <typename T>
void RmsProp<T>::step(std::span<Tensor<T>* const> params) {
  const T rho = static_cast<T>(config_.rho);
  const T lr = static_cast<T>(config_.lr);
  const T eps = static_cast<T>(config_.epsilon);
  for (Tensor<T>* p : params) {
    auto& s = state_[p];
    if (s.empty()) s.assign(p->size(), T(0));
    auto g = p->grad();
    auto w = p->data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      s[j] = rho * s[j] + (T(1) - rho) * g[j] * g[j];
      w[j] -= lr * g[j] / std::sqrt(s[j] + eps);
    }
  }
}

std::string_view to_string(Phase p) { return p == Phase::warmup ? "warmup" : "full"; }

namespace {

template <typename T, typename M>
Var<T> loss_graph(Tape<T>& tape, M& model, const Tensor<T>& batch, Phase phase, LossParts* parts) {
  const PipelineConfig& cfg = model.config();
  const std::size_t k_steps = cfg.steps();
  const std::size_t rows = batch.shape().at(0);
  if (rows % k_steps != 0) {
    throw ShapeError("batch of " + std::to_string(rows) + " rows is not a multiple of " + std::to_string(k_steps) +
                     " steps");
  }
  const std::size_t b = rows / k_steps;
  Var<T> x = tape.parameter(batch);

  Var<T> z;
  if constexpr (std::is_const_v<M>) {
    z = model.encode_graph(tape, x);
  } else {
    z = model.encode_training(tape, x);
  }
  std::vector<Var<T>> zs;
  for (std::size_t k = 0; k < k_steps; ++k) zs.push_back(ops::slice(z, 0, k * b, b));
  Var<T> c = model.context(tape, std::span<const Var<T>>(zs.data(), cfg.past_steps));
  std::span<const Var<T>> targets(zs.data() + cfg.past_steps, cfg.future_steps);

  Var<T> mle;
  if (phase == Phase::warmup) {
    std::vector<Var<T>> means;
    for (std::size_t i = 0; i < cfg.future_steps; ++i) means.push_back(model.forecast_mean(tape, i, c));
    mle = graph::warmup_loss<T>(targets, means);
  } else {
    std::vector<Var<T>> means, log_sigmas;
    for (std::size_t i = 0; i < cfg.future_steps; ++i) {
      MveOutput<T> f = model.forecast(tape, i, c);
      means.push_back(f.mean);
      log_sigmas.push_back(f.log_sigma);
    }
    mle = graph::mle_loss<T>(targets, means, log_sigmas);
  }

  Var<T> x_hat;
  if constexpr (std::is_const_v<M>) {
    x_hat = model.decode(tape, z);
  } else {
    x_hat = model.decode_training(tape, z);
  }
  Var<T> recon = graph::recon_loss(x, x_hat);
  Var<T> total = ops::add(mle, ops::scale(recon, static_cast<T>(cfg.lambda)));
  if (parts) {
    parts->mle = static_cast<double>(mle.value().item());
    parts->recon = static_cast<double>(recon.value().item());
    parts->total = static_cast<double>(total.value().item());
  }
  return total;
}

}  // namespace

template <typename T>
Var<T> build_loss(Tape<T>& tape, PpcModel<T>& model, const Tensor<T>& batch, Phase phase, bool training,
                  LossParts* parts) {
  if (training) return loss_graph<T>(tape, model, batch, phase, parts);
  return loss_graph<T>(tape, std::as_const(model), batch, phase, parts);
}

template <typename T>
LossParts evaluate_loss(const PpcModel<T>& model, const SequenceSource& source, std::size_t count, std::size_t chunk) {
  count = std::min(count, source.size());
  if (count == 0) throw DataError("validation data is empty");
  LossParts sum;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < count; start += chunk) {
    const std::size_t n = std::min(chunk, count - start);
    idx.resize(n);
    for (std::size_t j = 0; j < n; ++j) idx[j] = start + j;
    const Tensor<T> batch = assemble_batch<T>(source, idx, model.config().segment_shape);
    Tape<T> tape;
    LossParts p;
    loss_graph<T>(tape, model, batch, Phase::full, &p);
    const double w = static_cast<double>(n) / static_cast<double>(count);
    sum.total += w * p.total;
    sum.mle += w * p.mle;
    sum.recon += w * p.recon;
  }
  return sum;
}

void write_history_csv(std::ostream& out, std::span<const HistoryRow> history) {
  auto num = [](double v) { return std::isfinite(v) ? format_real(v) : std::string("NA"); };
  out << "iteration,phase,train_loss,val_loss,mle_component,recon_component\n";
  for (const auto& r : history) {
    out << r.iteration << ',' << to_string(r.phase) << ',' << num(r.train_loss) << ',' << num(r.val_loss) << ','
        << num(r.mle_component) << ',' << num(r.recon_component) << '\n';
  }
}

namespace {

template <typename T>
std::vector<Tensor<T>> snapshot(std::span<const ParamRef<T>> params) {
  std::vector<Tensor<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.emplace_back(p.tensor->shape(), p.tensor->values());
  return out;
}

template <typename T>
void restore(std::span<const ParamRef<T>> params, const std::vector<Tensor<T>>& saved) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::copy(saved[i].data().begin(), saved[i].data().end(), params[i].tensor->data().begin());
  }
}

}  // namespace

template <typename T>
TrainResult train(PpcModel<T>& model, const SequenceSource& train_data, const SequenceSource& val_data,
                  const TrainOptions<T>& options) {
  const PipelineConfig& cfg = model.config();
  const TrainSchedule& sched = cfg.schedule;
  for (const SequenceSource* src : {&train_data, &val_data}) {
    if (src->size() == 0) throw DataError("training data is empty");
    if (src->steps() != cfg.steps()) {
      throw DataError("data sequences have " + std::to_string(src->steps()) + " segments, model expects " +
                      std::to_string(cfg.steps()));
    }
    if (src->segment_size() != cfg.segment_size()) {
      throw DataError("data segments hold " + std::to_string(src->segment_size()) + " values, model expects " +
                      to_string(cfg.segment_shape));
    }
  }

  const std::vector<ParamRef<T>> params = model.parameters();
  std::vector<Tensor<T>*> warm_set, full_set;
  for (const auto& p : params) {
    if (!p.trainable) continue;
    full_set.push_back(p.tensor);
    if (!p.variance_head) warm_set.push_back(p.tensor);
  }

  RmsProp<T> optimizer(cfg.optimizer);
  Rng rng(cfg.seed, streams::kBatches);
  TrainResult result;
  std::vector<Tensor<T>> best = snapshot<T>(params);
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  LossParts interval;
  std::size_t interval_n = 0;
  std::vector<std::size_t> idx(sched.batch_size);

  auto evaluate = [&](std::size_t it, Phase phase) {
    const LossParts v = evaluate_loss(model, val_data, sched.val_size);
    HistoryRow row;
    row.iteration = it;
    row.phase = phase;
    const double n = static_cast<double>(interval_n);
    row.train_loss = interval_n ? interval.total / n : std::numeric_limits<double>::quiet_NaN();
    row.mle_component = interval_n ? interval.mle / n : std::numeric_limits<double>::quiet_NaN();
    row.recon_component = interval_n ? interval.recon / n : std::numeric_limits<double>::quiet_NaN();
    row.val_loss = v.total;
    interval = {};
    interval_n = 0;
    result.history.push_back(row);
    if (options.on_eval) options.on_eval(row);
    return v.total;
  };

  auto track_best = [&](std::size_t it, double val) {
    if (best_val == std::numeric_limits<double>::infinity() || best_val - val > 1e-5 * std::abs(best_val)) {
      best_val = val;
      result.best_iteration = it;
      best = snapshot<T>(params);
      stale = 0;
    } else {
      ++stale;
    }
  };

  if (sched.warmup_iters == 0) {
    const double v = evaluate(0, Phase::warmup);
    result.warmup_end_val_loss = v;
    track_best(0, v);
  }

  for (std::size_t it = 1; it <= sched.max_iters; ++it) {
    const Phase phase = it <= sched.warmup_iters ? Phase::warmup : Phase::full;
    for (auto& i : idx) i = static_cast<std::size_t>(rng.uniform_int(train_data.size()));
    const Tensor<T> batch = assemble_batch<T>(train_data, idx, cfg.segment_shape);

    const auto& active = phase == Phase::warmup ? warm_set : full_set;
    Tape<T> tape;
    for (Tensor<T>* p : active) {
      tape.track(*p);
      p->zero_grad();
    }
    LossParts parts;
    try {
      Var<T> loss = build_loss(tape, model, batch, phase, true, &parts);
      if (!std::isfinite(parts.total)) throw NumericError("loss is not finite");
      tape.backward(loss);
    } catch (const NumericError& e) {
      throw NumericError("training diverged at iteration " + std::to_string(it) + " (" +
                         std::string(to_string(phase)) + " phase, last losses total=" + format_real(parts.total) +
                         " mle=" + format_real(parts.mle) + " recon=" + format_real(parts.recon) + "): " + e.what());
    }
    optimizer.step(active);
    model.set_iteration(model.iteration() + 1);
    interval.total += parts.total;
    interval.mle += parts.mle;
    interval.recon += parts.recon;
    ++interval_n;
    result.iterations = it;
    if (options.on_step) options.on_step(it, phase, model);

    const bool warmup_end = it == sched.warmup_iters;
    if (warmup_end || it % sched.eval_every == 0 || it == sched.max_iters) {
      const double v = evaluate(it, phase);
      if (warmup_end) result.warmup_end_val_loss = v;
      if (phase == Phase::full || warmup_end) track_best(it, v);
      if (phase == Phase::full && stale >= sched.patience) {
        result.stopped_early = true;
        break;
      }
    }
  }

  if (best_val < std::numeric_limits<double>::infinity()) {
    restore<T>(params, best);
    result.best_val_loss = best_val;
  } else {
    result.best_val_loss = result.history.empty() ? std::numeric_limits<double>::quiet_NaN() : result.history.back().val_loss;
    result.best_iteration = result.iterations;
  }
  for (Tensor<T>* p : full_set) p->set_requires_grad(false);
  return result;
}

#define PPC_INSTANTIATE_TRAINING(T)                                                                                \
  template Tensor<T> assemble_batch<T>(const SequenceSource&, std::span<const std::size_t>, const Shape&);         \
  template class RmsProp<T>;                                                                                       \
  template Var<T> build_loss<T>(Tape<T>&, PpcModel<T>&, const Tensor<T>&, Phase, bool, LossParts*);                \
  template LossParts evaluate_loss<T>(const PpcModel<T>&, const SequenceSource&, std::size_t, std::size_t);        \
  template TrainResult train<T>(PpcModel<T>&, const SequenceSource&, const SequenceSource&, const TrainOptions<T>&);

PPC_INSTANTIATE_TRAINING(float)
PPC_INSTANTIATE_TRAINING(double)

}  // namespace ppc
