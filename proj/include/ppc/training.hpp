#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ppc/config.hpp"
#include "ppc/model.hpp"

namespace ppc {

// Keeps large freed buffers in the heap instead of returning them to the OS;
// training reallocates the same activation sizes every iteration. No-op
// outside glibc.
void tune_allocator();

// Random-access collection of fixed-length sequences. Item `index` is written
// step-major into `out`: steps() segments of segment_size() values each.
class SequenceSource {
 public:
  virtual ~SequenceSource() = default;
  virtual std::size_t size() const = 0;
  virtual std::size_t steps() const = 0;
  virtual std::size_t segment_size() const = 0;
  virtual void read(std::size_t index, std::span<float> out) const = 0;
};

// Stacks `indices` into a step-major batch [steps * batch, ...segment_shape]:
// rows [k * batch, (k + 1) * batch) hold step k of every item.
template <typename T>
Tensor<T> assemble_batch(const SequenceSource& source, std::span<const std::size_t> indices, const Shape& segment_shape);

template <typename T>
class RmsProp {
 public:
  explicit RmsProp(OptimizerConfig config) : config_(config) {}

  // Applies one update from each tensor's grad buffer.
  void step(std::span<Tensor<T>* const> params);

  const OptimizerConfig& config() const { return config_; }
  const std::vector<T>& state(const Tensor<T>* p) const { return state_.at(p); }

 private:
  OptimizerConfig config_;
  std::unordered_map<const Tensor<T>*, std::vector<T>> state_;
};

enum class Phase { warmup, full };

std::string_view to_string(Phase p);

struct LossParts {
  double total = 0.0;
  double mle = 0.0;
  double recon = 0.0;
};

// Builds the objective for a step-major batch. In the warm-up phase the
// forecast sigmas are fixed at one, so the std heads do not enter the graph.
// With `training` set the encoder and decoder use batch statistics.
template <typename T>
Var<T> build_loss(Tape<T>& tape, PpcModel<T>& model, const Tensor<T>& batch, Phase phase, bool training,
                  LossParts* parts = nullptr);

// Joint loss of the first `count` items in inference mode, in chunks of `chunk`.
template <typename T>
LossParts evaluate_loss(const PpcModel<T>& model, const SequenceSource& source, std::size_t count,
                        std::size_t chunk = 256);

struct HistoryRow {
  std::size_t iteration = 0;
  Phase phase = Phase::warmup;
  double train_loss = 0.0;  // mean over the iterations since the previous row
  double val_loss = 0.0;
  double mle_component = 0.0;
  double recon_component = 0.0;
};

void write_history_csv(std::ostream& out, std::span<const HistoryRow> history);

struct TrainResult {
  std::vector<HistoryRow> history;
  std::size_t iterations = 0;
  std::size_t best_iteration = 0;
  double best_val_loss = 0.0;
  double warmup_end_val_loss = 0.0;
  bool stopped_early = false;
};

template <typename T>
struct TrainOptions {
  // Called after every optimizer step with the 1-based iteration number.
  std::function<void(std::size_t iteration, Phase phase, PpcModel<T>& model)> on_step;
  std::function<void(const HistoryRow&)> on_eval;
};

// Warm-up on the fixed-variance objective, then joint training until the
// validation loss stops improving or the iteration budget is spent. The model
// is left holding the best post-warm-up validation snapshot.
template <typename T>
TrainResult train(PpcModel<T>& model, const SequenceSource& train_data, const SequenceSource& val_data,
                  const TrainOptions<T>& options = {});

}  // namespace ppc
