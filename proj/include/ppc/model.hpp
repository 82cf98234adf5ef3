#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ppc/config.hpp"
#include "ppc/layers.hpp"

namespace ppc {

// Predicted latent distribution for forecast step `step` (1-based).
struct Forecast {
  std::vector<double> z_hat;
  std::vector<double> sigma;
  std::size_t step = 0;
};

// Mean and std-head pre-activation of every forecaster for a batch.
template <typename T>
struct BatchForecast {
  Tensor<T> mean;       // [batch, latent]
  Tensor<T> log_sigma;  // [batch, latent]
};

template <typename T>
class Forecaster {
 public:
  Forecaster(const std::vector<LayerSpec>& hidden, std::size_t context_size, std::size_t latent, std::string_view what);

  MveOutput<T> forward(Tape<T>& tape, Var<T> c) const;
  Var<T> mean(Tape<T>& tape, Var<T> c) const;

  void init(Rng& rng);
  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out);

  Network<T>& hidden() { return hidden_; }
  MveHead<T>& head() { return head_; }

 private:
  Network<T> hidden_;
  MveHead<T> head_;
};

// Encoder E, recurrent sequence model G, forecasters F_1..F_Nf and decoder D.
template <typename T>
class PpcModel {
 public:
  // Builds and Glorot-initializes every part from Rng(config.seed, streams::kInit).
  explicit PpcModel(PipelineConfig config);

  const PipelineConfig& config() const { return config_; }
  std::uint64_t iteration() const { return iteration_; }
  void set_iteration(std::uint64_t it) { iteration_ = it; }

  // Every tensor in a fixed order: encoder, sequence model, forecasters, decoder.
  std::vector<ParamRef<T>> parameters();
  std::size_t parameter_count();  // trainable scalars

  // Inference in running-statistics mode. Each segment is flattened row-major.
  std::vector<std::vector<double>> encode(std::span<const std::vector<double>> segments) const;
  std::vector<Forecast> predict(std::span<const std::vector<double>> z_past) const;
  std::vector<double> reconstruct(std::span<const double> z) const;

  // Batched inference. `x` is [batch, ...segment]; `z_past` holds N_p tensors [batch, latent].
  Tensor<T> encode_batch(const Tensor<T>& x) const;
  std::vector<BatchForecast<T>> predict_batch(std::span<const Tensor<T>> z_past) const;

  // Graph builders. The *_training variants use batch statistics and update
  // the running ones.
  Var<T> encode_graph(Tape<T>& tape, Var<T> x) const;
  Var<T> encode_training(Tape<T>& tape, Var<T> x);
  Var<T> context(Tape<T>& tape, std::span<const Var<T>> z_steps) const;
  MveOutput<T> forecast(Tape<T>& tape, std::size_t i, Var<T> c) const;  // i in [0, N_f)
  Var<T> forecast_mean(Tape<T>& tape, std::size_t i, Var<T> c) const;
  Var<T> decode(Tape<T>& tape, Var<T> z) const;
  Var<T> decode_training(Tape<T>& tape, Var<T> z);

  Network<T>& encoder() { return encoder_; }
  GruCell<T>& sequence_model() { return gru_; }
  Forecaster<T>& forecaster(std::size_t i) { return forecasters_.at(i); }
  Network<T>& decoder() { return decoder_; }

 private:
  Shape batch_shape(std::size_t batch) const;

  PipelineConfig config_;
  Network<T> encoder_;
  GruCell<T> gru_;
  std::vector<Forecaster<T>> forecasters_;
  Network<T> decoder_;
  std::uint64_t iteration_ = 0;
};

// Checkpoint: "PPCK", u32 version, u32 config length, config text, then
// parameter records (u32 name length, name, u32 rank, u32 dims, f32 values), all little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(PpcModel<float>& model, const std::string& path);
PpcModel<float> load_checkpoint(const std::string& path);

}  // namespace ppc
