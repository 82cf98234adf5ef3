#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "ppc/autodiff.hpp"
#include "ppc/random.hpp"

namespace ppc {

enum class Activation { linear, relu, sigmoid, exponential };

std::string_view to_string(Activation a);
Activation parse_activation(std::string_view name);

template <typename T>
Var<T> activate(Var<T> x, Activation a);

// Named mutable view of a model tensor. Running statistics are not trainable;
// variance-head tensors are held fixed during warm-up.
template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* tensor = nullptr;
  bool trainable = true;
  bool variance_head = false;
};

// Glorot-uniform bound for a weight tensor.
double glorot_bound(std::size_t fan_in, std::size_t fan_out);

template <typename T>
void glorot_uniform(Tensor<T>& w, std::size_t fan_in, std::size_t fan_out, Rng& rng);

// Declarative description of one layer.
//   dense   units, activation
//   conv1d  units (filters), kernel, activation, batchnorm, pool | upsample
//   reshape shape (per sample)
struct LayerSpec {
  enum class Kind { dense, conv1d, reshape };

  Kind kind = Kind::dense;
  std::size_t units = 0;
  std::size_t kernel = 0;
  Activation activation = Activation::linear;
  bool batchnorm = false;
  std::size_t pool = 1;
  std::size_t upsample = 1;
  Shape shape;

  bool operator==(const LayerSpec&) const = default;
};

// Text form, e.g. "conv1d filters=32 kernel=7 activation=relu batchnorm=true pool=4".
std::string format_layer(const LayerSpec& spec);
LayerSpec parse_layer(std::string_view text);

// Per-sample output shape of `spec` applied to `input`, or ConfigError.
Shape infer_output(const LayerSpec& spec, const Shape& input);

template <typename T>
class DenseLayer {
 public:
  DenseLayer(std::size_t in, std::size_t out, Activation activation);

  // x: [batch, ...] flattened to [batch, in].
  Var<T> forward(Tape<T>& tape, Var<T> x) const;
  Var<T> pre_activation(Tape<T>& tape, Var<T> x) const;

  void init(Rng& rng);
  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out, bool variance_head = false);

  std::size_t in() const { return in_; }
  std::size_t out() const { return out_; }
  Activation activation() const { return activation_; }
  Tensor<T>& weights() { return weights_; }
  Tensor<T>& bias() { return bias_; }
  const Tensor<T>& weights() const { return weights_; }
  const Tensor<T>& bias() const { return bias_; }

 private:
  std::size_t in_, out_;
  Activation activation_;
  Tensor<T> weights_;  // [in, out]
  Tensor<T> bias_;     // [out]
};

// conv -> activation -> [batchnorm] -> [maxpool | nearest upsample]
template <typename T>
class Conv1dBlock {
 public:
  Conv1dBlock(std::size_t in_channels, const LayerSpec& spec);

  Var<T> forward(Tape<T>& tape, Var<T> x) const;  // running statistics
  Var<T> forward_train(Tape<T>& tape, Var<T> x);  // batch statistics, updates running ones

  void init(Rng& rng);
  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out);

  std::size_t filters() const { return spec_.units; }
  std::size_t kernel() const { return spec_.kernel; }
  Tensor<T>& kernel_weights() { return weights_; }
  Tensor<T>& bias() { return bias_; }

 private:
  Var<T> run(Tape<T>& tape, Var<T> x, BatchNormStats<T>* update) const;

  std::size_t in_channels_;
  LayerSpec spec_;
  Tensor<T> weights_;  // [kernel, in_channels, filters]
  Tensor<T> bias_;     // [filters]
  Tensor<T> gamma_, beta_;
  BatchNormStats<T> stats_;
};

template <typename T>
class ReshapeLayer {
 public:
  explicit ReshapeLayer(Shape shape) : shape_(std::move(shape)) {}
  Var<T> forward(Tape<T>& tape, Var<T> x) const;

 private:
  Shape shape_;
};

// Gated recurrent unit, reset gate applied to the hidden state before the candidate:
//   u  = sigmoid([x, h] W_u + b_u)
//   r  = sigmoid([x, h] W_r + b_r)
//   h~ = tanh([x, r*h] W_c + b_c)
//   h' = u*h + (1 - u)*h~
template <typename T>
class GruCell {
 public:
  GruCell(std::size_t input_size, std::size_t hidden_size);

  Var<T> step(Tape<T>& tape, Var<T> x, Var<T> h) const;
  // Unrolls over xs from h0 and returns the last hidden state.
  Var<T> run(Tape<T>& tape, std::span<const Var<T>> xs, Var<T> h0) const;
  Var<T> zero_state(Tape<T>& tape, std::size_t batch) const;

  void init(Rng& rng);
  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out);

  std::size_t input_size() const { return input_; }
  std::size_t hidden_size() const { return hidden_; }

  Tensor<T>& update_weights() { return w_update_; }
  Tensor<T>& reset_weights() { return w_reset_; }
  Tensor<T>& candidate_weights() { return w_cand_; }
  Tensor<T>& update_bias() { return b_update_; }
  Tensor<T>& reset_bias() { return b_reset_; }
  Tensor<T>& candidate_bias() { return b_cand_; }

 private:
  std::size_t input_, hidden_;
  Tensor<T> w_update_, w_reset_, w_cand_;  // [input + hidden, hidden]
  Tensor<T> b_update_, b_reset_, b_cand_;  // [hidden]
};

template <typename T>
struct MveOutput {
  Var<T> mean;       // z_hat
  Var<T> log_sigma;  // pre-activation of the exponential std head
};

// Mean-variance estimation head: linear mean, exponential standard deviation.
template <typename T>
class MveHead {
 public:
  MveHead(std::size_t in, std::size_t latent);

  MveOutput<T> forward(Tape<T>& tape, Var<T> c) const;
  Var<T> mean(Tape<T>& tape, Var<T> c) const;

  void init(Rng& rng);
  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out);

  DenseLayer<T>& mean_layer() { return mean_; }
  DenseLayer<T>& std_layer() { return std_; }

 private:
  DenseLayer<T> mean_;
  DenseLayer<T> std_;
};

// Ordered stack built from layer specs with static shape checking.
template <typename T>
class Network {
 public:
  Network() = default;
  Network(const std::vector<LayerSpec>& specs, const Shape& input, std::string_view what);

  Var<T> forward(Tape<T>& tape, Var<T> x) const;
  Var<T> forward_train(Tape<T>& tape, Var<T> x);

  void init(Rng& rng);
  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out);

  const Shape& input_shape() const { return input_; }
  const Shape& output_shape() const { return output_; }
  std::size_t depth() const { return layers_.size(); }

  template <typename L>
  L& layer(std::size_t i) {
    return std::get<L>(layers_.at(i));
  }

 private:
  using Layer = std::variant<DenseLayer<T>, Conv1dBlock<T>, ReshapeLayer<T>>;
  std::vector<Layer> layers_;
  Shape input_, output_;
};

}  // namespace ppc
