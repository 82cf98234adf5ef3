#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>
#include <type_traits>

#include "ppc/tensor.hpp"

namespace ppc {

enum class OpKind : std::uint8_t {
  leaf,
  constant,
  add,
  sub,
  mul,
  scale,
  matmul,
  conv1d,
  maxpool1d,
  upsample1d,
  relu,
  sigmoid,
  tanh,
  exp,
  log,
  square,
  reduce_sum,
  reduce_mean,
  concat,
  slice,
  reshape,
  batchnorm,
};

std::string_view to_string(OpKind kind);

template <typename T>
class Tape;

// Handle to a node recorded on a tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Dynamic reverse-mode tape. Nodes are appended in evaluation order, so operands
// always precede their results and backward() is a single reverse sweep.
template <typename T>
class Tape {
 public:
  // Propagates the gradient of node `self` into the gradients of its inputs.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf bound to an external tensor without copying it. A tensor that
  // requires_grad (or was registered with track()) receives dloss/dleaf in its
  // grad buffer on backward().
  Var<T> parameter(Tensor<T>& p);
  Var<T> parameter(const Tensor<T>& p);

  // Register a tensor whose const bindings should still collect gradients.
  void track(Tensor<T>& p);

  Var<T> constant(Tensor<T> value);

  Var<T> record(OpKind kind, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn backward);

  // Accumulates dloss/dleaf into every gradient-carrying leaf. Node gradients
  // are recomputed from scratch on each call; leaf tensors accumulate.
  void backward(Var<T> loss);

  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.owned;
  }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  // Gradient buffer of a node, allocated (zeroed) on first use.
  std::span<T> grad(std::size_t id);

 private:
  struct Node {
    OpKind kind = OpKind::constant;
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    Tensor<T>* grad_target = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    std::vector<T> grad;
    bool needs_grad = false;
  };

  Var<T> bind(const Tensor<T>& p, Tensor<T>* target);

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<T>*, Tensor<T>*> tracked_;
};

// Running statistics owned by a batch-normalization layer.
template <typename T>
struct BatchNormStats {
  Tensor<T> mean;
  Tensor<T> var;
};

struct BatchNormOptions {
  double momentum = 0.99;
  double epsilon = 1e-5;
};

namespace ops {

// Elementwise binary ops. `b` may broadcast when its shape is a trailing
// suffix of a's shape (bias rows) or when it holds a single value.
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T factor);

// [m, k] x [k, n] -> [m, n]
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);

// Channels-last 1-D convolution, stride 1, zero "same" padding.
// x: [batch, length, in_channels], w: [kernel, in_channels, filters] with odd kernel.
template <typename T> Var<T> conv1d(Var<T> x, Var<T> w);
// [batch, length, channels] -> [batch, length / pool, channels]
template <typename T> Var<T> maxpool1d(Var<T> x, std::size_t pool);
// [batch, length, channels] -> [batch, length * factor, channels]
template <typename T> Var<T> upsample1d(Var<T> x, std::size_t factor);

template <typename T> Var<T> relu(Var<T> a);
template <typename T> Var<T> sigmoid(Var<T> a);
template <typename T> Var<T> tanh(Var<T> a);
template <typename T> Var<T> exp(Var<T> a);
template <typename T> Var<T> log(Var<T> a);
template <typename T> Var<T> square(Var<T> a);

// Full reductions to a scalar.
template <typename T> Var<T> reduce_sum(Var<T> a);
template <typename T> Var<T> reduce_mean(Var<T> a);

template <typename T> Var<T> concat(std::span<const Var<T>> parts, std::size_t axis);
template <typename T> Var<T> slice(Var<T> a, std::size_t axis, std::size_t start, std::size_t length);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);

// Normalizes over every axis but the last (channels). With `update` non-null the
// batch statistics are used and folded into *update; otherwise `stats` is used.
template <typename T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> beta, const BatchNormStats<T>& stats,
                 std::type_identity_t<BatchNormStats<T>>* update, const BatchNormOptions& options = {});

}  // namespace ops

}  // namespace ppc
