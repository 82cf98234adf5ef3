#include "ppc/layers.hpp"

#include "ppc/config.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

namespace ppc {

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::linear: return "linear";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::exponential: return "exponential";
  }
  return "linear";
}

Activation parse_activation(std::string_view name) {
  if (name == "linear") return Activation::linear;
  if (name == "relu") return Activation::relu;
  if (name == "sigmoid") return Activation::sigmoid;
  if (name == "exponential") return Activation::exponential;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

template <typename T>
Var<T> activate(Var<T> x, Activation a) {
  switch (a) {
    case Activation::linear: return x;
    case Activation::relu: return ops::relu(x);
    case Activation::sigmoid: return ops::sigmoid(x);
    case Activation::exponential: return ops::exp(x);
  }
  return x;
}

double glorot_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

template <typename T>
void glorot_uniform(Tensor<T>& w, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = glorot_bound(fan_in, fan_out);
  for (T& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
}

// ---------------------------------------------------------------------------
// Layer specs

namespace {

std::size_t parse_count(std::string_view key, std::string_view value) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size() || out == 0) {
    throw ConfigError("layer attribute '" + std::string(key) + "' needs a positive integer, got '" +
                      std::string(value) + "'");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("layer attribute '" + std::string(key) + "' needs true/false, got '" + std::string(value) + "'");
}

}  // namespace

Shape parse_extents(std::string_view value) {
  Shape s;
  std::size_t pos = 0;
  while (pos <= value.size()) {
    auto next = value.find('x', pos);
    if (next == std::string_view::npos) next = value.size();
    s.push_back(parse_count("shape", value.substr(pos, next - pos)));
    pos = next + 1;
  }
  return s;
}

std::string format_extents(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

std::string format_layer(const LayerSpec& spec) {
  std::ostringstream os;
  switch (spec.kind) {
    case LayerSpec::Kind::dense:
      os << "dense units=" << spec.units << " activation=" << to_string(spec.activation);
      break;
    case LayerSpec::Kind::conv1d:
      os << "conv1d filters=" << spec.units << " kernel=" << spec.kernel << " activation=" << to_string(spec.activation)
         << " batchnorm=" << (spec.batchnorm ? "true" : "false");
      if (spec.pool > 1) os << " pool=" << spec.pool;
      if (spec.upsample > 1) os << " upsample=" << spec.upsample;
      break;
    case LayerSpec::Kind::reshape:
      os << "reshape shape=" << format_extents(spec.shape);
      break;
  }
  return os.str();
}

LayerSpec parse_layer(std::string_view text) {
  std::istringstream is{std::string(text)};
  std::string kind;
  is >> kind;
  LayerSpec spec;
  if (kind == "dense") {
    spec.kind = LayerSpec::Kind::dense;
  } else if (kind == "conv1d") {
    spec.kind = LayerSpec::Kind::conv1d;
  } else if (kind == "reshape") {
    spec.kind = LayerSpec::Kind::reshape;
  } else {
    throw ConfigError("unknown layer kind '" + kind + "' in '" + std::string(text) + "'");
  }
  std::string token;
  while (is >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos) throw ConfigError("layer attribute '" + token + "' is not key=value");
    const std::string key = token.substr(0, eq);
    const std::string value = token.substr(eq + 1);
    const bool dense = spec.kind == LayerSpec::Kind::dense;
    const bool conv = spec.kind == LayerSpec::Kind::conv1d;
    if (key == "units" && dense) {
      spec.units = parse_count(key, value);
    } else if (key == "filters" && conv) {
      spec.units = parse_count(key, value);
    } else if (key == "kernel" && conv) {
      spec.kernel = parse_count(key, value);
    } else if (key == "activation" && (dense || conv)) {
      spec.activation = parse_activation(value);
    } else if (key == "batchnorm" && conv) {
      spec.batchnorm = parse_bool(key, value);
    } else if (key == "pool" && conv) {
      spec.pool = parse_count(key, value);
    } else if (key == "upsample" && conv) {
      spec.upsample = parse_count(key, value);
    } else if (key == "shape" && spec.kind == LayerSpec::Kind::reshape) {
      spec.shape = parse_extents(value);
    } else {
      throw ConfigError("unknown attribute '" + key + "' for " + kind + " layer");
    }
  }
  if (spec.kind != LayerSpec::Kind::reshape && spec.units == 0) {
    throw ConfigError(kind + " layer needs a positive unit/filter count: '" + std::string(text) + "'");
  }
  if (spec.kind == LayerSpec::Kind::conv1d) {
    if (spec.kernel == 0 || spec.kernel % 2 == 0) throw ConfigError("conv1d kernel must be odd and positive");
    if (spec.pool > 1 && spec.upsample > 1) throw ConfigError("conv1d block cannot both pool and upsample");
  }
  if (spec.kind == LayerSpec::Kind::reshape && spec.shape.empty()) throw ConfigError("reshape layer needs shape=");
  return spec;
}

Shape infer_output(const LayerSpec& spec, const Shape& input) {
  switch (spec.kind) {
    case LayerSpec::Kind::dense:
      return {spec.units};
    case LayerSpec::Kind::conv1d: {
      if (input.size() != 2) {
        throw ConfigError("conv1d expects per-sample shape [length, channels], got " + to_string(input));
      }
      std::size_t len = input[0];
      if (spec.pool > 1) {
        if (len % spec.pool != 0) {
          throw ConfigError("conv1d pool " + std::to_string(spec.pool) + " does not divide length " +
                            std::to_string(len));
        }
        len /= spec.pool;
      }
      len *= spec.upsample;
      return {len, spec.units};
    }
    case LayerSpec::Kind::reshape:
      if (numel(spec.shape) != numel(input)) {
        throw ConfigError("reshape to " + to_string(spec.shape) + " does not match input " + to_string(input));
      }
      return spec.shape;
  }
  return input;
}

// ---------------------------------------------------------------------------
// DenseLayer

template <typename T>
DenseLayer<T>::DenseLayer(std::size_t in, std::size_t out, Activation activation)
    : in_(in), out_(out), activation_(activation), weights_(Shape{in, out}), bias_(Shape{out}) {}

template <typename T>
Var<T> DenseLayer<T>::pre_activation(Tape<T>& tape, Var<T> x) const {
  const Shape s = x.shape();
  if (s.empty() || numel(s) / s[0] != in_) {
    throw ShapeError("dense: expected [batch, " + std::to_string(in_) + "], got " + to_string(s));
  }
  if (s.size() != 2) x = ops::reshape(x, Shape{s[0], in_});
  return ops::add(ops::matmul(x, tape.parameter(weights_)), tape.parameter(bias_));
}

template <typename T>
Var<T> DenseLayer<T>::forward(Tape<T>& tape, Var<T> x) const {
  return activate(pre_activation(tape, x), activation_);
}

template <typename T>
void DenseLayer<T>::init(Rng& rng) {
  glorot_uniform(weights_, in_, out_, rng);
  std::fill(bias_.data().begin(), bias_.data().end(), T(0));
}

template <typename T>
void DenseLayer<T>::collect(const std::string& prefix, std::vector<ParamRef<T>>& out, bool variance_head) {
  out.push_back({prefix + ".weights", &weights_, true, variance_head});
  out.push_back({prefix + ".bias", &bias_, true, variance_head});
}

// ---------------------------------------------------------------------------
// Conv1dBlock

template <typename T>
Conv1dBlock<T>::Conv1dBlock(std::size_t in_channels, const LayerSpec& spec)
    : in_channels_(in_channels),
      spec_(spec),
      weights_(Shape{spec.kernel, in_channels, spec.units}),
      bias_(Shape{spec.units}),
      gamma_(Shape{spec.units}, T(1)),
      beta_(Shape{spec.units}),
      stats_{Tensor<T>(Shape{spec.units}, T(0)), Tensor<T>(Shape{spec.units}, T(1))} {}

template <typename T>
Var<T> Conv1dBlock<T>::run(Tape<T>& tape, Var<T> x, BatchNormStats<T>* update) const {
  Var<T> y = ops::add(ops::conv1d(x, tape.parameter(weights_)), tape.parameter(bias_));
  y = activate(y, spec_.activation);
  if (spec_.batchnorm) y = ops::batchnorm(y, tape.parameter(gamma_), tape.parameter(beta_), stats_, update);
  if (spec_.pool > 1) y = ops::maxpool1d(y, spec_.pool);
  if (spec_.upsample > 1) y = ops::upsample1d(y, spec_.upsample);
  return y;
}

template <typename T>
Var<T> Conv1dBlock<T>::forward(Tape<T>& tape, Var<T> x) const {
  return run(tape, x, nullptr);
}

template <typename T>
Var<T> Conv1dBlock<T>::forward_train(Tape<T>& tape, Var<T> x) {
  return run(tape, x, spec_.batchnorm ? &stats_ : nullptr);
}

template <typename T>
void Conv1dBlock<T>::init(Rng& rng) {
  glorot_uniform(weights_, spec_.kernel * in_channels_, spec_.kernel * spec_.units, rng);
  std::fill(bias_.data().begin(), bias_.data().end(), T(0));
  std::fill(gamma_.data().begin(), gamma_.data().end(), T(1));
  std::fill(beta_.data().begin(), beta_.data().end(), T(0));
  std::fill(stats_.mean.data().begin(), stats_.mean.data().end(), T(0));
  std::fill(stats_.var.data().begin(), stats_.var.data().end(), T(1));
}

template <typename T>
void Conv1dBlock<T>::collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
  out.push_back({prefix + ".kernel", &weights_, true, false});
  out.push_back({prefix + ".bias", &bias_, true, false});
  if (spec_.batchnorm) {
    out.push_back({prefix + ".bn.gamma", &gamma_, true, false});
    out.push_back({prefix + ".bn.beta", &beta_, true, false});
    out.push_back({prefix + ".bn.running_mean", &stats_.mean, false, false});
    out.push_back({prefix + ".bn.running_var", &stats_.var, false, false});
  }
}

template <typename T>
Var<T> ReshapeLayer<T>::forward(Tape<T>&, Var<T> x) const {
  Shape s{x.shape().at(0)};
  s.insert(s.end(), shape_.begin(), shape_.end());
  return ops::reshape(x, s);
}

// ---------------------------------------------------------------------------
// GruCell

template <typename T>
GruCell<T>::GruCell(std::size_t input_size, std::size_t hidden_size)
    : input_(input_size),
      hidden_(hidden_size),
      w_update_(Shape{input_size + hidden_size, hidden_size}),
      w_reset_(Shape{input_size + hidden_size, hidden_size}),
      w_cand_(Shape{input_size + hidden_size, hidden_size}),
      b_update_(Shape{hidden_size}),
      b_reset_(Shape{hidden_size}),
      b_cand_(Shape{hidden_size}) {}

template <typename T>
Var<T> GruCell<T>::step(Tape<T>& tape, Var<T> x, Var<T> h) const {
  const Shape sx = x.shape();
  const Shape sh = h.shape();
  if (sx.size() != 2 || sh.size() != 2 || sx[1] != input_ || sh[1] != hidden_ || sx[0] != sh[0]) {
    throw ShapeError("gru_step: expected x [batch, " + std::to_string(input_) + "] and h [batch, " +
                     std::to_string(hidden_) + "], got " + to_string(sx) + " and " + to_string(sh));
  }
  const Var<T> xh_parts[] = {x, h};
  Var<T> xh = ops::concat<T>(xh_parts, 1);
  Var<T> u = ops::sigmoid(ops::add(ops::matmul(xh, tape.parameter(w_update_)), tape.parameter(b_update_)));
  Var<T> r = ops::sigmoid(ops::add(ops::matmul(xh, tape.parameter(w_reset_)), tape.parameter(b_reset_)));
  const Var<T> xrh_parts[] = {x, ops::mul(r, h)};
  Var<T> xrh = ops::concat<T>(xrh_parts, 1);
  Var<T> cand = ops::tanh(ops::add(ops::matmul(xrh, tape.parameter(w_cand_)), tape.parameter(b_cand_)));
  // u*h + (1-u)*cand == cand + u*(h - cand)
  return ops::add(cand, ops::mul(u, ops::sub(h, cand)));
}

template <typename T>
Var<T> GruCell<T>::run(Tape<T>& tape, std::span<const Var<T>> xs, Var<T> h0) const {
  Var<T> h = h0;
  for (const auto& x : xs) h = step(tape, x, h);
  return h;
}

template <typename T>
Var<T> GruCell<T>::zero_state(Tape<T>& tape, std::size_t batch) const {
  return tape.constant(Tensor<T>(Shape{batch, hidden_}));
}

template <typename T>
void GruCell<T>::init(Rng& rng) {
  for (Tensor<T>* w : {&w_update_, &w_reset_, &w_cand_}) glorot_uniform(*w, input_ + hidden_, hidden_, rng);
  for (Tensor<T>* b : {&b_update_, &b_reset_, &b_cand_}) std::fill(b->data().begin(), b->data().end(), T(0));
}

template <typename T>
void GruCell<T>::collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
  out.push_back({prefix + ".update.weights", &w_update_, true, false});
  out.push_back({prefix + ".update.bias", &b_update_, true, false});
  out.push_back({prefix + ".reset.weights", &w_reset_, true, false});
  out.push_back({prefix + ".reset.bias", &b_reset_, true, false});
  out.push_back({prefix + ".candidate.weights", &w_cand_, true, false});
  out.push_back({prefix + ".candidate.bias", &b_cand_, true, false});
}

// ---------------------------------------------------------------------------
// MveHead

template <typename T>
MveHead<T>::MveHead(std::size_t in, std::size_t latent)
    : mean_(in, latent, Activation::linear), std_(in, latent, Activation::exponential) {}

template <typename T>
MveOutput<T> MveHead<T>::forward(Tape<T>& tape, Var<T> c) const {
  return {mean_.forward(tape, c), std_.pre_activation(tape, c)};
}

template <typename T>
Var<T> MveHead<T>::mean(Tape<T>& tape, Var<T> c) const {
  return mean_.forward(tape, c);
}

template <typename T>
void MveHead<T>::init(Rng& rng) {
  mean_.init(rng);
  std_.init(rng);
}

template <typename T>
void MveHead<T>::collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
  mean_.collect(prefix + ".mean", out, false);
  std_.collect(prefix + ".std", out, true);
}

// ---------------------------------------------------------------------------
// Network

template <typename T>
Network<T>::Network(const std::vector<LayerSpec>& specs, const Shape& input, std::string_view what)
    : input_(input) {
  Shape shape = input;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const LayerSpec& spec = specs[i];
    Shape next;
    try {
      next = infer_output(spec, shape);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(what) + "." + std::to_string(i) + ": " + e.what());
    }
    switch (spec.kind) {
      case LayerSpec::Kind::dense:
        layers_.emplace_back(DenseLayer<T>(numel(shape), spec.units, spec.activation));
        break;
      case LayerSpec::Kind::conv1d:
        layers_.emplace_back(Conv1dBlock<T>(shape[1], spec));
        break;
      case LayerSpec::Kind::reshape:
        layers_.emplace_back(ReshapeLayer<T>(spec.shape));
        break;
    }
    shape = next;
  }
  output_ = shape;
}

template <typename T>
Var<T> Network<T>::forward(Tape<T>& tape, Var<T> x) const {
  for (const auto& layer : layers_) {
    x = std::visit([&](const auto& l) { return l.forward(tape, x); }, layer);
  }
  return x;
}

template <typename T>
Var<T> Network<T>::forward_train(Tape<T>& tape, Var<T> x) {
  for (auto& layer : layers_) {
    if (auto* conv = std::get_if<Conv1dBlock<T>>(&layer)) {
      x = conv->forward_train(tape, x);
    } else {
      x = std::visit([&](const auto& l) { return l.forward(tape, x); }, layer);
    }
  }
  return x;
}

template <typename T>
void Network<T>::init(Rng& rng) {
  for (auto& layer : layers_) {
    if (auto* d = std::get_if<DenseLayer<T>>(&layer)) d->init(rng);
    if (auto* c = std::get_if<Conv1dBlock<T>>(&layer)) c->init(rng);
  }
}

template <typename T>
void Network<T>::collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string name = prefix + "." + std::to_string(i);
    if (auto* d = std::get_if<DenseLayer<T>>(&layers_[i])) d->collect(name, out);
    if (auto* c = std::get_if<Conv1dBlock<T>>(&layers_[i])) c->collect(name, out);
  }
}

#define PPC_INSTANTIATE_LAYERS(T)                                        \
  template Var<T> activate<T>(Var<T>, Activation);                       \
  template void glorot_uniform<T>(Tensor<T>&, std::size_t, std::size_t, Rng&); \
  template class DenseLayer<T>;                                          \
  template class Conv1dBlock<T>;                                         \
  template class ReshapeLayer<T>;                                        \
  template class GruCell<T>;                                             \
  template class MveHead<T>;                                             \
  template class Network<T>;

PPC_INSTANTIATE_LAYERS(float)
PPC_INSTANTIATE_LAYERS(double)

}  // namespace ppc
