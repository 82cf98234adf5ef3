#include "ppc/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

namespace ppc {

std::string_view to_string(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::constant: return "constant";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::matmul: return "matmul";
    case OpKind::conv1d: return "conv1d";
    case OpKind::maxpool1d: return "maxpool1d";
    case OpKind::upsample1d: return "upsample1d";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::tanh: return "tanh";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::square: return "square";
    case OpKind::reduce_sum: return "reduce_sum";
    case OpKind::reduce_mean: return "reduce_mean";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::reshape: return "reshape";
    case OpKind::batchnorm: return "batchnorm";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::bind(const Tensor<T>& p, Tensor<T>* target) {
  Node n;
  n.kind = OpKind::leaf;
  n.external = &p;
  n.grad_target = target;
  n.needs_grad = target != nullptr;
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::parameter(Tensor<T>& p) {
  if (p.requires_grad()) return bind(p, &p);
  auto it = tracked_.find(&p);
  return bind(p, it == tracked_.end() ? nullptr : it->second);
}

template <typename T>
Var<T> Tape<T>::parameter(const Tensor<T>& p) {
  auto it = tracked_.find(&p);
  return bind(p, it == tracked_.end() ? nullptr : it->second);
}

template <typename T>
void Tape<T>::track(Tensor<T>& p) {
  if (!p.requires_grad()) p.set_requires_grad(true);
  tracked_[&p] = &p;
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.kind = OpKind::constant;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(OpKind kind, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn backward) {
  if (!Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(value.data().data(), value.size()).allFinite()) {
    throw NumericError("op '" + std::string(to_string(kind)) + "' produced a non-finite value (output shape " +
                       to_string(value.shape()) + ")");
  }
  Node n;
  n.kind = kind;
  n.owned = std::move(value);
  for (auto id : inputs) {
    if (id >= nodes_.size()) throw Error("tape: operand id out of range");
    n.needs_grad = n.needs_grad || nodes_[id].needs_grad;
  }
  n.inputs = std::move(inputs);
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
std::span<T> Tape<T>::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(value(id).size(), T(0));
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (nodes_.empty()) throw Error("backward: tape is empty");
  if (&loss.tape() != this) throw Error("backward: loss belongs to another tape");
  if (value(loss.id()).size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + to_string(value(loss.id()).shape()));
  }
  for (auto& n : nodes_) n.grad.clear();
  grad(loss.id())[0] = T(1);
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.grad_target) {
      auto dst = n.grad_target->grad();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
    } else if (n.backward) {
      n.backward(*this, id);
    }
  }
}

// ---------------------------------------------------------------------------
// Ops

namespace ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
Tape<T>& same_tape(Var<T> a, Var<T> b, std::string_view op) {
  if (!a.valid() || !b.valid() || &a.tape() != &b.tape()) {
    throw Error(std::string(op) + ": operands belong to different tapes");
  }
  return a.tape();
}

// True when b can be broadcast against a: identical shape, single value, or a
// trailing suffix of a's shape.
bool broadcastable(const Shape& a, const Shape& b) {
  if (numel(b) == 1) return true;
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

template <typename T>
void check_broadcast(std::string_view op, Var<T> a, Var<T> b) {
  if (!broadcastable(a.shape(), b.shape())) {
    throw ShapeError(std::string(op) + ": cannot combine shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
}

// Calls f(i, j) for every element i of a and the matching element j of a
// broadcast operand holding nb values.
template <typename F>
void broadcast_each(std::size_t n, std::size_t nb, F f) {
  if (nb == n) {
    for (std::size_t i = 0; i < n; ++i) f(i, i);
  } else if (nb == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i, std::size_t{0});
  } else {
    for (std::size_t base = 0; base < n; base += nb) {
      for (std::size_t j = 0; j < nb; ++j) f(base + j, j);
    }
  }
}

// `derivative(x, y)` is dy/dx given the input x and the output y.
template <typename T, typename F, typename D>
Var<T> unary(OpKind kind, Var<T> a, F forward, D derivative) {
  const auto& x = a.value();
  Tensor<T> out(x.shape(), Uninitialized{});
  auto o = out.data();
  auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = forward(in[i]);
  std::size_t ia = a.id();
  return a.tape().record(kind, std::move(out), {ia}, [ia, derivative](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto xs = t.value(ia).data();
    auto ys = t.value(self).data();
    auto ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * derivative(xs[i], ys[i]);
  });
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& tape = same_tape(a, b, "add");
  check_broadcast("add", a, b);
  Tensor<T> out = a.value();
  out.set_requires_grad(false);
  auto o = out.data();
  auto bv = b.value().data();
  const std::size_t nb = bv.size();
  broadcast_each(o.size(), nb, [&](std::size_t i, std::size_t j) { o[i] += bv[j]; });
  std::size_t ia = a.id(), ib = b.id();
  return tape.record(OpKind::add, std::move(out), {ia, ib}, [ia, ib, nb](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    if (t.needs_grad(ia)) {
      auto ga = t.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(ib)) {
      auto gb = t.grad(ib);
      broadcast_each(g.size(), nb, [&](std::size_t i, std::size_t j) { gb[j] += g[i]; });
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  auto& tape = same_tape(a, b, "sub");
  check_broadcast("sub", a, b);
  Tensor<T> out(a.shape(), Uninitialized{});
  auto o = out.data();
  auto av = a.value().data();
  auto bv = b.value().data();
  const std::size_t nb = bv.size();
  broadcast_each(o.size(), nb, [&](std::size_t i, std::size_t j) { o[i] = av[i] - bv[j]; });
  std::size_t ia = a.id(), ib = b.id();
  return tape.record(OpKind::sub, std::move(out), {ia, ib}, [ia, ib, nb](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    if (t.needs_grad(ia)) {
      auto ga = t.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(ib)) {
      auto gb = t.grad(ib);
      broadcast_each(g.size(), nb, [&](std::size_t i, std::size_t j) { gb[j] -= g[i]; });
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& tape = same_tape(a, b, "mul");
  check_broadcast("mul", a, b);
  Tensor<T> out(a.shape(), Uninitialized{});
  auto o = out.data();
  auto av = a.value().data();
  auto bv = b.value().data();
  const std::size_t nb = bv.size();
  broadcast_each(o.size(), nb, [&](std::size_t i, std::size_t j) { o[i] = av[i] * bv[j]; });
  std::size_t ia = a.id(), ib = b.id();
  return tape.record(OpKind::mul, std::move(out), {ia, ib}, [ia, ib, nb](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto av = t.value(ia).data();
    auto bv = t.value(ib).data();
    if (t.needs_grad(ia)) {
      auto ga = t.grad(ia);
      broadcast_each(g.size(), nb, [&](std::size_t i, std::size_t j) { ga[i] += g[i] * bv[j]; });
    }
    if (t.needs_grad(ib)) {
      auto gb = t.grad(ib);
      broadcast_each(g.size(), nb, [&](std::size_t i, std::size_t j) { gb[j] += g[i] * av[i]; });
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out(a.shape(), Uninitialized{});
  auto o = out.data();
  auto av = a.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * factor;
  std::size_t ia = a.id();
  return a.tape().record(OpKind::scale, std::move(out), {ia}, [ia, factor](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& tape = same_tape(a, b, "matmul");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw ShapeError("matmul: incompatible shapes " + to_string(sa) + " x " + to_string(sb));
  }
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  Tensor<T> out(Shape{m, n}, Uninitialized{});
  MatMap<T>(out.data().data(), m, n).noalias() =
      ConstMatMap<T>(a.value().data().data(), m, k) * ConstMatMap<T>(b.value().data().data(), k, n);
  std::size_t ia = a.id(), ib = b.id();
  return tape.record(OpKind::matmul, std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape<T>& t, std::size_t self) {
    ConstMatMap<T> g(t.grad(self).data(), m, n);
    if (t.needs_grad(ia)) {
      MatMap<T>(t.grad(ia).data(), m, k).noalias() += g * ConstMatMap<T>(t.value(ib).data().data(), k, n).transpose();
    }
    if (t.needs_grad(ib)) {
      MatMap<T>(t.grad(ib).data(), k, n).noalias() += ConstMatMap<T>(t.value(ia).data().data(), m, k).transpose() * g;
    }
  });
}

template <typename T>
Var<T> conv1d(Var<T> x, Var<T> w) {
  auto& tape = same_tape(x, w, "conv1d");
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  if (sx.size() != 3 || sw.size() != 3 || sw[1] != sx[2] || sw[0] % 2 == 0) {
    throw ShapeError("conv1d: expected x [batch, length, channels] and odd-kernel w [kernel, channels, filters], got " +
                     to_string(sx) + " and " + to_string(sw));
  }
  const std::size_t batch = sx[0], len = sx[1], chan = sx[2];
  const std::size_t kernel = sw[0], filters = sw[2];
  const std::size_t half = kernel / 2;
  const std::size_t rows = batch * len, cols = kernel * chan;

  // im2col: row (b, t) holds the kernel window around t, zero outside the signal.
  auto patches = std::make_shared<Buffer<T>>(rows * cols);
  {
    auto xv = x.value().data();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < len; ++t) {
        T* row = patches->data() + (b * len + t) * cols;
        for (std::size_t j = 0; j < kernel; ++j) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(half);
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) {
            std::fill_n(row + j * chan, chan, T(0));
            continue;
          }
          const T* from = xv.data() + (b * len + static_cast<std::size_t>(src)) * chan;
          std::copy(from, from + chan, row + j * chan);
        }
      }
    }
  }
  Tensor<T> out(Shape{batch, len, filters}, Uninitialized{});
  MatMap<T>(out.data().data(), rows, filters).noalias() =
      ConstMatMap<T>(patches->data(), rows, cols) * ConstMatMap<T>(w.value().data().data(), cols, filters);

  std::size_t ix = x.id(), iw = w.id();
  return tape.record(
      OpKind::conv1d, std::move(out), {ix, iw},
      [ix, iw, patches, batch, len, chan, kernel, filters, half, rows, cols](Tape<T>& t, std::size_t self) {
        ConstMatMap<T> g(t.grad(self).data(), rows, filters);
        if (t.needs_grad(iw)) {
          MatMap<T>(t.grad(iw).data(), cols, filters).noalias() +=
              ConstMatMap<T>(patches->data(), rows, cols).transpose() * g;
        }
        if (t.needs_grad(ix)) {
          RowMat<T> dpatches = g * ConstMatMap<T>(t.value(iw).data().data(), cols, filters).transpose();
          auto gx = t.grad(ix);
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t tt = 0; tt < len; ++tt) {
              const T* row = dpatches.data() + (b * len + tt) * cols;
              for (std::size_t j = 0; j < kernel; ++j) {
                const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(tt + j) - static_cast<std::ptrdiff_t>(half);
                if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
                T* to = gx.data() + (b * len + static_cast<std::size_t>(src)) * chan;
                for (std::size_t c = 0; c < chan; ++c) to[c] += row[j * chan + c];
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> maxpool1d(Var<T> x, std::size_t pool) {
  const auto& sx = x.shape();
  if (sx.size() != 3 || pool == 0 || sx[1] % pool != 0) {
    throw ShapeError("maxpool1d: length of " + to_string(sx) + " not divisible by pool " + std::to_string(pool));
  }
  const std::size_t batch = sx[0], len = sx[1], chan = sx[2], out_len = len / pool;
  Tensor<T> out(Shape{batch, out_len, chan}, Uninitialized{});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  auto xv = x.value().data();
  auto o = out.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t p = 0; p < out_len; ++p) {
      for (std::size_t c = 0; c < chan; ++c) {
        std::size_t best = (b * len + p * pool) * chan + c;
        for (std::size_t j = 1; j < pool; ++j) {
          const std::size_t idx = (b * len + p * pool + j) * chan + c;
          if (xv[idx] > xv[best]) best = idx;
        }
        const std::size_t oi = (b * out_len + p) * chan + c;
        o[oi] = xv[best];
        (*argmax)[oi] = best;
      }
    }
  }
  std::size_t ix = x.id();
  return x.tape().record(OpKind::maxpool1d, std::move(out), {ix}, [ix, argmax](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
  });
}

template <typename T>
Var<T> upsample1d(Var<T> x, std::size_t factor) {
  const auto& sx = x.shape();
  if (sx.size() != 3 || factor == 0) {
    throw ShapeError("upsample1d: expected [batch, length, channels] and factor > 0, got " + to_string(sx));
  }
  const std::size_t batch = sx[0], len = sx[1], chan = sx[2];
  Tensor<T> out(Shape{batch, len * factor, chan}, Uninitialized{});
  auto xv = x.value().data();
  auto o = out.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < len * factor; ++t) {
      const T* from = xv.data() + (b * len + t / factor) * chan;
      std::copy(from, from + chan, o.data() + (b * len * factor + t) * chan);
    }
  }
  std::size_t ix = x.id();
  return x.tape().record(OpKind::upsample1d, std::move(out), {ix},
                         [ix, batch, len, chan, factor](Tape<T>& t, std::size_t self) {
                           auto g = t.grad(self);
                           auto gx = t.grad(ix);
                           for (std::size_t b = 0; b < batch; ++b) {
                             for (std::size_t tt = 0; tt < len * factor; ++tt) {
                               const T* from = g.data() + (b * len * factor + tt) * chan;
                               T* to = gx.data() + (b * len + tt / factor) * chan;
                               for (std::size_t c = 0; c < chan; ++c) to[c] += from[c];
                             }
                           }
                         });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return unary<T>(
      OpKind::relu, a, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return unary<T>(
      OpKind::sigmoid, a,
      [](T v) {
        // Split by sign so exp never overflows.
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  return unary<T>(
      OpKind::tanh, a, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> exp(Var<T> a) {
  return unary<T>(
      OpKind::exp, a, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(Var<T> a) {
  for (T v : a.value().data()) {
    if (!(v > T(0))) throw NumericError("log: non-positive operand");
  }
  return unary<T>(
      OpKind::log, a, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Var<T> square(Var<T> a) {
  return unary<T>(
      OpKind::square, a, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Var<T> reduce_sum(Var<T> a) {
  T s = T(0);
  for (T v : a.value().data()) s += v;
  std::size_t ia = a.id();
  return a.tape().record(OpKind::reduce_sum, Tensor<T>::scalar(s), {ia}, [ia](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    for (T& v : t.grad(ia)) v += g;
  });
}

template <typename T>
Var<T> reduce_mean(Var<T> a) {
  T s = T(0);
  for (T v : a.value().data()) s += v;
  const T n = static_cast<T>(a.value().size());
  std::size_t ia = a.id();
  return a.tape().record(OpKind::reduce_mean, Tensor<T>::scalar(s / n), {ia}, [ia, n](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0] / n;
    for (T& v : t.grad(ia)) v += g;
  });
}

namespace {

// View of a shape as [outer, axis, inner].
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

template <typename T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  auto& tape = parts[0].tape();
  const Shape first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    same_tape(parts[0], p, "concat");
    const Shape s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) throw ShapeError("concat: shape " + to_string(s) + " does not match " + to_string(first));
    out_shape[axis] += s[axis];
  }
  Tensor<T> out(out_shape, Uninitialized{});
  const AxisSplit os = split_at(out_shape, axis);
  std::vector<std::size_t> ids, offsets;
  std::size_t offset = 0;
  auto o = out.data();
  for (const auto& p : parts) {
    const AxisSplit ps = split_at(p.shape(), axis);
    auto pv = p.value().data();
    for (std::size_t r = 0; r < ps.outer; ++r) {
      std::copy_n(pv.data() + r * ps.extent * ps.inner, ps.extent * ps.inner,
                  o.data() + (r * os.extent + offset) * os.inner);
    }
    ids.push_back(p.id());
    offsets.push_back(offset);
    offset += ps.extent;
  }
  return tape.record(OpKind::concat, std::move(out), ids, [ids, offsets, os](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.needs_grad(ids[k])) continue;
      auto gp = t.grad(ids[k]);
      const std::size_t extent = gp.size() / (os.outer * os.inner);
      for (std::size_t r = 0; r < os.outer; ++r) {
        const T* from = g.data() + (r * os.extent + offsets[k]) * os.inner;
        T* to = gp.data() + r * extent * os.inner;
        for (std::size_t i = 0; i < extent * os.inner; ++i) to[i] += from[i];
      }
    }
  });
}

template <typename T>
Var<T> slice(Var<T> a, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape s = a.shape();
  if (axis >= s.size() || length == 0 || start + length > s[axis]) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") on axis " + std::to_string(axis) + " invalid for " + to_string(s));
  }
  Shape out_shape = s;
  out_shape[axis] = length;
  const AxisSplit as = split_at(s, axis);
  Tensor<T> out(out_shape, Uninitialized{});
  auto av = a.value().data();
  auto o = out.data();
  for (std::size_t r = 0; r < as.outer; ++r) {
    std::copy_n(av.data() + (r * as.extent + start) * as.inner, length * as.inner, o.data() + r * length * as.inner);
  }
  std::size_t ia = a.id();
  return a.tape().record(OpKind::slice, std::move(out), {ia}, [ia, as, start, length](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto ga = t.grad(ia);
    for (std::size_t r = 0; r < as.outer; ++r) {
      const T* from = g.data() + r * length * as.inner;
      T* to = ga.data() + (r * as.extent + start) * as.inner;
      for (std::size_t i = 0; i < length * as.inner; ++i) to[i] += from[i];
    }
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  if (numel(shape) != a.value().size()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  Tensor<T> out(std::move(shape), Uninitialized{});
  std::ranges::copy(a.value().data(), out.data().begin());
  std::size_t ia = a.id();
  return a.tape().record(OpKind::reshape, std::move(out), {ia}, [ia](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <typename T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> beta, const BatchNormStats<T>& stats, std::type_identity_t<BatchNormStats<T>>* update,
                 const BatchNormOptions& options) {
  auto& tape = same_tape(x, gamma, "batchnorm");
  same_tape(x, beta, "batchnorm");
  const Shape sx = x.shape();
  if (sx.empty()) throw ShapeError("batchnorm: scalar input");
  const std::size_t chan = sx.back();
  const std::size_t count = x.value().size() / chan;
  if (gamma.value().size() != chan || beta.value().size() != chan) {
    throw ShapeError("batchnorm: gamma/beta must have " + std::to_string(chan) + " channels, got " +
                     to_string(gamma.shape()) + " and " + to_string(beta.shape()));
  }
  const bool training = update != nullptr;
  if (!training && (stats.mean.size() != chan || stats.var.size() != chan)) {
    throw ShapeError("batchnorm: running statistics do not match " + std::to_string(chan) + " channels");
  }
  if (training && count < 2) throw ShapeError("batchnorm: training mode needs at least two samples per channel");

  auto xv = x.value().data();
  std::vector<T> mean(chan, T(0)), var(chan, T(0));
  if (training) {
    std::vector<double> acc(chan, 0.0), acc2(chan, 0.0);
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t c = 0; c < chan; ++c) acc[c] += xv[i * chan + c];
    }
    for (std::size_t c = 0; c < chan; ++c) acc[c] /= static_cast<double>(count);
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t c = 0; c < chan; ++c) {
        const double d = xv[i * chan + c] - acc[c];
        acc2[c] += d * d;
      }
    }
    for (std::size_t c = 0; c < chan; ++c) {
      mean[c] = static_cast<T>(acc[c]);
      var[c] = static_cast<T>(acc2[c] / static_cast<double>(count));
    }
  } else {
    std::copy_n(stats.mean.data().data(), chan, mean.begin());
    std::copy_n(stats.var.data().data(), chan, var.begin());
  }

  auto inv_std = std::make_shared<std::vector<T>>(chan);
  for (std::size_t c = 0; c < chan; ++c) {
    (*inv_std)[c] = T(1) / std::sqrt(var[c] + static_cast<T>(options.epsilon));
  }
  auto xhat = std::make_shared<Buffer<T>>(x.value().size());
  Tensor<T> out(sx, Uninitialized{});
  auto o = out.data();
  auto gv = gamma.value().data();
  auto bv = beta.value().data();
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t c = 0; c < chan; ++c) {
      const std::size_t k = i * chan + c;
      (*xhat)[k] = (xv[k] - mean[c]) * (*inv_std)[c];
      o[k] = gv[c] * (*xhat)[k] + bv[c];
    }
  }

  if (training) {
    const T m = static_cast<T>(options.momentum);
    auto rm = update->mean.data();
    auto rv = update->var.data();
    for (std::size_t c = 0; c < chan; ++c) {
      rm[c] = m * rm[c] + (T(1) - m) * mean[c];
      rv[c] = m * rv[c] + (T(1) - m) * var[c];
    }
  }

  std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return tape.record(
      OpKind::batchnorm, std::move(out), {ix, ig, ib},
      [ix, ig, ib, chan, count, training, inv_std, xhat](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        auto gv = t.value(ig).data();
        std::vector<T> sum_g(chan, T(0)), sum_gx(chan, T(0));
        for (std::size_t i = 0; i < count; ++i) {
          for (std::size_t c = 0; c < chan; ++c) {
            const std::size_t k = i * chan + c;
            sum_g[c] += g[k];
            sum_gx[c] += g[k] * (*xhat)[k];
          }
        }
        if (t.needs_grad(ig)) {
          auto gg = t.grad(ig);
          for (std::size_t c = 0; c < chan; ++c) gg[c] += sum_gx[c];
        }
        if (t.needs_grad(ib)) {
          auto gb = t.grad(ib);
          for (std::size_t c = 0; c < chan; ++c) gb[c] += sum_g[c];
        }
        if (t.needs_grad(ix)) {
          auto gx = t.grad(ix);
          const T n = static_cast<T>(count);
          for (std::size_t i = 0; i < count; ++i) {
            for (std::size_t c = 0; c < chan; ++c) {
              const std::size_t k = i * chan + c;
              if (training) {
                gx[k] += gv[c] * (*inv_std)[c] * (g[k] - sum_g[c] / n - (*xhat)[k] * sum_gx[c] / n);
              } else {
                gx[k] += gv[c] * (*inv_std)[c] * g[k];
              }
            }
          }
        }
      });
}

#define PPC_INSTANTIATE_OPS(T)                                                                                  \
  template Var<T> add<T>(Var<T>, Var<T>);                                                                       \
  template Var<T> sub<T>(Var<T>, Var<T>);                                                                       \
  template Var<T> mul<T>(Var<T>, Var<T>);                                                                       \
  template Var<T> scale<T>(Var<T>, T);                                                                          \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                                                    \
  template Var<T> conv1d<T>(Var<T>, Var<T>);                                                                    \
  template Var<T> maxpool1d<T>(Var<T>, std::size_t);                                                            \
  template Var<T> upsample1d<T>(Var<T>, std::size_t);                                                           \
  template Var<T> relu<T>(Var<T>);                                                                              \
  template Var<T> sigmoid<T>(Var<T>);                                                                           \
  template Var<T> tanh<T>(Var<T>);                                                                              \
  template Var<T> exp<T>(Var<T>);                                                                               \
  template Var<T> log<T>(Var<T>);                                                                               \
  template Var<T> square<T>(Var<T>);                                                                            \
  template Var<T> reduce_sum<T>(Var<T>);                                                                        \
  template Var<T> reduce_mean<T>(Var<T>);                                                                       \
  template Var<T> concat<T>(std::span<const Var<T>>, std::size_t);                                             \
  template Var<T> slice<T>(Var<T>, std::size_t, std::size_t, std::size_t);                                      \
  template Var<T> reshape<T>(Var<T>, Shape);                                                                    \
  template Var<T> batchnorm<T>(Var<T>, Var<T>, Var<T>, const BatchNormStats<T>&, BatchNormStats<T>*,            \
                               const BatchNormOptions&);

PPC_INSTANTIATE_OPS(float)
PPC_INSTANTIATE_OPS(double)

}  // namespace ops

template class Tape<float>;
template class Tape<double>;

}  // namespace ppc
