// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include "astro/error.hpp"
#include "astro/tensor.hpp"

namespace astro {

enum class Mode { Train, Eval };

template <class T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run reverse-mode record. Nodes are appended in evaluation order,
/// so node ids are already a topological order and backward() walks them in
/// reverse. A tape is rebuilt for every step and is not shared across threads.
///
/// param() records an external tensor by reference without copying it: the
/// tensor must outlive the tape and stay unmodified until backward() returns.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var<T> constant(Tensor<T> v) { return push(std::move(v), nullptr, {}, nullptr, false); }

  Var<T> leaf(Tensor<T> v, bool requires_grad = true) {
    return push(std::move(v), nullptr, {}, nullptr, requires_grad && grad_enabled_);
  }

  Var<T> param(const Tensor<T>& p) {
    if (auto it = params_.find(&p); it != params_.end()) return Var<T>(this, it->second);
    auto v = push(Tensor<T>(), &p, {}, nullptr, grad_enabled_);
    params_.emplace(&p, v.id());
    return v;
  }

  Var<T> record(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn) {
    bool needs = false;
    if (grad_enabled_)
      for (auto i : inputs) needs = needs || nodes_[i].requires_grad;
    if (!needs) return push(std::move(value), nullptr, {}, nullptr, false);
    return push(std::move(value), nullptr, std::move(inputs), std::move(fn), true);
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.owned;
  }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Seeds d(loss)/d(loss) = 1 and applies every recorded rule in reverse order.
  void backward(const Var<T>& loss) {
    if (loss.value().size() != 1)
      throw ContractError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
    grads_.assign(nodes_.size(), std::nullopt);
    grads_[loss.id()] = Tensor<T>(loss.shape(), T(1));
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.backward || !grads_[id]) continue;
      n.backward(*this, *grads_[id]);
    }
  }

  /// Gradient accumulator of node `id`, zero-initialised on first use.
  Tensor<T>& grad_ref(std::size_t id) {
    auto& g = grads_[id];
    if (!g) g = Tensor<T>(value(id).shape(), T(0));
    return *g;
  }

  Tensor<T> grad(const Var<T>& v) const {
    if (v.id() < grads_.size() && grads_[v.id()]) return *grads_[v.id()];
    return Tensor<T>(v.shape(), T(0));
  }

  /// Gradient of a tensor registered through param(); zeros if it never
  /// reached the loss.
  Tensor<T> grad_of(const Tensor<T>& p) const {
    auto it = params_.find(&p);
    if (it == params_.end()) return Tensor<T>(p.shape(), T(0));
    return grad(Var<T>(const_cast<Tape*>(this), it->second));
  }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var<T> push(Tensor<T> v, const Tensor<T>* ext, std::vector<std::size_t> inputs, BackwardFn fn, bool rg) {
    nodes_.push_back(Node{std::move(v), ext, std::move(inputs), std::move(fn), rg});
    return Var<T>(this, nodes_.size() - 1);
  }

  bool grad_enabled_;
  std::deque<Node> nodes_;  // deque keeps value references stable while recording
  std::vector<std::optional<Tensor<T>>> grads_;
  std::unordered_map<const Tensor<T>*, std::size_t> params_;
};

namespace detail {

template <class T>
void require_same_tape(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands recorded on different tapes");
}

template <class T>
void accumulate_into(Tape<T>& t, std::size_t id, const Tensor<T>& g) {
  if (!t.requires_grad(id)) return;
  auto& dst = t.grad_ref(id);
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Binary elementwise ops with broadcasting.

enum class ElementOp { Add, Sub, Mul, Div, Exp, Log, Gelu, Relu, Sigmoid, Scale };

inline ElementOp parse_element_op(std::string_view name) {
  static const std::pair<std::string_view, ElementOp> table[] = {
      {"add", ElementOp::Add},   {"sub", ElementOp::Sub},   {"mul", ElementOp::Mul},         {"div", ElementOp::Div},
      {"exp", ElementOp::Exp},   {"log", ElementOp::Log},   {"gelu", ElementOp::Gelu},       {"relu", ElementOp::Relu},
      {"sigmoid", ElementOp::Sigmoid}, {"scale", ElementOp::Scale}};
  for (auto& [n, op] : table)
    if (n == name) return op;
  throw ContractError("unknown elementwise op '" + std::string(name) + "'");
}

namespace detail {

template <class T, class Fwd, class Da, class Db>
Var<T> binary_op(const Var<T>& a, const Var<T>& b, Fwd fwd, Da da, Db db) {
  require_same_tape(a, b);
  auto& tape = a.tape();
  const auto& av = a.value();
  const auto& bv = b.value();
  const Shape out_shape = broadcast_shape(av.shape(), bv.shape());
  Tensor<T> out(out_shape);
  const bool same = av.shape() == out_shape && bv.shape() == out_shape;
  std::vector<std::size_t> ia, ib;
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    ia = broadcast_index_map(av.shape(), out_shape);
    ib = broadcast_index_map(bv.shape(), out_shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[ia[i]], bv[ib[i]]);
  }
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), {ai, bi},
                     [ai, bi, same, ia = std::move(ia), ib = std::move(ib), da, db](Tape<T>& t, const Tensor<T>& g) {
                       const auto& x = t.value(ai);
                       const auto& y = t.value(bi);
                       if (t.requires_grad(ai)) {
                         auto& gx = t.grad_ref(ai);
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           const std::size_t p = same ? i : ia[i], q = same ? i : ib[i];
                           gx[p] += da(g[i], x[p], y[q]);
                         }
                       }
                       if (t.requires_grad(bi)) {
                         auto& gy = t.grad_ref(bi);
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           const std::size_t p = same ? i : ia[i], q = same ? i : ib[i];
                           gy[q] += db(g[i], x[p], y[q]);
                         }
                       }
                     });
}

template <class T, class Fwd, class Dx>
Var<T> unary_op(const Var<T>& a, Fwd fwd, Dx dx) {
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  const std::size_t ai = a.id();
  return a.tape().record(std::move(out), {ai}, [ai, dx](Tape<T>& t, const Tensor<T>& g) {
    const auto& x = t.value(ai);
    auto& gx = t.grad_ref(ai);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dx(x[i]);
  });
}

}  // namespace detail

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return detail::binary_op<T>(
      a, b, [](T x, T y) { return x + y; }, [](T g, T, T) { return g; }, [](T g, T, T) { return g; });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return detail::binary_op<T>(
      a, b, [](T x, T y) { return x - y; }, [](T g, T, T) { return g; }, [](T g, T, T) { return -g; });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return detail::binary_op<T>(
      a, b, [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; }, [](T g, T x, T) { return g * x; });
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  for (T v : b.value().data())
    if (v == T(0)) throw NonFiniteError("div: division by zero");
  return detail::binary_op<T>(
      a, b, [](T x, T y) { return x / y; }, [](T g, T, T y) { return g / y; },
      [](T g, T x, T y) { return -g * x / (y * y); });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  return detail::unary_op<T>(a, [s](T x) { return s * x; }, [s](T) { return s; });
}

template <class T>
Var<T> exp(const Var<T>& a) {
  return detail::unary_op<T>(a, [](T x) { return std::exp(x); }, [](T x) { return std::exp(x); });
}

template <class T>
Var<T> log(const Var<T>& a) {
  for (T v : a.value().data())
    if (!(v > T(0))) throw DomainError("log: non-positive input " + std::to_string(static_cast<double>(v)));
  return detail::unary_op<T>(a, [](T x) { return std::log(x); }, [](T x) { return T(1) / x; });
}

/// Exact GELU, x * Phi(x).
template <class T>
Var<T> gelu(const Var<T>& a) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return detail::unary_op<T>(
      a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [](T x) { return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(T(-0.5) * x * x); });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return detail::unary_op<T>(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  auto sig = [](T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
  };
  return detail::unary_op<T>(a, sig, [sig](T x) {
    const T s = sig(x);
    return s * (T(1) - s);
  });
}

/// Name-dispatched entry point. `b` is required for binary ops; `factor`
/// is used by Scale only.
template <class T>
Var<T> elementwise(ElementOp op, const Var<T>& a, std::optional<std::type_identity_t<Var<T>>> b = std::nullopt,
                   std::type_identity_t<T> factor = T(1)) {
  const bool binary = op == ElementOp::Add || op == ElementOp::Sub || op == ElementOp::Mul || op == ElementOp::Div;
  if (binary && !b) throw ContractError("binary elementwise op needs a second operand");
  switch (op) {
    case ElementOp::Add: return add(a, *b);
    case ElementOp::Sub: return sub(a, *b);
    case ElementOp::Mul: return mul(a, *b);
    case ElementOp::Div: return div(a, *b);
    case ElementOp::Exp: return exp(a);
    case ElementOp::Log: return log(a);
    case ElementOp::Gelu: return gelu(a);
    case ElementOp::Relu: return relu(a);
    case ElementOp::Sigmoid: return sigmoid(a);
    case ElementOp::Scale: return scale(a, factor);
  }
  throw ContractError("unreachable elementwise op");
}

template <class T>
Var<T> elementwise(std::string_view op, const Var<T>& a, std::optional<std::type_identity_t<Var<T>>> b = std::nullopt,
                   std::type_identity_t<T> factor = T(1)) {
  return elementwise(parse_element_op(op), a, std::move(b), factor);
}

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <class T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <class T>
Var<T> operator/(const Var<T>& a, const Var<T>& b) { return div(a, b); }

// ---------------------------------------------------------------------------
// Matrix products.

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw ShapeError("matmul: inner dimensions differ, " + to_string(av.shape()) + " * " + to_string(bv.shape()));
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<T> out({m, n});
  detail::gemm(false, false, m, n, k, av.data().data(), bv.data().data(), out.data().data(), false);
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(std::move(out), {ai, bi}, [ai, bi, m, n, k](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(ai))
      detail::gemm(false, true, m, k, n, g.data().data(), t.value(bi).data().data(), t.grad_ref(ai).data().data(), true);
    if (t.requires_grad(bi))
      detail::gemm(true, false, k, n, m, t.value(ai).data().data(), g.data().data(), t.grad_ref(bi).data().data(), true);
  });
}

/// Batched product of [b x m x k] and [b x k x n] (or [b x n x k] with trans_b).
template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool trans_b = false) {
  detail::require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(trans_b ? 2 : 1))
    throw ShapeError("bmm: incompatible shapes " + to_string(av.shape()) + " * " + to_string(bv.shape()) +
                     (trans_b ? "^T" : ""));
  const std::size_t batch = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(trans_b ? 1 : 2);
  Tensor<T> out({batch, m, n});
  for (std::size_t i = 0; i < batch; ++i)
    detail::gemm(false, trans_b, m, n, k, av.data().data() + i * m * k, bv.data().data() + i * k * n,
                 out.data().data() + i * m * n, false);
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(std::move(out), {ai, bi}, [=](Tape<T>& t, const Tensor<T>& g) {
    const T* gp = g.data().data();
    if (t.requires_grad(ai)) {
      T* ga = t.grad_ref(ai).data().data();
      const T* bp = t.value(bi).data().data();
      // dA = G * op(B)^T
      for (std::size_t i = 0; i < batch; ++i)
        detail::gemm(false, !trans_b, m, k, n, gp + i * m * n, bp + i * k * n, ga + i * m * k, true);
    }
    if (t.requires_grad(bi)) {
      T* gb = t.grad_ref(bi).data().data();
      const T* ap = t.value(ai).data().data();
      for (std::size_t i = 0; i < batch; ++i) {
        if (trans_b)  // dB[n x k] = G^T * A
          detail::gemm(true, false, n, k, m, gp + i * m * n, ap + i * m * k, gb + i * k * n, true);
        else  // dB[k x n] = A^T * G
          detail::gemm(true, false, k, n, m, ap + i * m * k, gp + i * m * n, gb + i * k * n, true);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation and reductions.

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  auto out = a.value().reshaped(std::move(shape));
  const std::size_t ai = a.id();
  return a.tape().record(std::move(out), {ai}, [ai](Tape<T>& t, const Tensor<T>& g) {
    auto& gx = t.grad_ref(ai);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// out.shape[i] = in.shape[axes[i]].
template <class T>
Var<T> permute(const Var<T>& a, const std::vector<std::size_t>& axes) {
  const auto& av = a.value();
  const std::size_t r = av.rank();
  if (axes.size() != r) throw ShapeError("permute: axes length differs from rank of " + to_string(av.shape()));
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t d = r; d-- > 1;) in_strides[d - 1] = in_strides[d] * av.dim(d);
  Shape out_shape(r);
  std::vector<std::size_t> strides(r);
  std::vector<bool> seen(r, false);
  for (std::size_t i = 0; i < r; ++i) {
    if (axes[i] >= r || seen[axes[i]]) throw ShapeError("permute: axes are not a permutation");
    seen[axes[i]] = true;
    out_shape[i] = av.dim(axes[i]);
    strides[i] = in_strides[axes[i]];
  }
  const std::size_t n = av.size();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t cur = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    src[flat] = cur;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      cur += strides[d];
      if (counter[d] < out_shape[d]) break;
      cur -= strides[d] * counter[d];
      counter[d] = 0;
    }
  }
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < n; ++i) out[i] = av[src[i]];
  const std::size_t ai = a.id();
  return a.tape().record(std::move(out), {ai}, [ai, src = std::move(src)](Tape<T>& t, const Tensor<T>& g) {
    auto& gx = t.grad_ref(ai);
    for (std::size_t i = 0; i < g.size(); ++i) gx[src[i]] += g[i];
  });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  if (a.value().rank() != 2) throw ShapeError("transpose expects a matrix, got " + to_string(a.shape()));
  return permute(a, {1, 0});
}

template <class T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T v : a.value().data()) s += v;
  const std::size_t ai = a.id();
  return a.tape().record(Tensor<T>::scalar(s), {ai}, [ai](Tape<T>& t, const Tensor<T>& g) {
    auto& gx = t.grad_ref(ai);
    for (auto& v : gx.data()) v += g[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

/// Reduces `a` by summation to `shape`, which must broadcast to a's shape.
template <class T>
Var<T> sum_to(const Var<T>& a, Shape shape) {
  const auto& av = a.value();
  if (broadcast_shape(shape, av.shape()) != av.shape())
    throw ShapeError("sum_to: " + to_string(shape) + " does not broadcast to " + to_string(av.shape()));
  auto map = broadcast_index_map(shape, av.shape());
  Tensor<T> out(shape);
  for (std::size_t i = 0; i < av.size(); ++i) out[map[i]] += av[i];
  const std::size_t ai = a.id();
  return a.tape().record(std::move(out), {ai}, [ai, map = std::move(map)](Tape<T>& t, const Tensor<T>& g) {
    auto& gx = t.grad_ref(ai);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[map[i]];
  });
}

/// out[i] = table[indices[i]] reshaped to `shape`; gradient scatter-adds.
template <class T>
Var<T> gather(const Var<T>& table, std::vector<std::size_t> indices, Shape shape) {
  const auto& tv = table.value();
  if (shape_numel(shape) != indices.size()) throw ShapeError("gather: index count does not match " + to_string(shape));
  Tensor<T> out(std::move(shape));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= tv.size()) throw ShapeError("gather: index out of range");
    out[i] = tv[indices[i]];
  }
  const std::size_t ti = table.id();
  return table.tape().record(std::move(out), {ti}, [ti, idx = std::move(indices)](Tape<T>& t, const Tensor<T>& g) {
    auto& gx = t.grad_ref(ti);
    for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += g[i];
  });
}

/// Softmax along `axis`, max-subtracted. A slice that is entirely -inf has
/// no distribution and is rejected.
template <class T>
Var<T> softmax(const Var<T>& a, std::size_t axis) {
  const auto& av = a.value();
  if (axis >= av.rank()) throw ShapeError("softmax: axis out of range for " + to_string(av.shape()));
  std::size_t outer = 1, inner = 1;
  const std::size_t len = av.dim(axis);
  for (std::size_t d = 0; d < axis; ++d) outer *= av.dim(d);
  for (std::size_t d = axis + 1; d < av.rank(); ++d) inner *= av.dim(d);
  Tensor<T> out(av.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, av[base + j * inner]);
      if (mx == -std::numeric_limits<T>::infinity()) throw NonFiniteError("softmax: slice is entirely -inf");
      T s = 0;
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(av[base + j * inner] - mx);
        out[base + j * inner] = e;
        s += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= s;
    }
  const std::size_t ai = a.id();
  const std::size_t oi = a.tape().size();
  return a.tape().record(std::move(out), {ai}, [ai, oi, outer, inner, len](Tape<T>& t, const Tensor<T>& g) {
    const auto& y = t.value(oi);
    auto& gx = t.grad_ref(ai);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t p = base + j * inner;
          gx[p] += y[p] * (g[p] - dot);
        }
      }
  });
}

}  // namespace astro
