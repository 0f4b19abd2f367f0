#pragma once

// Tape-based reverse-mode automatic differentiation over dense tensors.
//
// Every operation appends a node to a Tape holding its forward value and a
// closure that pushes the node's upstream gradient into its inputs. Because
// nodes can only reference earlier nodes, recording order is a topological
// order and backward() simply walks the tape from the loss back to node 0.
//
// Learnable weights live outside the tape as Parameter<T>. Binding a parameter
// to a tape creates a leaf node; backward() adds that leaf's gradient into
// Parameter::grad, so gradients accumulate across calls until zeroed.

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kgaa/errors.hpp"
#include "kgaa/tensor.hpp"

namespace kgaa {

template <class T>
struct Parameter {
  std::string path;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string p, Tensor<T> v)
      : path(std::move(p)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad = Tensor<T>(value.shape()); }
};

template <class T>
class Tape;

// Handle to a node on a tape.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  Tape<T>& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
class Tape {
 public:
  using Backprop = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) {
    return push(std::move(value), false, nullptr);
  }

  // Leaf whose gradient is readable through grad() after backward().
  Var<T> variable(Tensor<T> value) {
    return push(std::move(value), true, nullptr);
  }

  // Binds a parameter once per tape; repeated calls return the same node.
  Var<T> param(Parameter<T>& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return Var<T>(this, it->second);
    Var<T> v = push(p.value, true, nullptr);
    bound_.emplace(&p, v.id());
    bindings_.emplace_back(&p, v.id());
    return v;
  }

  // Appends an operation. The node needs a gradient iff any input does.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backprop fn) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_[in.id()].needs_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : Backprop{});
  }

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, Backprop fn) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_[in.id()].needs_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : Backprop{});
  }

  void backward(Var<T> loss) {
    if (loss.value().numel() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " +
                          shape_str(loss.shape()));
    }
    for (auto& n : nodes_) {
      n.grad = n.needs_grad ? Tensor<T>(n.value.shape()) : Tensor<T>();
    }
    if (!nodes_[loss.id()].needs_grad) return;
    nodes_[loss.id()].grad[0] = T(1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.needs_grad && n.backprop) n.backprop(*this, i);
    }
    for (auto& [p, id] : bindings_) {
      const Tensor<T>& g = nodes_[id].grad;
      if (p->grad.shape() != g.shape()) p->grad = Tensor<T>(g.shape());
      for (std::size_t k = 0; k < g.numel(); ++k) p->grad[k] += g[k];
    }
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor<T>& grad(std::size_t id) const { return nodes_[id].grad; }
  const Tensor<T>& grad(Var<T> v) const { return nodes_[v.id()].grad; }
  Tensor<T>& grad_mut(std::size_t id) { return nodes_[id].grad; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Backprop backprop;
    bool needs_grad = false;
  };

  Var<T> push(Tensor<T> value, bool needs, Backprop fn) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), std::move(fn), needs});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> bound_;
  std::vector<std::pair<Parameter<T>*, std::size_t>> bindings_;
};

namespace detail {

template <class T>
void require_same_shape(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) +
                         " does not match " + shape_str(b.shape()));
  }
}

template <class T>
void require_rank2(const char* op, const Var<T>& a) {
  if (a.value().rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                         shape_str(a.shape()));
  }
}

// Splits a shape around `axis` into (outer, extent, inner) strides.
struct AxisView {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisView axis_view(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_str(shape));
  }
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

// Elementwise unary op with derivative expressed through input and output.
template <class T, class F, class DF>
Var<T> unary(Var<T> x, F f, DF df) {
  Tensor<T> out(x.shape());
  const Tensor<T>& xv = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(xv[i]);
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {x}, [xid, df](Tape<T>& t, std::size_t self) {
    if (!t.needs_grad(xid)) return;
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& xv = t.value(xid);
    const Tensor<T>& yv = t.value(self);
    Tensor<T>& gx = t.grad_mut(xid);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
  });
}

}  // namespace detail

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape("add", a, b);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(std::move(out), {a, b}, [ai, bi](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    for (std::size_t id : {ai, bi}) {
      if (!t.needs_grad(id)) continue;
      Tensor<T>& gx = t.grad_mut(id);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    }
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_shape("sub", a, b);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(std::move(out), {a, b}, [ai, bi](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    if (t.needs_grad(ai)) {
      Tensor<T>& ga = t.grad_mut(ai);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(bi)) {
      Tensor<T>& gb = t.grad_mut(bi);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    }
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape("mul", a, b);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(std::move(out), {a, b}, [ai, bi](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& av = t.value(ai);
    const Tensor<T>& bv = t.value(bi);
    if (t.needs_grad(ai)) {
      Tensor<T>& ga = t.grad_mut(ai);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(bi)) {
      Tensor<T>& gb = t.grad_mut(bi);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  return detail::unary(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

// x[..., D] + row[D]; the row is broadcast over every leading index.
template <class T>
Var<T> add_row(Var<T> x, Var<T> row) {
  const std::size_t d = x.value().cols();
  if (row.value().numel() != d) {
    throw DimensionError("add_row: row shape " + shape_str(row.shape()) +
                         " does not broadcast over " + shape_str(x.shape()));
  }
  Tensor<T> out = x.value();
  const std::size_t n = out.numel() / std::max<std::size_t>(d, 1);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] += row.value()[c];
  const std::size_t xi = x.id(), ri = row.id();
  return x.tape().record(std::move(out), {x, row}, [xi, ri, n, d](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    if (t.needs_grad(xi)) {
      Tensor<T>& gx = t.grad_mut(xi);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    }
    if (t.needs_grad(ri)) {
      Tensor<T>& gr = t.grad_mut(ri);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) gr[c] += g[r * d + c];
    }
  });
}

// x[N×D] scaled row-wise by s[N] (any shape with N elements).
template <class T>
Var<T> scale_rows(Var<T> x, Var<T> s) {
  detail::require_rank2("scale_rows", x);
  const std::size_t n = x.value().rows(), d = x.value().cols();
  if (s.value().numel() != n) {
    throw DimensionError("scale_rows: scale shape " + shape_str(s.shape()) +
                         " does not match rows of " + shape_str(x.shape()));
  }
  Tensor<T> out = x.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] *= s.value()[r];
  const std::size_t xi = x.id(), si = s.id();
  return x.tape().record(std::move(out), {x, s}, [xi, si, n, d](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& xv = t.value(xi);
    const Tensor<T>& sv = t.value(si);
    if (t.needs_grad(xi)) {
      Tensor<T>& gx = t.grad_mut(xi);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += g[r * d + c] * sv[r];
    }
    if (t.needs_grad(si)) {
      Tensor<T>& gs = t.grad_mut(si);
      for (std::size_t r = 0; r < n; ++r) {
        T acc = T(0);
        for (std::size_t c = 0; c < d; ++c) acc += g[r * d + c] * xv[r * d + c];
        gs[r] += acc;
      }
    }
  });
}

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_rank2("matmul", a);
  detail::require_rank2("matmul", b);
  const std::size_t m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(1);
  if (b.value().dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  }
  Tensor<T> out({m, n});
  const T* av = a.value().data().data();
  const T* bv = b.value().data().data();
  T* ov = out.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) ov[i * n + j] += aip * bv[p * n + j];
    }
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(std::move(out), {a, b}, [ai, bi, m, k, n](Tape<T>& t, std::size_t self) {
    const T* g = t.grad(self).data().data();
    const T* av = t.value(ai).data().data();
    const T* bv = t.value(bi).data().data();
    if (t.needs_grad(ai)) {
      T* ga = t.grad_mut(ai).data().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T acc = T(0);
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (t.needs_grad(bi)) {
      T* gb = t.grad_mut(bi).data().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T aip = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
    }
  });
}

template <class T>
Var<T> transpose(Var<T> a) {
  detail::require_rank2("transpose", a);
  const std::size_t m = a.value().dim(0), n = a.value().dim(1);
  Tensor<T> out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.value()[i * n + j];
  const std::size_t ai = a.id();
  return a.tape().record(std::move(out), {a}, [ai, m, n](Tape<T>& t, std::size_t self) {
    if (!t.needs_grad(ai)) return;
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& ga = t.grad_mut(ai);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

// Fully connected layer: x[N×in]·W[in×out] + b[out].
template <class T>
Var<T> affine(Var<T> x, Var<T> w, Var<T> b) {
  return add_row(matmul(x, w), b);
}

template <class T>
Var<T> relu(Var<T> x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

// Exact (erf-based) GELU.
template <class T>
Var<T> gelu(Var<T> x) {
  return detail::unary(
      x,
      [](T v) { return T(0.5) * v * (T(1) + std::erf(v / std::sqrt(T(2)))); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v / std::sqrt(T(2))));
        const T pdf = std::exp(T(-0.5) * v * v) / std::sqrt(T(2) * T(3.14159265358979323846));
        return cdf + v * pdf;
      });
}

template <class T>
Var<T> sigmoid(Var<T> x) {
  return detail::unary(
      x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> tanh(Var<T> x) {
  return detail::unary(x, [](T v) { return std::tanh(v); },
                       [](T, T y) { return T(1) - y * y; });
}

// Softmax along `axis` with max subtraction. NaN inputs propagate to NaN.
template <class T>
Var<T> softmax(Var<T> x, std::size_t axis) {
  const auto view = detail::axis_view(x.shape(), axis);
  Tensor<T> out(x.shape());
  const Tensor<T>& xv = x.value();
  for (std::size_t o = 0; o < view.outer; ++o)
    for (std::size_t in = 0; in < view.inner; ++in) {
      const std::size_t base = o * view.extent * view.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < view.extent; ++e) {
        const T v = xv[base + e * view.inner];
        if (v > mx) mx = v;
      }
      T total = T(0);
      for (std::size_t e = 0; e < view.extent; ++e) {
        const T v = std::exp(xv[base + e * view.inner] - mx);
        out[base + e * view.inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < view.extent; ++e) out[base + e * view.inner] /= total;
    }
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {x}, [xi, view](Tape<T>& t, std::size_t self) {
    if (!t.needs_grad(xi)) return;
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& y = t.value(self);
    Tensor<T>& gx = t.grad_mut(xi);
    for (std::size_t o = 0; o < view.outer; ++o)
      for (std::size_t in = 0; in < view.inner; ++in) {
        const std::size_t base = o * view.extent * view.inner + in;
        T dot = T(0);
        for (std::size_t e = 0; e < view.extent; ++e) {
          const std::size_t i = base + e * view.inner;
          dot += g[i] * y[i];
        }
        for (std::size_t e = 0; e < view.extent; ++e) {
          const std::size_t i = base + e * view.inner;
          gx[i] += y[i] * (g[i] - dot);
        }
      }
  });
}

// Normalizes over the last dimension, then applies gain and bias.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  const std::size_t d = x.value().cols();
  if (gain.value().numel() != d || bias.value().numel() != d) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                         shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  }
  if (!(eps > T(0))) throw ContractError("layer_norm: eps must be positive");
  const std::size_t n = x.value().numel() / d;
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.value().numel());
  std::vector<T> inv_std(n);
  const Tensor<T>& xv = x.value();
  for (std::size_t r = 0; r < n; ++r) {
    T mean = T(0);
    for (std::size_t c = 0; c < d; ++c) mean += xv[r * d + c];
    mean /= T(d);
    T var = T(0);
    for (std::size_t c = 0; c < d; ++c) {
      const T dv = xv[r * d + c] - mean;
      var += dv * dv;
    }
    var /= T(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      const std::size_t i = r * d + c;
      xhat[i] = (xv[i] - mean) * inv_std[r];
      out[i] = xhat[i] * gain.value()[c] + bias.value()[c];
    }
  }
  const std::size_t xi = x.id(), gi = gain.id(), bi = bias.id();
  return x.tape().record(
      std::move(out), {x, gain, bias},
      [xi, gi, bi, n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& gv = t.value(gi);
        if (t.needs_grad(gi)) {
          Tensor<T>& gg = t.grad_mut(gi);
          for (std::size_t i = 0; i < g.numel(); ++i) gg[i % d] += g[i] * xhat[i];
        }
        if (t.needs_grad(bi)) {
          Tensor<T>& gb = t.grad_mut(bi);
          for (std::size_t i = 0; i < g.numel(); ++i) gb[i % d] += g[i];
        }
        if (t.needs_grad(xi)) {
          Tensor<T>& gx = t.grad_mut(xi);
          for (std::size_t r = 0; r < n; ++r) {
            T sum_g = T(0), sum_gx = T(0);
            for (std::size_t c = 0; c < d; ++c) {
              const T gh = g[r * d + c] * gv[c];
              sum_g += gh;
              sum_gx += gh * xhat[r * d + c];
            }
            for (std::size_t c = 0; c < d; ++c) {
              const std::size_t i = r * d + c;
              const T gh = g[i] * gv[c];
              gx[i] += inv_std[r] / T(d) * (T(d) * gh - sum_g - xhat[i] * sum_gx);
            }
          }
        }
      });
}

// Mean cross-entropy of row-wise logits[N×C] against class targets.
template <class T>
Var<T> cross_entropy_with_logits(Var<T> logits, std::span<const int> targets) {
  detail::require_rank2("cross_entropy_with_logits", logits);
  const std::size_t n = logits.value().dim(0), c = logits.value().dim(1);
  if (targets.size() != n) {
    throw DimensionError("cross_entropy_with_logits: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_str(logits.shape()));
  }
  if (n == 0) throw ContractError("cross_entropy_with_logits: no rows");
  std::vector<int> tgt(targets.begin(), targets.end());
  Tensor<T> probs({n, c});
  T total = T(0);
  const Tensor<T>& lv = logits.value();
  for (std::size_t r = 0; r < n; ++r) {
    if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= c) {
      throw ContractError("cross_entropy_with_logits: target " + std::to_string(tgt[r]) +
                          " outside [0, " + std::to_string(c) + ")");
    }
    T mx = lv[r * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, lv[r * c + j]);
    T s = T(0);
    for (std::size_t j = 0; j < c; ++j) {
      probs[r * c + j] = std::exp(lv[r * c + j] - mx);
      s += probs[r * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= s;
    total += mx + std::log(s) - lv[r * c + static_cast<std::size_t>(tgt[r])];
  }
  Tensor<T> out({1}, {total / T(n)});
  const std::size_t li = logits.id();
  return logits.tape().record(
      std::move(out), {logits},
      [li, n, c, tgt = std::move(tgt), probs = std::move(probs)](Tape<T>& t, std::size_t self) {
        if (!t.needs_grad(li)) return;
        const T g = t.grad(self)[0] / T(n);
        Tensor<T>& gl = t.grad_mut(li);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            const T onehot = static_cast<std::size_t>(tgt[r]) == j ? T(1) : T(0);
            gl[r * c + j] += g * (probs[r * c + j] - onehot);
          }
      });
}

template <class T>
Var<T> sum(Var<T> x) {
  T total = T(0);
  for (T v : x.value().data()) total += v;
  const std::size_t xi = x.id();
  return x.tape().record(Tensor<T>({1}, {total}), {x}, [xi](Tape<T>& t, std::size_t self) {
    if (!t.needs_grad(xi)) return;
    const T g = t.grad(self)[0];
    Tensor<T>& gx = t.grad_mut(xi);
    for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += g;
  });
}

template <class T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), T(1) / T(x.value().numel()));
}

// Sum of squared differences.
template <class T>
Var<T> sse(Var<T> a, Var<T> b) {
  Var<T> d = sub(a, b);
  return sum(mul(d, d));
}

template <class T>
Var<T> mse(Var<T> a, Var<T> b) {
  return scale(sse(a, b), T(1) / T(a.value().numel()));
}

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
  if (shape_numel(shape) != x.value().numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  const std::size_t xi = x.id();
  return x.tape().record(x.value().reshaped(std::move(shape)), {x},
                         [xi](Tape<T>& t, std::size_t self) {
                           if (!t.needs_grad(xi)) return;
                           const Tensor<T>& g = t.grad(self);
                           Tensor<T>& gx = t.grad_mut(xi);
                           for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
                         });
}

// Half-open range [begin, end) along `axis`.
template <class T>
Var<T> slice(Var<T> x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto view = detail::axis_view(x.shape(), axis);
  if (begin > end || end > view.extent) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") on axis " + std::to_string(axis) +
                         " of " + shape_str(x.shape()));
  }
  Shape shape = x.shape();
  shape[axis] = end - begin;
  Tensor<T> out(shape);
  const std::size_t len = end - begin;
  const Tensor<T>& xv = x.value();
  for (std::size_t o = 0; o < view.outer; ++o)
    for (std::size_t e = 0; e < len; ++e)
      for (std::size_t in = 0; in < view.inner; ++in)
        out[(o * len + e) * view.inner + in] =
            xv[(o * view.extent + begin + e) * view.inner + in];
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {x}, [xi, view, begin, len](Tape<T>& t, std::size_t self) {
    if (!t.needs_grad(xi)) return;
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad_mut(xi);
    for (std::size_t o = 0; o < view.outer; ++o)
      for (std::size_t e = 0; e < len; ++e)
        for (std::size_t in = 0; in < view.inner; ++in)
          gx[(o * view.extent + begin + e) * view.inner + in] +=
              g[(o * len + e) * view.inner + in];
  });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  Shape shape = parts.front().shape();
  std::size_t total = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size() || axis >= s.size()) {
      throw DimensionError("concat: incompatible shapes " + shape_str(shape) + " and " +
                           shape_str(s));
    }
    extents.push_back(s[axis]);
    total += s[axis];
    s[axis] = shape[axis];
    if (s != shape) {
      throw DimensionError("concat: incompatible shapes " + shape_str(shape) + " and " +
                           shape_str(p.shape()));
    }
  }
  shape[axis] = total;
  const auto view = detail::axis_view(shape, axis);
  Tensor<T> out(shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor<T>& pv = parts[k].value();
    for (std::size_t o = 0; o < view.outer; ++o)
      for (std::size_t e = 0; e < extents[k]; ++e)
        for (std::size_t in = 0; in < view.inner; ++in)
          out[(o * total + offset + e) * view.inner + in] =
              pv[(o * extents[k] + e) * view.inner + in];
    offset += extents[k];
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return parts.front().tape().record(
      std::move(out), parts, [ids, extents, view, total](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.grad(self);
        std::size_t offset = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (t.needs_grad(ids[k])) {
            Tensor<T>& gp = t.grad_mut(ids[k]);
            for (std::size_t o = 0; o < view.outer; ++o)
              for (std::size_t e = 0; e < extents[k]; ++e)
                for (std::size_t in = 0; in < view.inner; ++in)
                  gp[(o * extents[k] + e) * view.inner + in] +=
                      g[(o * total + offset + e) * view.inner + in];
          }
          offset += extents[k];
        }
      });
}

// Embedding lookup: rows of table[V×D] selected by ids.
template <class T>
Var<T> gather_rows(Var<T> table, std::span<const std::size_t> ids) {
  detail::require_rank2("gather_rows", table);
  const std::size_t v = table.value().dim(0), d = table.value().dim(1);
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  Tensor<T> out({idx.size(), d});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= v) {
      throw DimensionError("gather_rows: index " + std::to_string(idx[r]) +
                           " out of range for " + shape_str(table.shape()));
    }
    std::copy_n(table.value().data().begin() + static_cast<std::ptrdiff_t>(idx[r] * d), d,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  const std::size_t ti = table.id();
  return table.tape().record(std::move(out), {table},
                             [ti, d, idx = std::move(idx)](Tape<T>& t, std::size_t self) {
                               if (!t.needs_grad(ti)) return;
                               const Tensor<T>& g = t.grad(self);
                               Tensor<T>& gt = t.grad_mut(ti);
                               for (std::size_t r = 0; r < idx.size(); ++r)
                                 for (std::size_t c = 0; c < d; ++c)
                                   gt[idx[r] * d + c] += g[r * d + c];
                             });
}

// Column means of x[N×D] as a [1×D] row.
template <class T>
Var<T> mean_rows(Var<T> x) {
  detail::require_rank2("mean_rows", x);
  const std::size_t n = x.value().dim(0), d = x.value().dim(1);
  if (n == 0) throw ContractError("mean_rows: no rows");
  Tensor<T> out({1, d});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[c] += x.value()[r * d + c];
  for (std::size_t c = 0; c < d; ++c) out[c] /= T(n);
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {x}, [xi, n, d](Tape<T>& t, std::size_t self) {
    if (!t.needs_grad(xi)) return;
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad_mut(xi);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += g[c] / T(n);
  });
}

// Repeats a [1×D] row n times.
template <class T>
Var<T> repeat_rows(Var<T> row, std::size_t n) {
  const std::size_t d = row.value().numel();
  Tensor<T> out({n, d});
  for (std::size_t r = 0; r < n; ++r)
    std::copy(row.value().data().begin(), row.value().data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(r * d));
  const std::size_t ri = row.id();
  return row.tape().record(std::move(out), {row}, [ri, n, d](Tape<T>& t, std::size_t self) {
    if (!t.needs_grad(ri)) return;
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gr = t.grad_mut(ri);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) gr[c] += g[r * d + c];
  });
}

// Inverted dropout; identity when p == 0.
template <class T, class Rng>
Var<T> dropout(Var<T> x, T p, Rng& rng) {
  if (p <= T(0)) return x;
  if (p >= T(1)) throw ContractError("dropout: probability must be below 1");
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  Tensor<T> mask(x.shape());
  for (std::size_t i = 0; i < mask.numel(); ++i) mask[i] = keep(rng) ? T(1) / (T(1) - p) : T(0);
  return mul(x, x.tape().constant(std::move(mask)));
}

}  // namespace kgaa
