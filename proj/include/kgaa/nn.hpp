#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "kgaa/autograd.hpp"

namespace kgaa {

// Ordered collection of named parameters. Layers refer to entries by index,
// so the store can be copied or moved without invalidating them.
template <class T>
class ParameterStore {
 public:
  std::size_t add(std::string path, Tensor<T> value) {
    if (index_.count(path)) throw ContractError("duplicate parameter path " + path);
    index_.emplace(path, params_.size());
    params_.emplace_back(std::move(path), std::move(value));
    return params_.size() - 1;
  }

  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }

  Parameter<T>& at(const std::string& path) {
    auto it = index_.find(path);
    if (it == index_.end()) throw LookupError("no parameter named " + path);
    return params_[it->second];
  }

  bool contains(const std::string& path) const { return index_.count(path) != 0; }
  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <class T, class Rng>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> out(std::move(shape));
  for (auto& v : out.data()) v = static_cast<T>(dist(rng));
  return out;
}

struct Dense {
  std::size_t weight = 0, bias = 0;
  std::size_t in = 0, out = 0;

  // Weights and bias drawn from uniform(-1/sqrt(in), 1/sqrt(in)), or zeros.
  template <class T, class Rng>
  static Dense create(ParameterStore<T>& store, const std::string& path, std::size_t in,
                      std::size_t out, Rng& rng, bool zero_init = false) {
    const double bound = zero_init ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in));
    Dense d;
    d.in = in;
    d.out = out;
    d.weight = store.add(path + ".weight", uniform_tensor<T>({in, out}, bound, rng));
    d.bias = store.add(path + ".bias", uniform_tensor<T>({out}, bound, rng));
    return d;
  }

  template <class T>
  Var<T> operator()(Tape<T>& tape, ParameterStore<T>& store, Var<T> x) const {
    return affine(x, tape.param(store[weight]), tape.param(store[bias]));
  }

  static std::size_t count(std::size_t in, std::size_t out) { return in * out + out; }
};

struct LayerNorm {
  std::size_t gain = 0, bias = 0;

  template <class T>
  static LayerNorm create(ParameterStore<T>& store, const std::string& path, std::size_t dim) {
    LayerNorm ln;
    ln.gain = store.add(path + ".gain", Tensor<T>({dim}, T(1)));
    ln.bias = store.add(path + ".bias", Tensor<T>({dim}, T(0)));
    return ln;
  }

  template <class T>
  Var<T> operator()(Tape<T>& tape, ParameterStore<T>& store, Var<T> x) const {
    return layer_norm(x, tape.param(store[gain]), tape.param(store[bias]), T(1e-5));
  }

  static std::size_t count(std::size_t dim) { return 2 * dim; }
};

// Single-layer LSTM (gate order: input, forget, cell, output).
struct Lstm {
  std::size_t input_weight = 0, hidden_weight = 0, bias = 0;
  std::size_t in = 0, hidden = 0;

  template <class T, class Rng>
  static Lstm create(ParameterStore<T>& store, const std::string& path, std::size_t in,
                     std::size_t hidden, Rng& rng, double forget_bias = 0.0) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    Lstm l;
    l.in = in;
    l.hidden = hidden;
    l.input_weight = store.add(path + ".input_weight", uniform_tensor<T>({in, 4 * hidden}, bound, rng));
    l.hidden_weight =
        store.add(path + ".hidden_weight", uniform_tensor<T>({hidden, 4 * hidden}, bound, rng));
    l.bias = store.add(path + ".bias", uniform_tensor<T>({4 * hidden}, bound, rng));
    for (std::size_t k = hidden; k < 2 * hidden; ++k) store[l.bias].value[k] += static_cast<T>(forget_bias);
    return l;
  }

  // Consumes the rows of seq[L×in] in order; returns the final hidden state [1×hidden].
  template <class T>
  Var<T> operator()(Tape<T>& tape, ParameterStore<T>& store, Var<T> seq) const {
    const std::size_t steps = seq.value().dim(0);
    const std::size_t h = hidden;
    Var<T> projected = affine(seq, tape.param(store[input_weight]), tape.param(store[bias]));
    Var<T> wh = tape.param(store[hidden_weight]);
    Var<T> state = tape.constant(Tensor<T>({1, h}));
    Var<T> cell = tape.constant(Tensor<T>({1, h}));
    for (std::size_t s = 0; s < steps; ++s) {
      Var<T> gates = add(slice(projected, 0, s, s + 1), matmul(state, wh));
      Var<T> i = sigmoid(slice(gates, 1, 0, h));
      Var<T> f = sigmoid(slice(gates, 1, h, 2 * h));
      Var<T> g = kgaa::tanh(slice(gates, 1, 2 * h, 3 * h));
      Var<T> o = sigmoid(slice(gates, 1, 3 * h, 4 * h));
      cell = add(mul(f, cell), mul(i, g));
      state = mul(o, kgaa::tanh(cell));
    }
    return state;
  }

  static std::size_t count(std::size_t in, std::size_t hidden) {
    return in * 4 * hidden + hidden * 4 * hidden + 4 * hidden;
  }
};

}  // namespace kgaa
