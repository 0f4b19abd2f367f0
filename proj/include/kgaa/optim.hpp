#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "kgaa/nn.hpp"

namespace kgaa {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias-corrected first and second moments.
template <class T>
class Adam {
 public:
  explicit Adam(const ParameterStore<T>& store, AdamOptions opts = {}) : opts_(opts) {
    for (const auto& p : store) {
      first_.emplace_back(p.value.shape());
      second_.emplace_back(p.value.shape());
    }
  }

  void step(ParameterStore<T>& store) {
    ++steps_;
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(steps_));
    const T b1 = static_cast<T>(opts_.beta1), b2 = static_cast<T>(opts_.beta2);
    for (std::size_t k = 0; k < store.size(); ++k) {
      Parameter<T>& p = store[k];
      Tensor<T>& m = first_[k];
      Tensor<T>& v = second_[k];
      for (std::size_t i = 0; i < p.value.numel(); ++i) {
        const T g = p.grad[i];
        m[i] = b1 * m[i] + (T(1) - b1) * g;
        v[i] = b2 * v[i] + (T(1) - b2) * g * g;
        const T mhat = m[i] / static_cast<T>(c1);
        const T vhat = v[i] / static_cast<T>(c2);
        p.value[i] -= static_cast<T>(opts_.lr) * mhat / (std::sqrt(vhat) + static_cast<T>(opts_.eps));
      }
    }
  }

  std::uint64_t steps() const { return steps_; }
  void set_steps(std::uint64_t s) { steps_ = s; }
  void set_lr(double lr) { opts_.lr = lr; }
  const AdamOptions& options() const { return opts_; }
  std::vector<Tensor<T>>& first_moments() { return first_; }
  std::vector<Tensor<T>>& second_moments() { return second_; }
  const std::vector<Tensor<T>>& first_moments() const { return first_; }
  const std::vector<Tensor<T>>& second_moments() const { return second_; }

 private:
  AdamOptions opts_;
  std::uint64_t steps_ = 0;
  std::vector<Tensor<T>> first_, second_;
};

}  // namespace kgaa
