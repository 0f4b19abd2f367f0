#pragma once

// Reference implementations the tests compare against. Each one is written
// independently of the library code it checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "kgaa/autograd.hpp"
#include "kgaa/data.hpp"
#include "kgaa/knowledge_graph.hpp"
#include "kgaa/nn.hpp"

namespace oracle {

using kgaa::Tape;
using kgaa::Tensor;
using kgaa::Var;

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)}); }

template <class Rng>
Tensor<double> random_tensor(kgaa::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Scalar objective over a list of input tensors.
using Objective = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

// Worst relative error between reverse-mode gradients and central differences
// over every entry of every input.
inline double gradcheck(const std::vector<Tensor<double>>& inputs, const Objective& f, double h = 1e-6) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(tape.variable(t));
  Var<double> loss = f(tape, vars);
  tape.backward(loss);
  std::vector<Tensor<double>> analytic;
  for (const auto& v : vars) analytic.push_back(tape.grad(v));

  auto eval = [&](const std::vector<Tensor<double>>& xs) {
    Tape<double> t;
    std::vector<Var<double>> vs;
    for (const auto& x : xs) vs.push_back(t.variable(x));
    return f(t, vs).value()[0];
  };
  double worst = 0.0;
  std::vector<Tensor<double>> work = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      const double x0 = inputs[k][i];
      work[k][i] = x0 + h;
      const double up = eval(work);
      work[k][i] = x0 - h;
      const double down = eval(work);
      work[k][i] = x0;
      worst = std::max(worst, rel_err(analytic[k][i], (up - down) / (2 * h)));
    }
  }
  return worst;
}

// Contracts a tensor-valued op output with fixed random weights so every
// Jacobian row contributes to the checked scalar.
inline Var<double> contract(Var<double> y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return kgaa::sum(kgaa::mul(y, y.tape().constant(random_tensor(y.shape(), rng))));
}

// Same check over parameters of a store; `loss` builds a fresh tape each call.
// `coords` limits the checked entries per parameter (0 = all).
template <class LossFn>
double gradcheck_store(kgaa::ParameterStore<double>& store, LossFn loss, std::size_t coords,
                       std::uint64_t seed, double h = 1e-6) {
  store.zero_grad();
  {
    Tape<double> tape;
    Var<double> l = loss(tape);
    tape.backward(l);
  }
  auto value = [&] {
    Tape<double> tape;
    return loss(tape).value()[0];
  };
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (auto& p : store) {
    std::vector<std::size_t> idx(p.value.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (coords && idx.size() > coords) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(coords);
    }
    for (auto i : idx) {
      const double x0 = p.value[i];
      p.value[i] = x0 + h;
      const double up = value();
      p.value[i] = x0 - h;
      const double down = value();
      p.value[i] = x0;
      const double g = p.grad.numel() ? p.grad[i] : 0.0;
      worst = std::max(worst, rel_err(g, (up - down) / (2 * h)));
    }
  }
  return worst;
}

// Brute-force frontier expansion with an explicit visited list and a queue
// of (node, depth) pairs.
inline std::set<std::size_t> propagate(const std::vector<std::set<std::size_t>>& adj, const std::set<std::size_t>& initial,
                                       const std::vector<double>& importance, double gamma, int steps) {
  std::set<std::size_t> active = initial;
  std::vector<int> state(adj.size(), 0);  // 0 unseen, 1 accepted, 2 rejected
  for (auto n : initial) state[n] = 1;
  std::vector<std::size_t> frontier(initial.begin(), initial.end());
  for (int depth = 0; depth < steps; ++depth) {
    std::vector<std::size_t> next;
    std::vector<std::size_t> proposed;
    for (auto f : frontier)
      for (auto nb : adj[f])
        if (state[nb] == 0 && std::find(proposed.begin(), proposed.end(), nb) == proposed.end())
          proposed.push_back(nb);
    for (auto c : proposed) {
      if (importance[c] > gamma) {
        state[c] = 1;
        active.insert(c);
        next.push_back(c);
      } else {
        state[c] = 2;
      }
    }
    frontier = next;
  }
  return active;
}

// Full (m+1)x(n+1) dynamic-programming table.
inline std::size_t edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<std::vector<std::size_t>> t(a.size() + 1, std::vector<std::size_t>(b.size() + 1, 0));
  for (std::size_t i = 0; i <= a.size(); ++i) t[i][0] = i;
  for (std::size_t j = 0; j <= b.size(); ++j) t[0][j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i)
    for (std::size_t j = 1; j <= b.size(); ++j)
      t[i][j] = std::min({t[i - 1][j] + 1, t[i][j - 1] + 1, t[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
  return t[a.size()][b.size()];
}

// Per-class frame recall, averaged over the classes present in `truth`.
inline double moc(const std::vector<int>& pred, const std::vector<int>& truth) {
  std::map<int, std::pair<std::size_t, std::size_t>> counts;  // class -> (hits, total)
  for (std::size_t i = 0; i < truth.size(); ++i) {
    auto& c = counts[truth[i]];
    ++c.second;
    if (pred[i] == truth[i]) ++c.first;
  }
  double s = 0.0;
  for (const auto& [_, c] : counts) s += static_cast<double>(c.first) / static_cast<double>(c.second);
  return s / static_cast<double>(counts.size());
}

// Largest remainder by repeated greedy hand-out: each extra frame goes to the
// query with the largest outstanding fractional claim, lowest index on ties.
inline std::vector<int> apportion(const std::vector<double>& durations, const std::vector<int>& actions,
                                  std::size_t horizon, int none = 0) {
  std::vector<double> d;
  std::vector<int> a;
  for (std::size_t i = 0; i < actions.size() && actions[i] != none; ++i) {
    d.push_back(std::max(0.0, durations[i]));
    a.push_back(actions[i]);
  }
  if (a.empty()) return std::vector<int>(horizon, none);
  double total = 0.0;
  for (double x : d) total += x;
  std::vector<double> quota(a.size());
  std::vector<std::size_t> n(a.size());
  std::vector<bool> bumped(a.size(), false);
  std::size_t used = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double share = total > 0.0 ? d[i] / total : 1.0 / static_cast<double>(a.size());
    quota[i] = share * static_cast<double>(horizon);
    n[i] = std::min(horizon, static_cast<std::size_t>(std::floor(quota[i])));
    used += n[i];
  }
  while (used < horizon) {
    std::size_t best = a.size();
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (bumped[i]) continue;
      if (best == a.size() || quota[i] - std::floor(quota[i]) > quota[best] - std::floor(quota[best])) best = i;
    }
    if (best == a.size()) std::fill(bumped.begin(), bumped.end(), false);
    else {
      bumped[best] = true;
      ++n[best];
      ++used;
    }
  }
  std::vector<int> out;
  for (std::size_t i = 0; i < a.size(); ++i) out.insert(out.end(), n[i], a[i]);
  return out;
}

// Every action chain an activity can produce.
inline std::vector<std::vector<std::string>> chains(const kgaa::data::Activity& act) {
  std::vector<std::vector<std::string>> out{{}};
  for (const auto& step : act.steps) {
    std::vector<std::vector<std::string>> next;
    for (const auto& prefix : out) {
      using Kind = kgaa::data::GrammarStep::Kind;
      std::vector<std::vector<std::string>> options = step.branches;
      if (step.kind == Kind::optional) options.push_back({});
      for (const auto& o : options) {
        auto c = prefix;
        c.insert(c.end(), o.begin(), o.end());
        next.push_back(std::move(c));
      }
    }
    out = std::move(next);
  }
  return out;
}

// Membership check: the episode's segments spell a chain of its activity and
// every segment length respects its action's frame range.
inline bool in_grammar(const kgaa::data::ActionGrammar& g, const kgaa::data::EpisodeSample& ep) {
  const auto segs = kgaa::data::segments_from_labels(ep.labels);
  std::vector<std::string> names;
  for (const auto& s : segs) {
    const auto& spec = g.action(s.action);
    if (s.length < spec.min_frames || s.length > spec.max_frames) return false;
    names.push_back(spec.name);
  }
  for (const auto& act : g.activities) {
    if (act.name != ep.activity) continue;
    for (const auto& c : chains(act))
      if (c == names) return true;
  }
  return false;
}

}  // namespace oracle
