#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "kgaa/errors.hpp"

namespace kgaa::metrics {

// Mean over classes present in `truth` of per-class frame recall, in [0, 1].
inline double moc_accuracy(std::span<const int> pred, std::span<const int> truth,
                           std::size_t class_count) {
  if (pred.size() != truth.size()) {
    throw ContractError("moc_accuracy: " + std::to_string(pred.size()) + " predicted vs " +
                        std::to_string(truth.size()) + " true frames");
  }
  if (truth.empty()) throw ContractError("moc_accuracy: empty input");
  std::vector<std::size_t> total(class_count, 0), hit(class_count, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || static_cast<std::size_t>(truth[i]) >= class_count) {
      throw ContractError("moc_accuracy: class id " + std::to_string(truth[i]) + " out of range");
    }
    ++total[static_cast<std::size_t>(truth[i])];
    if (pred[i] == truth[i]) ++hit[static_cast<std::size_t>(truth[i])];
  }
  double acc = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < class_count; ++c) {
    if (total[c] == 0) continue;
    acc += static_cast<double>(hit[c]) / static_cast<double>(total[c]);
    ++present;
  }
  return acc / static_cast<double>(present);
}

// Levenshtein distance with unit costs, O(min) memory.
inline std::size_t edit_distance(std::span<const int> a, std::span<const int> b) {
  if (a.size() < b.size()) std::swap(a, b);
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// 1 iff the first predicted segment matches the first true segment.
inline int next_action_hit(std::span<const int> pred_seq, std::span<const int> true_seq) {
  if (true_seq.empty()) throw ContractError("next_action_hit: empty ground-truth sequence");
  if (pred_seq.empty()) return 0;
  return pred_seq.front() == true_seq.front() ? 1 : 0;
}

struct SequencePair {
  std::vector<int> predicted, truth;
};

// Mean of per-sample next-action indicators, in [0, 1].
inline double next_action_accuracy(std::span<const SequencePair> samples) {
  if (samples.empty()) throw ContractError("next_action_accuracy: no samples");
  std::size_t hits = 0;
  for (const auto& s : samples) hits += static_cast<std::size_t>(next_action_hit(s.predicted, s.truth));
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

}  // namespace kgaa::metrics
