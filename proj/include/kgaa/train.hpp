#pragma once

// Composite anticipation loss, the optimisation loop, and evaluation over an
// (alpha, beta) grid with mean-over-classes accuracy, segment edit distance
// and next-action accuracy.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "kgaa/autograd.hpp"
#include "kgaa/checkpoint.hpp"
#include "kgaa/data.hpp"
#include "kgaa/knowledge_graph.hpp"
#include "kgaa/metrics.hpp"
#include "kgaa/model.hpp"
#include "kgaa/optim.hpp"

namespace kgaa {

struct LossWeights {
  double observed = 1.0;
  double action = 1.0;
  double duration = 10.0;

  void validate() const {
    if (observed < 0 || action < 0 || duration < 0) throw ConfigError("loss weights must be non-negative");
    if (observed + action + duration <= 0) throw ConfigError("at least one loss weight must be positive");
  }
};

// Per-query supervision: query i takes the i-th future segment, the rest `none`.
struct QueryTargets {
  std::vector<int> actions;
  std::vector<double> durations;  // segment share of the horizon, 0 for padding
};

inline QueryTargets match_targets(std::span<const int> future_labels, std::size_t queries,
                                  int none_class = kNoneClass) {
  if (future_labels.empty()) throw ContractError("match_targets: empty prediction horizon");
  const auto segs = data::segments_from_labels(future_labels);
  if (segs.size() > queries) {
    throw ContractError("match_targets: " + std::to_string(segs.size()) + " future segments exceed " +
                        std::to_string(queries) + " queries");
  }
  QueryTargets t;
  t.actions.assign(queries, none_class);
  t.durations.assign(queries, 0.0);
  for (std::size_t i = 0; i < segs.size(); ++i) {
    t.actions[i] = segs[i].action;
    t.durations[i] = static_cast<double>(segs[i].length) / static_cast<double>(future_labels.size());
  }
  return t;
}

// w_obs CE(a_obs, observed) + w_act CE(a_pred, targets) + w_dur ||d_pred - durations||^2
template <class T>
Var<T> anticipation_loss(const ForwardOutputs<T>& out, std::span<const int> observed_labels,
                         const QueryTargets& targets, const LossWeights& w) {
  const std::size_t m = out.a_pred.value().dim(0);
  if (targets.actions.size() != m || targets.durations.size() != m) {
    throw ContractError("anticipation_loss: " + std::to_string(targets.actions.size()) +
                        " targets for " + std::to_string(m) + " queries");
  }
  Tape<T>& tape = out.a_pred.tape();
  std::vector<T> dur(targets.durations.begin(), targets.durations.end());
  Var<T> obs = scale(cross_entropy_with_logits(out.a_obs, observed_labels), static_cast<T>(w.observed));
  Var<T> act = scale(cross_entropy_with_logits(out.a_pred, std::span<const int>(targets.actions)),
                     static_cast<T>(w.action));
  Var<T> durv = scale(sse(out.d_pred, tape.constant(Tensor<T>({m}, std::move(dur)))),
                      static_cast<T>(w.duration));
  return add(add(obs, act), durv);
}

template <class T>
ObservedWindow<T> observed_window(const data::EpisodeSample& ep, std::size_t observed_end) {
  if (observed_end == 0 || observed_end > ep.length()) {
    throw RangeError("observed_window: " + std::to_string(observed_end) + " frames of a " +
                     std::to_string(ep.length()) + "-frame episode");
  }
  ObservedWindow<T> w;
  const std::size_t f = ep.frames.cols();
  std::vector<T> values(observed_end * f);
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<T>(ep.frames[i]);
  w.features = Tensor<T>({observed_end, f}, std::move(values));
  w.scenes.assign(ep.scenes.begin(), ep.scenes.begin() + static_cast<std::ptrdiff_t>(observed_end));
  return w;
}

// Training example: observe ceil(alpha N) frames, supervise the next
// ceil(horizon N) frames (clipped to the episode end).
struct TrainingWindow {
  std::size_t observed_end = 0, target_end = 0;
};

inline TrainingWindow training_window(std::size_t n, double alpha, double horizon) {
  TrainingWindow w;
  w.observed_end = std::max<std::size_t>(1, data::ceil_fraction(alpha, n));
  w.target_end = std::min(n, w.observed_end + data::ceil_fraction(horizon, n));
  if (w.observed_end >= n) throw RangeError("training_window: nothing left to predict");
  return w;
}

template <class T>
Var<T> example_loss(Tape<T>& tape, Model<T>& model, const kg::KnowledgeGraph& graph,
                    const data::EpisodeSample& ep, double alpha, double horizon,
                    const LossWeights& weights, const ForwardOptions& opt) {
  const auto tw = training_window(ep.length(), alpha, horizon);
  const auto input = observed_window<T>(ep, tw.observed_end);
  auto out = model.forward(tape, graph, input, opt);
  std::span<const int> labels(ep.labels);
  const auto targets = match_targets(labels.subspan(tw.observed_end, tw.target_end - tw.observed_end),
                                     model.config().queries);
  return anticipation_loss(out, labels.subspan(0, tw.observed_end), targets, weights);
}

struct TrainOptions {
  double lr = 3e-3;
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  std::vector<double> alphas{0.05, 0.1, 0.2, 0.3};
  double horizon = 0.5;
  std::uint64_t seed = 0;
  bool use_kg = true;
  LossWeights weights;
};

// Serial optimiser loop. The batch drawn at step t and its dropout masks
// depend only on (seed, t), so training resumed from a checkpoint follows the
// same trajectory as an uninterrupted run.
template <class T>
class Trainer {
 public:
  Trainer(Model<T>& model, const kg::KnowledgeGraph& graph, TrainOptions opt)
      : model_(model), graph_(graph), opt_(std::move(opt)),
        adam_(model.params(), AdamOptions{opt_.lr, 0.9, 0.999, 1e-8}) {
    opt_.weights.validate();
    if (opt_.alphas.empty()) throw ConfigError("training needs at least one alpha");
    if (opt_.batch_size == 0) throw ConfigError("batch size must be positive");
  }

  double step(std::span<const data::EpisodeSample* const> episodes) {
    if (episodes.empty()) throw ContractError("Trainer::step: no training episodes");
    std::mt19937_64 rng(data::mix_seed(opt_.seed, 0x7a11ULL + adam_.steps()));
    std::uniform_int_distribution<std::size_t> pick(0, episodes.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_alpha(0, opt_.alphas.size() - 1);
    model_.params().zero_grad();
    double total = 0.0;
    for (std::size_t b = 0; b < opt_.batch_size; ++b) {
      const auto& ep = *episodes[pick(rng)];
      const double alpha = opt_.alphas[pick_alpha(rng)];
      Tape<T> tape;
      ForwardOptions fo;
      fo.use_kg = opt_.use_kg;
      fo.training = true;
      fo.rng = &rng;
      Var<T> loss = example_loss(tape, model_, graph_, ep, alpha, opt_.horizon, opt_.weights, fo);
      const double value = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(value)) {
        throw NumericError("non-finite loss at step " + std::to_string(adam_.steps() + 1) +
                           " on episode " + ep.id + " (alpha " + std::to_string(alpha) + ")");
      }
      total += value;
      tape.backward(scale(loss, T(1) / T(opt_.batch_size)));
    }
    adam_.step(model_.params());
    return total / static_cast<double>(opt_.batch_size);
  }

  std::uint64_t steps_done() const { return adam_.steps(); }
  const TrainOptions& options() const { return opt_; }

  void save_state(Checkpoint& ck) const {
    store_to_checkpoint(model_.params(), ck);
    const auto& store = model_.params();
    for (std::size_t k = 0; k < store.size(); ++k) {
      ck.put("optim.first/" + store[k].path, adam_.first_moments()[k]);
      ck.put("optim.second/" + store[k].path, adam_.second_moments()[k]);
    }
    ck.put("optim.step", Shape{1}, {static_cast<float>(adam_.steps())});
  }

  void load_state(const Checkpoint& ck) {
    load_store(model_.params(), ck);
    const auto& store = model_.params();
    for (std::size_t k = 0; k < store.size(); ++k) {
      adam_.first_moments()[k] = ck.tensor<T>("optim.first/" + store[k].path);
      adam_.second_moments()[k] = ck.tensor<T>("optim.second/" + store[k].path);
    }
    adam_.set_steps(static_cast<std::uint64_t>(ck.at("optim.step").values.at(0)));
  }

 private:
  Model<T>& model_;
  const kg::KnowledgeGraph& graph_;
  TrainOptions opt_;
  Adam<T> adam_;
};

// ---------------------------------------------------------------------------
// Evaluation

struct EvalGrid {
  std::vector<double> alphas{0.05, 0.1};
  std::vector<double> betas{0.1, 0.2, 0.3, 0.5};
};

// A forecast for one observed prefix: `future` covers the prediction horizon
// frame by frame; `last_observed` is the predictor's label for the final
// observed frame.
struct Forecast {
  std::vector<int> future;
  int last_observed = kNoneClass;
};

using Predictor =
    std::function<Forecast(const data::EpisodeSample&, std::size_t observed_end, std::size_t horizon)>;

struct PredictionRecord {
  std::string episode;
  double alpha = 0, beta = 0;
  std::vector<int> predicted, truth;
};

struct NextActionRecord {
  std::string episode;
  double alpha = 0;
  std::vector<int> predicted, truth;  // segment sequences after the ongoing action
};

struct CellResult {
  double moc = 0;              // percent
  double edit = 0;             // mean raw segment edit distance
  double edit_normalized = 0;  // mean of edit / max(|pred|, |truth|)
  std::size_t episodes = 0, skipped = 0;
};

struct EvalReport {
  std::string split = "test";
  std::map<std::pair<double, double>, CellResult> cells;
  std::map<double, double> next_action;  // percent
  std::map<double, std::size_t> next_action_count;

  static std::string pct(double f) {
    std::ostringstream os;
    os << std::llround(f * 100.0);
    return os.str();
  }

  std::string to_table() const {
    std::ostringstream os;
    auto cell = [&](const std::string& s, int w) {
      os << std::string(static_cast<std::size_t>(std::max(0, w - static_cast<int>(s.size()))), ' ') << s;
    };
    auto num = [](double v, int prec) {
      std::ostringstream s;
      s << std::fixed << std::setprecision(prec) << v;
      return s.str();
    };
    os << "split: " << split << "\n";
    cell("alpha-beta", 16);
    for (const auto& [k, _] : cells) cell(pct(k.first) + "-" + pct(k.second), 9);
    os << "\n";
    cell("MoC (%)", 16);
    for (const auto& [_, c] : cells) cell(num(c.moc, 2), 9);
    os << "\n";
    cell("edit", 16);
    for (const auto& [_, c] : cells) cell(num(c.edit, 2), 9);
    os << "\n";
    cell("edit/len", 16);
    for (const auto& [_, c] : cells) cell(num(c.edit_normalized, 3), 9);
    os << "\n";
    cell("episodes", 16);
    for (const auto& [_, c] : cells) cell(std::to_string(c.episodes), 9);
    os << "\n";
    cell("skipped", 16);
    for (const auto& [_, c] : cells) cell(std::to_string(c.skipped), 9);
    os << "\n";
    cell("alpha", 16);
    for (const auto& [a, _] : next_action) cell(pct(a), 9);
    os << "\n";
    cell("next action (%)", 16);
    for (const auto& [_, v] : next_action) cell(num(v, 2), 9);
    os << "\n";
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["split"] = split;
    j["cells"] = nlohmann::json::array();
    for (const auto& [k, c] : cells) {
      j["cells"].push_back({{"alpha", k.first},
                            {"beta", k.second},
                            {"moc", c.moc},
                            {"edit", c.edit},
                            {"edit_normalized", c.edit_normalized},
                            {"episodes", c.episodes},
                            {"skipped", c.skipped}});
    }
    j["next_action"] = nlohmann::json::array();
    for (const auto& [a, v] : next_action) {
      j["next_action"].push_back({{"alpha", a}, {"accuracy", v}, {"episodes", next_action_count.at(a)}});
    }
    return j;
  }

  // Mean MoC over the cells with the given alpha.
  double mean_moc(double alpha) const {
    double s = 0;
    std::size_t n = 0;
    for (const auto& [k, c] : cells)
      if (std::abs(k.first - alpha) < 1e-12) {
        s += c.moc;
        ++n;
      }
    return n ? s / static_cast<double>(n) : 0.0;
  }
};

// Segments after the ongoing action: drops the leading run equal to `ongoing`.
inline std::vector<int> upcoming_actions(std::span<const int> future, int ongoing) {
  auto seq = data::collapse(future);
  if (!seq.empty() && seq.front() == ongoing) seq.erase(seq.begin());
  return seq;
}

inline EvalReport score_predictions(const std::vector<PredictionRecord>& records,
                                    const std::vector<NextActionRecord>& next,
                                    std::size_t class_count,
                                    const std::map<std::pair<double, double>, std::size_t>& skipped = {}) {
  EvalReport report;
  std::map<std::pair<double, double>, std::pair<std::vector<int>, std::vector<int>>> frames;
  std::map<std::pair<double, double>, std::pair<double, double>> edits;
  for (const auto& r : records) {
    const auto key = std::make_pair(r.alpha, r.beta);
    auto& f = frames[key];
    f.first.insert(f.first.end(), r.predicted.begin(), r.predicted.end());
    f.second.insert(f.second.end(), r.truth.begin(), r.truth.end());
    const auto p = data::collapse(r.predicted), t = data::collapse(r.truth);
    const double e = static_cast<double>(metrics::edit_distance(p, t));
    edits[key].first += e;
    edits[key].second += e / static_cast<double>(std::max(p.size(), t.size()));
    ++report.cells[key].episodes;
  }
  for (auto& [key, c] : report.cells) {
    const auto& f = frames[key];
    c.moc = 100.0 * metrics::moc_accuracy(f.first, f.second, class_count);
    c.edit = edits[key].first / static_cast<double>(c.episodes);
    c.edit_normalized = edits[key].second / static_cast<double>(c.episodes);
  }
  for (const auto& [key, n] : skipped) report.cells[key].skipped = n;
  std::map<double, std::vector<metrics::SequencePair>> by_alpha;
  for (const auto& r : next) by_alpha[r.alpha].push_back({r.predicted, r.truth});
  for (const auto& [a, pairs] : by_alpha) {
    report.next_action[a] = 100.0 * metrics::next_action_accuracy(pairs);
    report.next_action_count[a] = pairs.size();
  }
  return report;
}

struct Evaluation {
  EvalReport report;
  std::vector<PredictionRecord> predictions;
  std::vector<NextActionRecord> next_actions;
};

// Scores `predict` on every episode for every (alpha, beta) cell. One
// forecast per (episode, alpha) spans ceil(horizon N) frames; each beta scores
// its first ceil(beta N) frames. Episodes too short for a cell are skipped and
// counted. Work is split across `threads` with results reduced in episode order.
inline Evaluation evaluate(const Predictor& predict, std::span<const data::EpisodeSample* const> episodes,
                           const EvalGrid& grid, double horizon, std::size_t class_count,
                           std::size_t threads = 1) {
  struct Partial {
    std::vector<PredictionRecord> records;
    std::vector<NextActionRecord> next;
    std::map<std::pair<double, double>, std::size_t> skipped;
  };
  std::vector<Partial> partial(episodes.size());
  auto work = [&](std::size_t i) {
    const auto& ep = *episodes[i];
    Partial& out = partial[i];
    const std::size_t n = ep.length();
    for (double alpha : grid.alphas) {
      const std::size_t obs = data::ceil_fraction(alpha, n);
      if (obs == 0 || obs >= n) {
        for (double beta : grid.betas) ++out.skipped[{alpha, beta}];
        continue;
      }
      const std::size_t span = std::min(n - obs, data::ceil_fraction(horizon, n));
      const Forecast fc = predict(ep, obs, span);
      for (double beta : grid.betas) {
        data::EpisodeWindow w;
        try {
          w = data::window(n, alpha, beta);
        } catch (const RangeError&) {
          ++out.skipped[{alpha, beta}];
          continue;
        }
        PredictionRecord rec{ep.id, alpha, beta, {}, {}};
        rec.truth.assign(ep.labels.begin() + static_cast<std::ptrdiff_t>(w.target_begin),
                         ep.labels.begin() + static_cast<std::ptrdiff_t>(w.target_end));
        const std::size_t len = w.target_length();
        rec.predicted.assign(fc.future.begin(),
                             fc.future.begin() + static_cast<std::ptrdiff_t>(std::min(len, fc.future.size())));
        while (rec.predicted.size() < len)
          rec.predicted.push_back(rec.predicted.empty() ? fc.last_observed : rec.predicted.back());
        out.records.push_back(std::move(rec));
      }
      std::span<const int> labels(ep.labels);
      auto truth = upcoming_actions(labels.subspan(obs), labels[obs - 1]);
      if (!truth.empty()) {
        out.next.push_back({ep.id, alpha, upcoming_actions(fc.future, fc.last_observed), truth});
      }
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, episodes.size()));
  if (threads == 1) {
    for (std::size_t i = 0; i < episodes.size(); ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < episodes.size(); i += threads) work(i);
      });
    for (auto& th : pool) th.join();
  }
  Evaluation ev;
  std::map<std::pair<double, double>, std::size_t> skipped;
  for (auto& p : partial) {
    for (auto& r : p.records) ev.predictions.push_back(std::move(r));
    for (auto& r : p.next) ev.next_actions.push_back(std::move(r));
    for (const auto& [k, v] : p.skipped) skipped[k] += v;
  }
  for (double a : grid.alphas)
    for (double b : grid.betas) skipped.try_emplace({a, b}, 0);
  ev.report = score_predictions(ev.predictions, ev.next_actions, class_count, skipped);
  return ev;
}

// Decoded forecast of a model for the first `observed_end` frames.
template <class T>
Forecast model_forecast(Model<T>& model, const kg::KnowledgeGraph& graph, const data::EpisodeSample& ep,
                        std::size_t observed_end, std::size_t horizon, bool use_kg,
                        PredictionBundle<T>* bundle_out = nullptr, AttentionTrace* trace = nullptr) {
  const auto bundle = model.predict(graph, observed_window<T>(ep, observed_end), use_kg, trace);
  std::vector<double> d(bundle.d_pred.data().begin(), bundle.d_pred.data().end());
  Forecast fc;
  fc.future = data::decode_durations(d, data::argmax_rows(bundle.a_pred), horizon);
  fc.last_observed = data::argmax_rows(bundle.a_obs).back();
  if (bundle_out) *bundle_out = bundle;
  return fc;
}

template <class T>
Predictor model_predictor(Model<T>& model, const kg::KnowledgeGraph& graph, bool use_kg) {
  return [&model, &graph, use_kg](const data::EpisodeSample& ep, std::size_t obs, std::size_t horizon) {
    return model_forecast(model, graph, ep, obs, horizon, use_kg);
  };
}

}  // namespace kgaa
