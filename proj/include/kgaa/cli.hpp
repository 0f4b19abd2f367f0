#pragma once

// Command-line entry points: gen-data, train, eval, predict, inspect-graph.
// Needs CLI11 (vendored) and OpenSSL's libcrypto for manifest hashes.

#include <openssl/evp.h>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "kgaa/checkpoint.hpp"
#include "kgaa/data.hpp"
#include "kgaa/knowledge_graph.hpp"
#include "kgaa/model.hpp"
#include "kgaa/train.hpp"

#ifndef KGAA_VERSION
#define KGAA_VERSION "0.1.0"
#endif

namespace kgaa::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigFailure = 2,
  kDataFailure = 3,
  kNumericFailure = 4,
};

inline std::string code_version() { return KGAA_VERSION; }

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

inline std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + p.string());
  os << text;
}

// ---------------------------------------------------------------------------
// Run configuration

struct RunConfig {
  struct Paths {
    std::string graph = "data/kitchen.graph";
    std::string grammar = "data/kitchen_grammar.json";
    std::string dataset = "runs/dataset";
    std::string run_dir = "runs/default";
    std::string checkpoint;  // empty: <run_dir>/final.ckpt
  } paths;
  struct Data {
    std::size_t episodes = 500;
    std::size_t train = 400;
    data::GenerateOptions generate;
  } data;
  ModelConfig model;
  LossWeights loss;
  struct Train {
    double lr = 3e-3;
    std::size_t steps = 2000;
    std::size_t batch_size = 8;
    std::vector<double> alphas{0.05, 0.1, 0.2, 0.3};
    std::size_t log_every = 50;
    std::size_t checkpoint_every = 250;
    std::size_t monitor_episodes = 32;
  } train;
  struct Eval {
    EvalGrid grid;
    std::string split = "test";
    std::size_t threads = 1;
  } eval;
  double horizon = 0.5;  // supervised / decoded share of the episode after the observation
  std::uint64_t seed = 0;
  bool use_kg = true;
  bool deterministic = false;

  void validate() const {
    model.validate();
    loss.validate();
    const auto& k = model.kg;
    if (k.gamma < 0.0 || k.gamma > 1.0) throw ConfigError("config: kg.gamma must lie in [0, 1]");
    if (k.steps < 0) throw ConfigError("config: kg.steps must be non-negative");
    if (k.n_max == 0) throw ConfigError("config: kg.n_max must be positive");
    if (data.episodes == 0) throw ConfigError("config: data.episodes must be positive");
    if (data.train > data.episodes) throw ConfigError("config: data.train exceeds data.episodes");
    if (!(train.lr > 0)) throw ConfigError("config: train.lr must be positive");
    if (train.batch_size == 0) throw ConfigError("config: train.batch_size must be positive");
    if (train.log_every == 0 || train.checkpoint_every == 0)
      throw ConfigError("config: train.log_every and train.checkpoint_every must be positive");
    auto fractions = [](const std::vector<double>& v, const std::string& name, bool allow_one) {
      if (v.empty()) throw ConfigError("config: " + name + " is empty");
      for (double x : v)
        if (!(x > 0.0) || x > 1.0 || (!allow_one && x == 1.0))
          throw ConfigError("config: " + name + " value " + std::to_string(x) + " is not a fraction in (0, 1)");
    };
    fractions(train.alphas, "train.alphas", false);
    fractions(eval.grid.alphas, "eval.alphas", false);
    fractions(eval.grid.betas, "eval.betas", true);
    if (!(horizon > 0.0) || horizon > 1.0) throw ConfigError("config: horizon must lie in (0, 1]");
    if (eval.split != "train" && eval.split != "test") throw ConfigError("config: eval.split must be train or test");
  }

  json to_json() const {
    const auto& m = model;
    return {
        {"paths",
         {{"graph", paths.graph},
          {"grammar", paths.grammar},
          {"dataset", paths.dataset},
          {"run_dir", paths.run_dir},
          {"checkpoint", paths.checkpoint}}},
        {"data",
         {{"episodes", data.episodes},
          {"train", data.train},
          {"feature_dim", data.generate.feature_dim},
          {"noise", data.generate.noise}}},
        {"model",
         {{"d_model", m.d_model},
          {"heads", m.heads},
          {"encoder_layers", m.encoder_layers},
          {"decoder_layers", m.decoder_layers},
          {"queries", m.queries},
          {"max_positions", m.max_positions},
          {"ffn_multiplier", m.ffn_multiplier},
          {"rect_hidden", m.rect_hidden},
          {"rect_forget_bias", m.rect_forget_bias},
          {"dropout", m.dropout},
          {"per_head_rectification", m.per_head_rectification},
          {"decoder_self_attention", m.decoder_self_attention},
          {"positional_encoding", m.positional_encoding}}},
        {"kg",
         {{"embed_dim", m.kg.embed_dim},
          {"context_dim", m.kg.context_dim},
          {"hidden", m.kg.hidden},
          {"n_max", m.kg.n_max},
          {"gamma", m.kg.gamma},
          {"steps", m.kg.steps},
          {"per_frame", m.kg.per_frame},
          {"importance_bias", m.kg.importance_bias}}},
        {"loss", {{"observed", loss.observed}, {"action", loss.action}, {"duration", loss.duration}}},
        {"train",
         {{"lr", train.lr},
          {"steps", train.steps},
          {"batch_size", train.batch_size},
          {"alphas", train.alphas},
          {"log_every", train.log_every},
          {"checkpoint_every", train.checkpoint_every},
          {"monitor_episodes", train.monitor_episodes}}},
        {"eval",
         {{"alphas", eval.grid.alphas},
          {"betas", eval.grid.betas},
          {"split", eval.split},
          {"threads", eval.threads}}},
        {"horizon", horizon},
        {"seed", seed},
        {"use_kg", use_kg},
        {"deterministic", deterministic},
    };
  }

  static RunConfig from_json(const json& j);
  static RunConfig load(const fs::path& file) {
    json j;
    try {
      j = json::parse(read_file(file));
    } catch (const json::parse_error& e) {
      throw ConfigError(file.string() + ": " + e.what());
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
    return from_json(j);
  }
};

namespace detail {

// Reads one JSON object, rejecting unknown keys and mistyped values.
class Section {
 public:
  Section(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError("config: " + label("") + " must be an object");
  }

  void read(const std::string& key, std::size_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned()) fail(key, "a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void read(const std::string& key, int& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer()) fail(key, "an integer");
      out = v->get<int>();
    }
  }
  void read(const std::string& key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<double>();
    }
  }
  void read(const std::string& key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) fail(key, "true or false");
      out = v->get<bool>();
    }
  }
  void read(const std::string& key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }
  void read(const std::string& key, std::vector<double>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) fail(key, "an array of numbers");
      out.clear();
      for (const auto& x : *v) {
        if (!x.is_number()) fail(key, "an array of numbers");
        out.push_back(x.get<double>());
      }
    }
  }

  std::optional<Section> section(const std::string& key) {
    if (const json* v = take(key)) return Section(*v, label(key) + ".");
    return std::nullopt;
  }

  void finish() const {
    for (const auto& [k, _] : j_.items())
      if (!seen_.count(k)) throw ConfigError("config: unknown key '" + label(k) + "'");
  }

 private:
  const json* take(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string label(const std::string& key) const {
    const std::string full = prefix_ + key;
    if (!full.empty() && full.back() == '.') return full.substr(0, full.size() - 1);
    return full.empty() ? "<root>" : full;
  }
  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw ConfigError("config: " + label(key) + " must be " + what);
  }

  const json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  detail::Section root(j, "");
  if (auto s = root.section("paths")) {
    s->read("graph", c.paths.graph);
    s->read("grammar", c.paths.grammar);
    s->read("dataset", c.paths.dataset);
    s->read("run_dir", c.paths.run_dir);
    s->read("checkpoint", c.paths.checkpoint);
    s->finish();
  }
  if (auto s = root.section("data")) {
    s->read("episodes", c.data.episodes);
    s->read("train", c.data.train);
    s->read("feature_dim", c.data.generate.feature_dim);
    s->read("noise", c.data.generate.noise);
    s->finish();
  }
  if (auto s = root.section("model")) {
    auto& m = c.model;
    s->read("d_model", m.d_model);
    s->read("heads", m.heads);
    s->read("encoder_layers", m.encoder_layers);
    s->read("decoder_layers", m.decoder_layers);
    s->read("queries", m.queries);
    s->read("max_positions", m.max_positions);
    s->read("ffn_multiplier", m.ffn_multiplier);
    s->read("rect_hidden", m.rect_hidden);
    s->read("rect_forget_bias", m.rect_forget_bias);
    s->read("dropout", m.dropout);
    s->read("per_head_rectification", m.per_head_rectification);
    s->read("decoder_self_attention", m.decoder_self_attention);
    s->read("positional_encoding", m.positional_encoding);
    s->finish();
  }
  if (auto s = root.section("kg")) {
    auto& k = c.model.kg;
    s->read("embed_dim", k.embed_dim);
    s->read("context_dim", k.context_dim);
    s->read("hidden", k.hidden);
    s->read("n_max", k.n_max);
    s->read("gamma", k.gamma);
    s->read("steps", k.steps);
    s->read("per_frame", k.per_frame);
    s->read("importance_bias", k.importance_bias);
    s->finish();
  }
  if (auto s = root.section("loss")) {
    s->read("observed", c.loss.observed);
    s->read("action", c.loss.action);
    s->read("duration", c.loss.duration);
    s->finish();
  }
  if (auto s = root.section("train")) {
    s->read("lr", c.train.lr);
    s->read("steps", c.train.steps);
    s->read("batch_size", c.train.batch_size);
    s->read("alphas", c.train.alphas);
    s->read("log_every", c.train.log_every);
    s->read("checkpoint_every", c.train.checkpoint_every);
    s->read("monitor_episodes", c.train.monitor_episodes);
    s->finish();
  }
  if (auto s = root.section("eval")) {
    s->read("alphas", c.eval.grid.alphas);
    s->read("betas", c.eval.grid.betas);
    s->read("split", c.eval.split);
    s->read("threads", c.eval.threads);
    s->finish();
  }
  root.read("horizon", c.horizon);
  std::size_t seed = c.seed;
  root.read("seed", seed);
  c.seed = seed;
  root.read("use_kg", c.use_kg);
  root.read("deterministic", c.deterministic);
  root.finish();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Shared plumbing

struct Context {
  RunConfig config;
  std::ostream& out;
  std::ostream& err;
};

inline json run_manifest(const RunConfig& cfg, const std::string& command) {
  json m;
  m["command"] = command;
  m["code_version"] = code_version();
  m["config"] = cfg.to_json();
  return m;
}

inline std::vector<const data::EpisodeSample*> split_of(const data::Dataset& ds, const std::string& name) {
  return ds.split(name == "train" ? ds.train_ids : ds.test_ids);
}

// Model sized to the dataset: class count and feature width come from it.
inline Model<float> build_model(RunConfig& cfg, const data::Dataset& ds, const kg::KnowledgeGraph& graph) {
  cfg.model.classes = ds.class_names.size();
  cfg.model.feature_dim = ds.feature_dim();
  std::size_t longest = 0;
  for (const auto& ep : ds.episodes) longest = std::max(longest, ep.length());
  if (longest > cfg.model.max_positions) {
    throw ConfigError("config: model.max_positions " + std::to_string(cfg.model.max_positions) +
                      " is below the longest episode (" + std::to_string(longest) + " frames)");
  }
  return Model<float>(cfg.model, graph.size(), cfg.seed);
}

inline fs::path checkpoint_path(const RunConfig& cfg) {
  return cfg.paths.checkpoint.empty() ? fs::path(cfg.paths.run_dir) / "final.ckpt" : fs::path(cfg.paths.checkpoint);
}

inline std::string segments_text(std::span<const int> labels, const std::vector<std::string>& names) {
  std::ostringstream os;
  bool first = true;
  for (const auto& s : data::segments_from_labels(labels)) {
    if (!first) os << " | ";
    first = false;
    os << names.at(static_cast<std::size_t>(s.action)) << " x" << s.length;
  }
  return first ? "(none)" : os.str();
}

inline json segments_json(std::span<const int> labels, const std::vector<std::string>& names) {
  json a = json::array();
  for (const auto& s : data::segments_from_labels(labels))
    a.push_back({{"action", names.at(static_cast<std::size_t>(s.action))}, {"id", s.action}, {"frames", s.length}});
  return a;
}

inline json tensor_json(const Tensor<double>& t) {
  json rows = json::array();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    json row = json::array();
    for (std::size_t c = 0; c < t.cols(); ++c) row.push_back(t(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Commands

inline int cmd_gen_data(Context& ctx) {
  const auto& cfg = ctx.config;
  const auto grammar = data::ActionGrammar::load(cfg.paths.grammar);
  const auto grammar_bytes = read_file(cfg.paths.grammar);
  const auto graph = kg::KnowledgeGraph::load(cfg.paths.graph);
  grammar.validate_against(graph);
  data::Dataset ds;
  ds.episodes = data::generate(grammar, cfg.data.episodes, cfg.seed, cfg.data.generate);
  for (std::size_t i = 0; i < ds.episodes.size(); ++i)
    (i < cfg.data.train ? ds.train_ids : ds.test_ids).push_back(ds.episodes[i].id);
  ds.class_names = grammar.class_names();
  ds.manifest = {{"format", "kgaa-dataset"},
                 {"version", 1},
                 {"code_version", code_version()},
                 {"seed", cfg.seed},
                 {"episodes", ds.episodes.size()},
                 {"train", ds.train_ids.size()},
                 {"test", ds.test_ids.size()},
                 {"feature_dim", cfg.data.generate.feature_dim},
                 {"noise", cfg.data.generate.noise},
                 {"grammar_file", fs::path(cfg.paths.grammar).filename().string()},
                 {"grammar_sha256", sha256_hex(grammar_bytes)},
                 {"graph_sha256", sha256_hex(read_file(cfg.paths.graph))}};
  data::write_dataset(cfg.paths.dataset, ds);
  ctx.out << "wrote " << ds.episodes.size() << " episodes (" << ds.train_ids.size() << " train, "
          << ds.test_ids.size() << " test) to " << cfg.paths.dataset << "\n";
  return kOk;
}

// Mean eval-mode loss over fixed windows of the first training episodes.
inline double monitor_loss(Model<float>& model, const kg::KnowledgeGraph& graph,
                           std::span<const data::EpisodeSample* const> episodes, const RunConfig& cfg) {
  double total = 0.0;
  std::size_t n = 0;
  const std::size_t count = std::min(cfg.train.monitor_episodes, episodes.size());
  for (std::size_t i = 0; i < count; ++i) {
    for (double alpha : cfg.train.alphas) {
      Tape<float> tape;
      ForwardOptions fo;
      fo.use_kg = cfg.use_kg;
      total += static_cast<double>(
          example_loss(tape, model, graph, *episodes[i], alpha, cfg.horizon, cfg.loss, fo).value()[0]);
      ++n;
    }
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

inline int cmd_train(Context& ctx, const std::string& resume) {
  auto cfg = ctx.config;
  const auto ds = data::read_dataset(cfg.paths.dataset);
  const auto graph = kg::KnowledgeGraph::load(cfg.paths.graph);
  auto model = build_model(cfg, ds, graph);
  const auto train = ds.split(ds.train_ids);
  if (train.empty()) throw DataError("dataset " + cfg.paths.dataset + " has no training episodes");
  for (const auto* ep : train) {
    const auto segs = data::segments_from_labels(ep->labels).size();
    if (segs > cfg.model.queries) {
      throw ConfigError("config: model.queries = " + std::to_string(cfg.model.queries) + " but episode " +
                        ep->id + " has " + std::to_string(segs) + " segments");
    }
  }

  TrainOptions to;
  to.lr = cfg.train.lr;
  to.steps = cfg.train.steps;
  to.batch_size = cfg.train.batch_size;
  to.alphas = cfg.train.alphas;
  to.horizon = cfg.horizon;
  to.seed = cfg.seed;
  to.use_kg = cfg.use_kg;
  to.weights = cfg.loss;
  Trainer<float> trainer(model, graph, to);

  const fs::path dir = cfg.paths.run_dir;
  fs::create_directories(dir);
  double best = std::numeric_limits<double>::infinity();
  if (!resume.empty()) {
    const auto ck = Checkpoint::load(resume);
    trainer.load_state(ck);
    if (fs::exists(dir / "best.ckpt")) {
      const auto b = Checkpoint::load(dir / "best.ckpt");
      if (b.contains("train.monitor")) best = b.at("train.monitor").values.at(0);
    }
    ctx.out << "resumed from " << resume << " at step " << trainer.steps_done() << "\n";
  }
  write_file(dir / "manifest.json", run_manifest(cfg, "train").dump(2) + "\n");
  write_file(dir / "config.json", cfg.to_json().dump(2) + "\n");

  const auto mode = resume.empty() ? std::ios::trunc : std::ios::app;
  std::ofstream log(dir / "train.log", std::ios::binary | mode);
  std::ofstream curve(dir / "curve.tsv", std::ios::binary | mode);
  if (!log || !curve) throw DataError("cannot write logs under " + dir.string());
  if (resume.empty()) curve << "step\tloss\tmonitor\n";

  auto save = [&](const fs::path& file, double monitor) {
    Checkpoint ck;
    trainer.save_state(ck);
    ck.put("train.monitor", Shape{1}, {static_cast<float>(monitor)});
    ck.save(file);
  };

  bool saved_final = false;
  const auto start = std::chrono::steady_clock::now();
  double window_loss = 0.0;
  std::size_t window_steps = 0;
  while (trainer.steps_done() < cfg.train.steps) {
    window_loss += trainer.step(train);
    ++window_steps;
    const std::uint64_t step = trainer.steps_done();
    const bool last = step == cfg.train.steps;
    const bool log_now = step % cfg.train.log_every == 0 || last;
    const bool ckpt_now = step % cfg.train.checkpoint_every == 0 || last;
    std::optional<double> monitor;
    if (ckpt_now) monitor = monitor_loss(model, graph, train, cfg);
    if (log_now || ckpt_now) {
      std::ostringstream line;
      line << "step " << step << " loss " << std::fixed << std::setprecision(5)
           << window_loss / static_cast<double>(std::max<std::size_t>(1, window_steps));
      if (monitor) line << " monitor " << *monitor;
      if (!cfg.deterministic) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        line << " elapsed " << std::setprecision(1) << secs << "s";
      }
      log << line.str() << "\n";
      ctx.out << line.str() << "\n";
      curve << step << "\t" << std::setprecision(6)
            << window_loss / static_cast<double>(std::max<std::size_t>(1, window_steps)) << "\t";
      if (monitor) curve << *monitor;
      curve << "\n";
      window_loss = 0.0;
      window_steps = 0;
    }
    if (monitor && *monitor < best) {
      best = *monitor;
      save(dir / "best.ckpt", *monitor);
    }
    if (last) {
      save(dir / "final.ckpt", monitor.value_or(best));
      saved_final = true;
    }
  }
  if (!saved_final) save(dir / "final.ckpt", monitor_loss(model, graph, train, cfg));
  ctx.out << "checkpoints in " << dir.string() << "\n";
  return kOk;
}

inline int cmd_eval(Context& ctx, const std::string& out_dir) {
  auto cfg = ctx.config;
  const auto ds = data::read_dataset(cfg.paths.dataset);
  const auto graph = kg::KnowledgeGraph::load(cfg.paths.graph);
  auto model = build_model(cfg, ds, graph);
  load_store(model.params(), Checkpoint::load(checkpoint_path(cfg)));
  const auto episodes = split_of(ds, cfg.eval.split);
  if (episodes.empty()) throw DataError("split '" + cfg.eval.split + "' is empty");
  const std::size_t threads = cfg.deterministic ? 1 : cfg.eval.threads;
  auto ev = evaluate(model_predictor(model, graph, cfg.use_kg), episodes, cfg.eval.grid, cfg.horizon,
                     cfg.model.classes, threads);
  ev.report.split = cfg.eval.split;

  const fs::path dir = out_dir.empty() ? fs::path(cfg.paths.run_dir) / "eval" : fs::path(out_dir);
  fs::create_directories(dir);
  auto manifest = run_manifest(cfg, "eval");
  manifest["checkpoint"] = checkpoint_path(cfg).string();
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
  write_file(dir / "report.txt", ev.report.to_table());
  write_file(dir / "report.json", ev.report.to_json().dump(2) + "\n");
  std::ostringstream preds, next;
  for (const auto& r : ev.predictions)
    preds << json{{"episode", r.episode}, {"alpha", r.alpha}, {"beta", r.beta},
                  {"predicted", r.predicted}, {"truth", r.truth}}.dump()
          << "\n";
  for (const auto& r : ev.next_actions)
    next << json{{"episode", r.episode}, {"alpha", r.alpha}, {"predicted", r.predicted}, {"truth", r.truth}}.dump()
         << "\n";
  write_file(dir / "predictions.jsonl", preds.str());
  write_file(dir / "next_actions.jsonl", next.str());
  ctx.out << ev.report.to_table();
  return kOk;
}

inline int cmd_predict(Context& ctx, const std::string& episode_id, const std::string& out_file) {
  auto cfg = ctx.config;
  const auto ds = data::read_dataset(cfg.paths.dataset);
  const auto graph = kg::KnowledgeGraph::load(cfg.paths.graph);
  auto model = build_model(cfg, ds, graph);
  load_store(model.params(), Checkpoint::load(checkpoint_path(cfg)));
  const auto& ep = ds.find(episode_id);
  const double alpha = cfg.eval.grid.alphas.front(), beta = cfg.eval.grid.betas.front();
  const auto w = data::window(ep.length(), alpha, beta);
  const std::size_t span = std::min(ep.length() - w.observed_end, data::ceil_fraction(cfg.horizon, ep.length()));

  AttentionTrace trace;
  PredictionBundle<float> bundle;
  const auto fc = model_forecast(model, graph, ep, w.observed_end, span, cfg.use_kg, &bundle, &trace);
  std::vector<int> predicted(fc.future.begin(),
                             fc.future.begin() + static_cast<std::ptrdiff_t>(std::min(span, w.target_length())));
  while (predicted.size() < w.target_length())
    predicted.push_back(predicted.empty() ? fc.last_observed : predicted.back());
  const auto& names = ds.class_names;
  std::span<const int> labels(ep.labels);
  const auto observed = labels.subspan(0, w.observed_end);
  const auto truth = labels.subspan(w.target_begin, w.target_length());

  std::ostringstream os;
  os << "episode " << ep.id << "  activity " << ep.activity << "  frames " << ep.length() << "\n";
  os << "alpha " << alpha << "  beta " << beta << "  kg " << (cfg.use_kg ? "on" : "off") << "\n";
  os << "observed   [0, " << w.observed_end << "): " << segments_text(observed, names) << "\n";
  os << "predicted  [" << w.target_begin << ", " << w.target_end << "): " << segments_text(predicted, names) << "\n";
  os << "truth      [" << w.target_begin << ", " << w.target_end << "): " << segments_text(truth, names) << "\n";
  os << "context:";
  for (std::size_t i = 0; i < trace.context_nodes.size(); ++i)
    os << " " << graph.node(trace.context_nodes[i]).name << "=" << std::setprecision(3)
       << trace.context_importance[i];
  if (trace.context_nodes.empty()) os << " (none)";
  os << "\n";
  auto print_matrix = [&](const std::string& title, const Tensor<double>& m) {
    os << title << "\n";
    for (std::size_t r = 0; r < m.rows(); ++r) {
      os << " ";
      for (std::size_t c = 0; c < m.cols(); ++c) os << " " << std::fixed << std::setprecision(4) << std::setw(8) << m(r, c);
      os << "\n";
    }
    os.unsetf(std::ios::fixed);
  };
  for (std::size_t h = 0; h < trace.rect_encoder.size(); ++h)
    print_matrix("R_encoder[" + std::to_string(h) + "]", trace.rect_encoder[h]);
  for (std::size_t h = 0; h < trace.rect_decoder.size(); ++h)
    print_matrix("R_decoder[" + std::to_string(h) + "]", trace.rect_decoder[h]);
  for (const auto& rec : trace.attention)
    if (rec.site.find("cross") != std::string::npos)
      print_matrix("attention " + rec.site + " head " + std::to_string(rec.head), rec.weights);
  ctx.out << os.str();

  json j;
  j["episode"] = ep.id;
  j["activity"] = ep.activity;
  j["frames"] = ep.length();
  j["alpha"] = alpha;
  j["beta"] = beta;
  j["use_kg"] = cfg.use_kg;
  j["observed_end"] = w.observed_end;
  j["target_begin"] = w.target_begin;
  j["target_end"] = w.target_end;
  j["decode_horizon"] = span;
  j["observed"] = segments_json(observed, names);
  j["predicted"] = segments_json(predicted, names);
  j["truth"] = segments_json(truth, names);
  j["predicted_frames"] = predicted;
  j["bundle"]["actions"] = data::argmax_rows(bundle.a_pred);
  j["bundle"]["durations"] = std::vector<double>(bundle.d_pred.data().begin(), bundle.d_pred.data().end());
  j["bundle"]["last_observed"] = fc.last_observed;
  j["context"] = json::array();
  for (std::size_t i = 0; i < trace.context_nodes.size(); ++i)
    j["context"].push_back({{"node", graph.node(trace.context_nodes[i]).name}, {"importance", trace.context_importance[i]}});
  j["rect_encoder"] = json::array();
  for (const auto& m : trace.rect_encoder) j["rect_encoder"].push_back(tensor_json(m));
  j["rect_decoder"] = json::array();
  for (const auto& m : trace.rect_decoder) j["rect_decoder"].push_back(tensor_json(m));
  j["attention"] = json::array();
  for (const auto& rec : trace.attention)
    j["attention"].push_back({{"site", rec.site}, {"head", rec.head}, {"weights", tensor_json(rec.weights)}});
  const fs::path file = out_file.empty() ? fs::path(cfg.paths.run_dir) / "predict" / (ep.id + ".json") : fs::path(out_file);
  write_file(file, j.dump(2) + "\n");
  return kOk;
}

inline int cmd_inspect_graph(Context& ctx, const std::vector<std::string>& objects, const std::string& episode_id) {
  auto cfg = ctx.config;
  const auto graph = kg::KnowledgeGraph::load(cfg.paths.graph);
  auto& os = ctx.out;
  const auto n_objects = graph.objects().size();
  os << "graph " << cfg.paths.graph << ": " << graph.size() << " nodes (" << n_objects << " objects, "
     << graph.size() - n_objects << " affordances), " << graph.edges().size() << " edges\n";
  for (const auto& n : graph.nodes()) {
    os << "  " << std::left << std::setw(11) << kg::to_string(n.kind) << std::setw(14) << n.name << std::right;
    for (auto m : graph.neighbors(n.id)) os << " " << graph.node(m).name;
    os << "\n";
  }

  kg::NodeSet initial;
  std::function<double(kg::NodeId)> importance = [](kg::NodeId) { return 1.0; };
  std::optional<Model<float>> model;
  std::vector<double> learned;
  if (!episode_id.empty()) {
    const auto ds = data::read_dataset(cfg.paths.dataset);
    model.emplace(build_model(cfg, ds, graph));
    load_store(model->params(), Checkpoint::load(checkpoint_path(cfg)));
    const auto& ep = ds.find(episode_id);
    const auto obs = data::window(ep.length(), cfg.eval.grid.alphas.front(), cfg.eval.grid.betas.front()).observed_end;
    const auto w = observed_window<float>(ep, obs);
    Tape<float> tape;
    Var<float> visual = mean_rows(tape.constant(w.features));
    const auto imp = model->kg_networks().importance_all(tape, model->params(), visual).value();
    learned.assign(imp.data().begin(), imp.data().end());
    importance = [&learned](kg::NodeId id) { return learned.at(id); };
    kg::SceneAnnotation scene;
    for (const auto& s : w.scenes) scene.objects.insert(scene.objects.end(), s.begin(), s.end());
    initial = kg::detect_objects(graph, scene);
  } else if (!objects.empty()) {
    initial = kg::detect_objects(graph, {objects});
  } else {
    return kOk;
  }
  std::vector<kg::PropagationState> trace;
  const double gamma = episode_id.empty() ? 0.0 : cfg.model.kg.gamma;
  const auto active = kg::propagate(graph, initial, importance, gamma, cfg.model.kg.steps, &trace);
  os << "propagation (gamma " << gamma << ", " << cfg.model.kg.steps << " steps"
     << (episode_id.empty() ? ", every candidate accepted" : ", learned importance") << ")\n";
  for (const auto& st : trace) {
    os << "  step " << st.step << ":";
    for (auto id : st.candidate) {
      os << " " << graph.node(id).name;
      if (auto it = st.importance.find(id); it != st.importance.end())
        os << "(" << std::fixed << std::setprecision(3) << it->second << (st.active.count(id) ? "+" : "-") << ")";
      os.unsetf(std::ios::fixed);
    }
    os << "\n";
  }
  os << "active:";
  for (auto id : active) os << " " << graph.node(id).name;
  os << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// Argument parsing and dispatch

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Knowledge-guided long-term action anticipation", "kgaa"};
  app.require_subcommand(1);

  std::string config_file, run_dir, dataset, checkpoint, graph_file, resume, episode, out_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps, episodes;
  std::vector<double> alphas, betas;
  std::vector<std::string> objects;
  bool no_kg = false, deterministic = false;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "JSON run configuration");
    sub->add_option("--seed", seed, "random seed");
    sub->add_flag("--no-kg", no_kg, "disable the knowledge path (R = I)");
    sub->add_flag("--deterministic", deterministic, "single-threaded, no wall-clock output");
    sub->add_option("--run-dir", run_dir, "run output directory");
    sub->add_option("--dataset", dataset, "dataset directory");
    sub->add_option("--graph", graph_file, "knowledge graph file");
  };
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  common(gen);
  gen->add_option("--episodes", episodes, "number of episodes");
  auto* train = app.add_subcommand("train", "train a model");
  common(train);
  train->add_option("--steps", steps, "optimizer steps");
  train->add_option("--alpha", alphas, "training observation fractions")->delimiter(',');
  train->add_option("--resume", resume, "checkpoint to resume from");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint over the alpha-beta grid");
  common(eval);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file");
  eval->add_option("--alpha", alphas, "observation fractions")->delimiter(',');
  eval->add_option("--beta", betas, "prediction fractions")->delimiter(',');
  eval->add_option("--out", out_path, "report directory");
  std::string split;
  eval->add_option("--split", split, "train or test");
  auto* predict = app.add_subcommand("predict", "dump one forecast with attention and R matrices");
  common(predict);
  predict->add_option("--checkpoint", checkpoint, "checkpoint file");
  predict->add_option("--episode", episode, "episode id")->required();
  predict->add_option("--alpha", alphas, "observation fraction")->delimiter(',');
  predict->add_option("--beta", betas, "prediction fraction")->delimiter(',');
  predict->add_option("--out", out_path, "JSON dump file");
  auto* inspect = app.add_subcommand("inspect-graph", "summarise the graph and trace a propagation");
  common(inspect);
  inspect->add_option("--objects", objects, "objects to propagate from")->delimiter(',');
  inspect->add_option("--episode", episode, "trace learned propagation on this episode");
  inspect->add_option("--checkpoint", checkpoint, "checkpoint file");
  inspect->add_option("--alpha", alphas, "observation fraction")->delimiter(',');

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigFailure;
  }

  try {
    RunConfig cfg = config_file.empty() ? RunConfig{} : RunConfig::load(config_file);
    if (seed) cfg.seed = *seed;
    if (no_kg) cfg.use_kg = false;
    if (deterministic) cfg.deterministic = true;
    if (!run_dir.empty()) cfg.paths.run_dir = run_dir;
    if (!dataset.empty()) cfg.paths.dataset = dataset;
    if (!graph_file.empty()) cfg.paths.graph = graph_file;
    if (!checkpoint.empty()) cfg.paths.checkpoint = checkpoint;
    if (steps) cfg.train.steps = *steps;
    if (episodes) {
      // keep the configured train share
      const double share = static_cast<double>(cfg.data.train) / static_cast<double>(cfg.data.episodes);
      cfg.data.episodes = *episodes;
      cfg.data.train = static_cast<std::size_t>(std::llround(share * static_cast<double>(*episodes)));
    }
    if (!split.empty()) cfg.eval.split = split;
    if (!alphas.empty()) (train->parsed() ? cfg.train.alphas : cfg.eval.grid.alphas) = alphas;
    if (!betas.empty()) cfg.eval.grid.betas = betas;
    if (predict->parsed() || inspect->parsed()) {
      if (alphas.empty()) cfg.eval.grid.alphas = {0.1};
      if (betas.empty()) cfg.eval.grid.betas = {0.3};
    }
    cfg.validate();

    Context ctx{cfg, out, err};
    if (gen->parsed()) return cmd_gen_data(ctx);
    if (train->parsed()) return cmd_train(ctx, resume);
    if (eval->parsed()) return cmd_eval(ctx, out_path);
    if (predict->parsed()) return cmd_predict(ctx, episode, out_path);
    return cmd_inspect_graph(ctx, objects, episode);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigFailure;
  } catch (const DimensionError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigFailure;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataFailure;
  } catch (const LookupError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataFailure;
  } catch (const RangeError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataFailure;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kNumericFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

inline int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace kgaa::cli
