#pragma once

// Synthetic kitchen-activity episodes, observation/prediction windowing and
// the on-disk dataset layout.
//
// An episode is one activity from the grammar unrolled into an action chain.
// Every frame carries a feature vector (action prototype followed by a
// multi-hot of the objects the current action handles, plus Gaussian noise),
// an action label, and the set of visible objects. Objects stay visible from
// the start of the episode until the last action that needs them, so the
// scene at any point already shows what later actions will use.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "kgaa/errors.hpp"
#include "kgaa/knowledge_graph.hpp"
#include "kgaa/tensor.hpp"

namespace kgaa::data {

struct ActionSpec {
  std::string name;
  std::vector<std::string> objects;
  std::size_t min_frames = 1, max_frames = 1;
};

struct GrammarStep {
  enum class Kind { required, optional, alternative };
  Kind kind = Kind::required;
  std::vector<std::vector<std::string>> branches;
  double probability = 0.5;  // inclusion probability for optional steps
};

struct Activity {
  std::string name;
  std::vector<GrammarStep> steps;
};

struct ActionGrammar {
  std::vector<std::string> objects;
  std::vector<ActionSpec> actions;
  std::vector<Activity> activities;
  std::size_t min_length = 80, max_length = 160;

  // Class 0 is `none`; action i in `actions` is class i + 1.
  std::size_t class_count() const { return actions.size() + 1; }

  int class_id(const std::string& action) const {
    for (std::size_t i = 0; i < actions.size(); ++i)
      if (actions[i].name == action) return static_cast<int>(i + 1);
    throw LookupError("grammar has no action named '" + action + "'");
  }

  const ActionSpec& action(int class_id) const {
    if (class_id < 1 || static_cast<std::size_t>(class_id) > actions.size()) {
      throw LookupError("no action with class id " + std::to_string(class_id));
    }
    return actions[static_cast<std::size_t>(class_id - 1)];
  }

  std::vector<std::string> class_names() const {
    std::vector<std::string> out{"none"};
    for (const auto& a : actions) out.push_back(a.name);
    return out;
  }

  const Activity& activity(const std::string& name) const {
    for (const auto& a : activities)
      if (a.name == name) return a;
    throw LookupError("grammar has no activity named '" + name + "'");
  }

  // Longest chain any activity can unroll into.
  std::size_t max_chain_length() const {
    std::size_t best = 0;
    for (const auto& act : activities) {
      std::size_t n = 0;
      for (const auto& s : act.steps) {
        std::size_t longest = 0;
        for (const auto& b : s.branches) longest = std::max(longest, b.size());
        n += longest;
      }
      best = std::max(best, n);
    }
    return best;
  }

  void validate() const {
    std::set<std::string> objs(objects.begin(), objects.end());
    if (objs.size() != objects.size()) throw ConfigError("grammar: duplicate object names");
    std::set<std::string> names;
    for (const auto& a : actions) {
      if (a.name.empty() || a.name == "none") throw ConfigError("grammar: invalid action name '" + a.name + "'");
      if (!names.insert(a.name).second) throw ConfigError("grammar: duplicate action '" + a.name + "'");
      if (a.min_frames < 1 || a.max_frames < a.min_frames) {
        throw ConfigError("grammar: action '" + a.name + "' has an invalid duration range");
      }
      for (const auto& o : a.objects)
        if (!objs.count(o)) throw ConfigError("grammar: action '" + a.name + "' uses unknown object '" + o + "'");
    }
    if (activities.empty()) throw ConfigError("grammar: no activities");
    if (min_length < 1 || max_length < min_length) throw ConfigError("grammar: invalid episode length range");
    for (const auto& act : activities) {
      if (act.steps.empty()) throw ConfigError("grammar: activity '" + act.name + "' has no steps");
      for (const auto& s : act.steps) {
        if (s.branches.empty()) throw ConfigError("grammar: activity '" + act.name + "' has an empty step");
        if (s.probability < 0.0 || s.probability > 1.0) {
          throw ConfigError("grammar: activity '" + act.name + "' has an optional probability outside [0, 1]");
        }
        for (const auto& b : s.branches)
          for (const auto& a : b)
            if (!names.count(a)) {
              throw ConfigError("grammar: activity '" + act.name + "' references unknown action '" + a + "'");
            }
      }
    }
  }

  // Every object must exist in the graph as an object node.
  void validate_against(const kg::KnowledgeGraph& g) const {
    for (const auto& o : objects) {
      auto id = g.find(o);
      if (!id) throw ConfigError("grammar object '" + o + "' is not in the knowledge graph");
      if (g.node(*id).kind != kg::NodeKind::object) {
        throw ConfigError("grammar object '" + o + "' is an affordance node in the knowledge graph");
      }
    }
  }

  static ActionGrammar from_json(const nlohmann::json& j) {
    try {
      ActionGrammar g;
      g.objects = j.at("objects").get<std::vector<std::string>>();
      for (const auto& a : j.at("actions")) {
        ActionSpec spec;
        spec.name = a.at("name").get<std::string>();
        spec.objects = a.value("objects", std::vector<std::string>{});
        const auto d = a.at("frames").get<std::vector<std::size_t>>();
        if (d.size() != 2) throw ConfigError("grammar: action '" + spec.name + "' frames must be [min, max]");
        spec.min_frames = d[0];
        spec.max_frames = d[1];
        g.actions.push_back(std::move(spec));
      }
      for (const auto& a : j.at("activities")) {
        Activity act;
        act.name = a.at("name").get<std::string>();
        for (const auto& s : a.at("steps")) {
          GrammarStep step;
          if (s.is_string()) {
            step.branches = {{s.get<std::string>()}};
          } else if (s.contains("optional")) {
            step.kind = GrammarStep::Kind::optional;
            step.branches = {s.at("optional").get<std::vector<std::string>>()};
            step.probability = s.value("p", 0.5);
          } else if (s.contains("one_of")) {
            step.kind = GrammarStep::Kind::alternative;
            step.branches = s.at("one_of").get<std::vector<std::vector<std::string>>>();
          } else {
            throw ConfigError("grammar: activity '" + act.name + "' has an unrecognised step " + s.dump());
          }
          act.steps.push_back(std::move(step));
        }
        g.activities.push_back(std::move(act));
      }
      if (j.contains("episode_frames")) {
        const auto r = j.at("episode_frames").get<std::vector<std::size_t>>();
        if (r.size() != 2) throw ConfigError("grammar: episode_frames must be [min, max]");
        g.min_length = r[0];
        g.max_length = r[1];
      }
      g.validate();
      return g;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("grammar: ") + e.what());
    }
  }

  static ActionGrammar load(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open grammar file " + file.string());
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(file.string() + ": " + e.what());
    }
  }
};

struct EpisodeSample {
  std::string id;
  Tensor<float> frames;  // [N × feature_dim]
  std::vector<int> labels;
  std::vector<std::vector<std::string>> scenes;
  std::string activity;
  std::uint64_t seed = 0;

  std::size_t length() const { return labels.size(); }
};

struct GenerateOptions {
  std::size_t feature_dim = 64;
  double noise = 0.5;
};

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Unrolls one activity into its action-name chain.
template <class Rng>
std::vector<std::string> sample_chain(const Activity& act, Rng& rng) {
  std::vector<std::string> chain;
  for (const auto& s : act.steps) {
    const std::vector<std::string>* branch = &s.branches.front();
    if (s.kind == GrammarStep::Kind::optional) {
      if (!std::bernoulli_distribution(s.probability)(rng)) continue;
    } else if (s.kind == GrammarStep::Kind::alternative) {
      std::uniform_int_distribution<std::size_t> pick(0, s.branches.size() - 1);
      branch = &s.branches[pick(rng)];
    }
    chain.insert(chain.end(), branch->begin(), branch->end());
  }
  return chain;
}

// Per-action prototype vectors shared by every episode generated from `seed`.
inline Tensor<float> action_prototypes(const ActionGrammar& g, std::size_t feature_dim,
                                       std::uint64_t seed) {
  const std::size_t proto_dim = feature_dim - g.objects.size();
  std::mt19937_64 rng(mix_seed(seed, 0xfeedULL));
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor<float> out({g.class_count(), proto_dim});
  for (std::size_t c = 1; c < g.class_count(); ++c)
    for (std::size_t k = 0; k < proto_dim; ++k) out(c, k) = static_cast<float>(normal(rng));
  return out;
}

inline EpisodeSample generate_episode(const ActionGrammar& g, const Tensor<float>& prototypes,
                                      const GenerateOptions& opt, std::uint64_t episode_seed,
                                      std::string id) {
  std::mt19937_64 rng(episode_seed);
  std::uniform_int_distribution<std::size_t> pick_activity(0, g.activities.size() - 1);
  const Activity& act = g.activities[pick_activity(rng)];
  const auto chain = sample_chain(act, rng);
  if (chain.empty()) throw DataError("activity '" + act.name + "' unrolled to an empty chain");

  std::vector<int> classes;
  for (const auto& a : chain) classes.push_back(g.class_id(a));
  std::vector<std::size_t> durations(chain.size());
  bool fits = false;
  for (int attempt = 0; attempt < 10000 && !fits; ++attempt) {
    std::size_t total = 0;
    for (std::size_t i = 0; i < chain.size(); ++i) {
      const auto& spec = g.action(classes[i]);
      durations[i] = std::uniform_int_distribution<std::size_t>(spec.min_frames, spec.max_frames)(rng);
      total += durations[i];
    }
    fits = total >= g.min_length && total <= g.max_length;
  }
  if (!fits) {
    throw DataError("activity '" + act.name + "' cannot produce an episode within [" +
                    std::to_string(g.min_length) + ", " + std::to_string(g.max_length) + "] frames");
  }

  // Objects remain visible until their last use.
  std::vector<std::vector<std::string>> remaining(chain.size());
  for (std::size_t i = 0; i < chain.size(); ++i) {
    std::set<std::string> seen;
    for (std::size_t j = i; j < chain.size(); ++j)
      for (const auto& o : g.action(classes[j]).objects) seen.insert(o);
    for (const auto& o : g.objects)
      if (seen.count(o)) remaining[i].push_back(o);
  }

  EpisodeSample ep;
  ep.id = std::move(id);
  ep.activity = act.name;
  ep.seed = episode_seed;
  const std::size_t n = std::accumulate(durations.begin(), durations.end(), std::size_t{0});
  const std::size_t proto_dim = prototypes.cols();
  ep.frames = Tensor<float>({n, opt.feature_dim});
  std::normal_distribution<double> noise(0.0, 1.0);
  std::size_t frame = 0;
  for (std::size_t i = 0; i < chain.size(); ++i) {
    const auto& spec = g.action(classes[i]);
    for (std::size_t r = 0; r < durations[i]; ++r, ++frame) {
      ep.labels.push_back(classes[i]);
      ep.scenes.push_back(remaining[i]);
      auto row = ep.frames.row(frame);
      for (std::size_t k = 0; k < proto_dim; ++k) row[k] = prototypes(static_cast<std::size_t>(classes[i]), k);
      for (const auto& o : spec.objects) {
        const auto pos = std::find(g.objects.begin(), g.objects.end(), o) - g.objects.begin();
        row[proto_dim + static_cast<std::size_t>(pos)] = 1.0f;
      }
      if (opt.noise > 0.0)
        for (auto& v : row) v += static_cast<float>(opt.noise * noise(rng));
    }
  }
  return ep;
}

inline std::string episode_name(std::size_t index) {
  std::ostringstream os;
  os << "ep" << std::setfill('0') << std::setw(5) << index;
  return os.str();
}

inline std::vector<EpisodeSample> generate(const ActionGrammar& g, std::size_t n_episodes,
                                           std::uint64_t seed, const GenerateOptions& opt = {}) {
  g.validate();
  if (n_episodes < 1) throw ContractError("generate: need at least one episode");
  if (opt.feature_dim <= g.objects.size()) {
    throw ConfigError("generate: feature_dim must exceed the object count " + std::to_string(g.objects.size()));
  }
  const auto prototypes = action_prototypes(g, opt.feature_dim, seed);
  std::vector<EpisodeSample> out;
  out.reserve(n_episodes);
  for (std::size_t i = 0; i < n_episodes; ++i)
    out.push_back(generate_episode(g, prototypes, opt, mix_seed(seed, i + 1), episode_name(i)));
  return out;
}

// ceil(fraction * n), robust to representation error such as 0.3 * 100.
inline std::size_t ceil_fraction(double fraction, std::size_t n) {
  const double x = fraction * static_cast<double>(n);
  return static_cast<std::size_t>(std::ceil(x - 1e-9 * std::max(1.0, x)));
}

struct EpisodeWindow {
  std::size_t observed_begin = 0, observed_end = 0;
  std::size_t target_begin = 0, target_end = 0;
  double alpha = 0.0, beta = 0.0;

  std::size_t observed_length() const { return observed_end - observed_begin; }
  std::size_t target_length() const { return target_end - target_begin; }
};

// Observed frames [0, ceil(alpha N)), target the next ceil(beta N) frames.
inline EpisodeWindow window(std::size_t n_frames, double alpha, double beta) {
  if (!(alpha > 0.0) || !(beta > 0.0)) {
    throw RangeError("window: alpha and beta must be positive");
  }
  const std::size_t obs = ceil_fraction(alpha, n_frames);
  const std::size_t tgt = ceil_fraction(beta, n_frames);
  if (obs + tgt > n_frames || obs == 0) {
    throw RangeError("window: alpha=" + std::to_string(alpha) + " beta=" + std::to_string(beta) +
                     " needs " + std::to_string(obs + tgt) + " frames, episode has " +
                     std::to_string(n_frames));
  }
  return {0, obs, obs, obs + tgt, alpha, beta};
}

inline EpisodeWindow window(const EpisodeSample& ep, double alpha, double beta) {
  return window(ep.length(), alpha, beta);
}

struct Segment {
  int action = 0;
  std::size_t length = 0;
  friend bool operator==(const Segment&, const Segment&) = default;
};

// Run-length encoding of a label sequence.
inline std::vector<Segment> segments_from_labels(std::span<const int> labels) {
  std::vector<Segment> out;
  for (int l : labels) {
    if (!out.empty() && out.back().action == l) {
      ++out.back().length;
    } else {
      out.push_back({l, 1});
    }
  }
  return out;
}

inline std::vector<int> expand_segments(std::span<const Segment> segs) {
  std::vector<int> out;
  for (const auto& s : segs) out.insert(out.end(), s.length, s.action);
  return out;
}

// Segment-level action sequence (durations dropped).
inline std::vector<int> collapse(std::span<const int> labels) {
  std::vector<int> out;
  for (const auto& s : segments_from_labels(labels)) out.push_back(s.action);
  return out;
}

// Expands per-query (action, duration share) predictions into exactly
// `horizon` frame labels. Queries from the first `none` onward are dropped,
// the surviving shares are renormalised and frames are apportioned by the
// largest-remainder rule (ties to the earlier query).
inline std::vector<int> decode_durations(std::span<const double> durations,
                                         std::span<const int> actions, std::size_t horizon,
                                         int none_class = 0) {
  if (durations.size() != actions.size()) {
    throw DimensionError("decode_durations: " + std::to_string(durations.size()) + " durations for " +
                         std::to_string(actions.size()) + " actions");
  }
  if (horizon < 1) throw ContractError("decode_durations: horizon must be at least one frame");
  std::size_t active = 0;
  while (active < actions.size() && actions[active] != none_class) ++active;
  double total = 0.0;
  for (std::size_t i = 0; i < active; ++i) total += std::max(0.0, durations[i]);
  if (active == 0) return std::vector<int>(horizon, none_class);
  std::vector<double> share(active);
  for (std::size_t i = 0; i < active; ++i)
    share[i] = total > 0.0 ? std::max(0.0, durations[i]) / total : 1.0 / static_cast<double>(active);

  std::vector<std::size_t> counts(active);
  std::vector<double> remainder(active);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < active; ++i) {
    const double quota = share[i] * static_cast<double>(horizon);
    counts[i] = std::min(horizon, static_cast<std::size_t>(std::floor(quota)));
    remainder[i] = quota - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  std::vector<std::size_t> order(active);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t k = 0; assigned < horizon; k = (k + 1) % active, ++assigned) ++counts[order[k]];
  while (assigned > horizon) {
    // Only reachable through rounding when shares sum slightly above one.
    auto it = std::max_element(counts.begin(), counts.end());
    --*it;
    --assigned;
  }
  std::vector<int> out;
  out.reserve(horizon);
  for (std::size_t i = 0; i < active; ++i) out.insert(out.end(), counts[i], actions[i]);
  return out;
}

template <class T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  std::vector<int> out;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directory
//
//   manifest.json            generation parameters and class/object names
//   index.tsv                id <TAB> frames <TAB> activity <TAB> seed
//   train.txt, test.txt      one episode id per line
//   episodes/<id>.labels.txt space-separated class ids
//   episodes/<id>.scenes.txt one line per frame, space-separated objects ('-' if none)
//   episodes/<id>.features.bin  "KGAF", u32 version, u64 rows, u64 cols, f32 values (LE)

struct Dataset {
  nlohmann::json manifest;
  std::vector<EpisodeSample> episodes;
  std::vector<std::string> train_ids, test_ids;
  std::vector<std::string> class_names;

  const EpisodeSample& find(const std::string& id) const {
    for (const auto& e : episodes)
      if (e.id == id) return e;
    throw LookupError("dataset has no episode '" + id + "'");
  }

  std::vector<const EpisodeSample*> split(const std::vector<std::string>& ids) const {
    std::vector<const EpisodeSample*> out;
    for (const auto& id : ids) out.push_back(&find(id));
    return out;
  }

  std::size_t feature_dim() const { return episodes.empty() ? 0 : episodes.front().frames.cols(); }
};

namespace detail {

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + p.string());
  os << text;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint64_t get_le(const std::string& in, std::size_t& pos, int bytes, const std::string& src) {
  if (pos + static_cast<std::size_t>(bytes) > in.size()) throw DataError(src + ": truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + static_cast<std::size_t>(i)])) << (8 * i);
  pos += static_cast<std::size_t>(bytes);
  return v;
}

inline std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::istringstream is(read_text(p));
  std::vector<std::string> out;
  for (std::string line; std::getline(is, line);)
    if (!line.empty()) out.push_back(line);
  return out;
}

}  // namespace detail

inline std::string encode_features(const Tensor<float>& f) {
  std::string out = "KGAF";
  detail::put_le(out, 1, 4);
  detail::put_le(out, f.rows(), 8);
  detail::put_le(out, f.cols(), 8);
  for (float v : f.data()) detail::put_le(out, std::bit_cast<std::uint32_t>(v), 4);
  return out;
}

inline Tensor<float> decode_features(const std::string& bytes, const std::string& src) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "KGAF") != 0) throw DataError(src + ": bad feature header");
  std::size_t pos = 4;
  if (detail::get_le(bytes, pos, 4, src) != 1) throw DataError(src + ": unsupported feature version");
  const auto rows = detail::get_le(bytes, pos, 8, src);
  const auto cols = detail::get_le(bytes, pos, 8, src);
  std::vector<float> values(rows * cols);
  for (auto& v : values) v = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(bytes, pos, 4, src)));
  if (pos != bytes.size()) throw DataError(src + ": trailing bytes");
  return Tensor<float>({rows, cols}, std::move(values));
}

inline void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "episodes");
  detail::write_text(dir / "manifest.json", ds.manifest.dump(2) + "\n");
  std::ostringstream index;
  index << "id\tframes\tactivity\tseed\n";
  for (const auto& ep : ds.episodes) {
    index << ep.id << '\t' << ep.length() << '\t' << ep.activity << '\t' << ep.seed << '\n';
    std::ostringstream labels, scenes;
    for (std::size_t i = 0; i < ep.labels.size(); ++i) labels << (i ? " " : "") << ep.labels[i];
    labels << '\n';
    for (const auto& s : ep.scenes) {
      if (s.empty()) scenes << '-';
      for (std::size_t i = 0; i < s.size(); ++i) scenes << (i ? " " : "") << s[i];
      scenes << '\n';
    }
    detail::write_text(dir / "episodes" / (ep.id + ".labels.txt"), labels.str());
    detail::write_text(dir / "episodes" / (ep.id + ".scenes.txt"), scenes.str());
    detail::write_text(dir / "episodes" / (ep.id + ".features.bin"), encode_features(ep.frames));
  }
  detail::write_text(dir / "index.tsv", index.str());
  auto ids = [](const std::vector<std::string>& v) {
    std::string s;
    for (const auto& id : v) s += id + "\n";
    return s;
  };
  detail::write_text(dir / "train.txt", ids(ds.train_ids));
  detail::write_text(dir / "test.txt", ids(ds.test_ids));
  std::string classes;
  for (const auto& c : ds.class_names) classes += c + "\n";
  detail::write_text(dir / "classes.txt", classes);
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("dataset directory " + dir.string() + " does not exist");
  Dataset ds;
  try {
    ds.manifest = nlohmann::json::parse(detail::read_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(dir.string() + "/manifest.json: " + e.what());
  }
  ds.class_names = detail::read_lines(dir / "classes.txt");
  auto lines = detail::read_lines(dir / "index.tsv");
  for (std::size_t k = 1; k < lines.size(); ++k) {
    std::istringstream ls(lines[k]);
    EpisodeSample ep;
    std::size_t frames = 0;
    if (!(ls >> ep.id >> frames >> ep.activity >> ep.seed)) {
      throw DataError(dir.string() + "/index.tsv:" + std::to_string(k + 1) + ": malformed record");
    }
    const fs::path base = dir / "episodes";
    {
      std::istringstream is(detail::read_text(base / (ep.id + ".labels.txt")));
      for (int l; is >> l;) ep.labels.push_back(l);
    }
    for (const auto& line : detail::read_lines(base / (ep.id + ".scenes.txt"))) {
      std::istringstream is(line);
      std::vector<std::string> scene;
      for (std::string o; is >> o;)
        if (o != "-") scene.push_back(o);
      ep.scenes.push_back(std::move(scene));
    }
    const auto feat_path = base / (ep.id + ".features.bin");
    ep.frames = decode_features(detail::read_text(feat_path), feat_path.string());
    if (ep.labels.size() != frames || ep.scenes.size() != frames || ep.frames.rows() != frames) {
      throw DataError("episode " + ep.id + ": files disagree with the index frame count " +
                      std::to_string(frames));
    }
    ds.episodes.push_back(std::move(ep));
  }
  ds.train_ids = detail::read_lines(dir / "train.txt");
  ds.test_ids = detail::read_lines(dir / "test.txt");
  for (const auto& id : ds.train_ids) ds.find(id);
  for (const auto& id : ds.test_ids) ds.find(id);
  return ds;
}

}  // namespace kgaa::data
