#pragma once

// Object/affordance knowledge graph, thresholded propagation from detected
// objects, and the small networks that score and embed graph nodes.

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kgaa/autograd.hpp"
#include "kgaa/errors.hpp"
#include "kgaa/nn.hpp"

namespace kgaa::kg {

using NodeId = std::size_t;
using NodeSet = std::set<NodeId>;

enum class NodeKind { object, affordance };
enum class Relation { has_affordance, tool_for };

inline const char* to_string(NodeKind k) {
  return k == NodeKind::object ? "object" : "affordance";
}
inline const char* to_string(Relation r) {
  return r == Relation::has_affordance ? "has-affordance" : "tool-for";
}

struct Node {
  NodeId id;
  NodeKind kind;
  std::string name;
};

struct Edge {
  Relation relation;
  NodeId a, b;
};

class KnowledgeGraph {
 public:
  NodeId add_node(NodeKind kind, std::string name) {
    if (name.empty()) throw ConfigError("graph: empty node name");
    if (by_name_.count(name)) throw ConfigError("graph: duplicate node name '" + name + "'");
    const NodeId id = nodes_.size();
    by_name_.emplace(name, id);
    nodes_.push_back({id, kind, std::move(name)});
    adjacency_.emplace_back();
    return id;
  }

  // Both relations join one object and one affordance; endpoint order is free.
  void add_edge(Relation rel, NodeId a, NodeId b) {
    if (a >= nodes_.size() || b >= nodes_.size()) throw LookupError("graph: edge endpoint out of range");
    if (a == b) throw ConfigError("graph: self-loop on '" + nodes_[a].name + "'");
    if (nodes_[a].kind == nodes_[b].kind) {
      throw ConfigError(std::string("graph: ") + to_string(rel) + " edge '" + nodes_[a].name +
                        "'-'" + nodes_[b].name + "' must join an object and an affordance");
    }
    const auto key = std::minmax(a, b);
    if (edge_keys_.count(key)) {
      throw ConfigError("graph: duplicate edge '" + nodes_[a].name + "'-'" + nodes_[b].name + "'");
    }
    edge_keys_.insert(key);
    edges_.push_back({rel, a, b});
    insert_sorted(adjacency_[a], b);
    insert_sorted(adjacency_[b], a);
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<Edge>& edges() const { return edges_; }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  const std::vector<NodeId>& neighbors(NodeId id) const { return adjacency_.at(id); }

  std::optional<NodeId> find(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) return std::nullopt;
    return it->second;
  }

  NodeId id(const std::string& name) const {
    auto found = find(name);
    if (!found) throw LookupError("graph has no node named '" + name + "'");
    return *found;
  }

  std::vector<NodeId> objects() const {
    std::vector<NodeId> out;
    for (const auto& n : nodes_)
      if (n.kind == NodeKind::object) out.push_back(n.id);
    return out;
  }

  // Text format: one record per line, `#` starts a comment.
  //   object <name> | affordance <name> | has-affordance <a> <b> | tool-for <a> <b>
  // Nodes may be declared after edges that mention them.
  static KnowledgeGraph parse(std::istream& in, const std::string& source = "<graph>") {
    struct Pending {
      std::size_t line;
      Relation rel;
      std::string a, b;
    };
    KnowledgeGraph g;
    std::vector<Pending> pending;
    std::string text;
    std::size_t line_no = 0;
    auto fail = [&](std::size_t line, const std::string& msg) {
      throw ConfigError(source + ":" + std::to_string(line) + ": " + msg);
    };
    while (std::getline(in, text)) {
      ++line_no;
      if (auto hash = text.find('#'); hash != std::string::npos) text.erase(hash);
      std::istringstream ls(text);
      std::vector<std::string> tok;
      for (std::string t; ls >> t;) tok.push_back(t);
      if (tok.empty()) continue;
      const std::string& kind = tok[0];
      if (kind == "object" || kind == "affordance") {
        if (tok.size() != 2) fail(line_no, "expected '" + kind + " <name>'");
        try {
          g.add_node(kind == "object" ? NodeKind::object : NodeKind::affordance, tok[1]);
        } catch (const ConfigError& e) {
          fail(line_no, e.what());
        }
      } else if (kind == "has-affordance" || kind == "tool-for") {
        if (tok.size() != 3) fail(line_no, "expected '" + kind + " <name> <name>'");
        pending.push_back({line_no,
                           kind == "has-affordance" ? Relation::has_affordance : Relation::tool_for,
                           tok[1], tok[2]});
      } else {
        fail(line_no, "unknown record kind '" + kind + "'");
      }
    }
    for (const auto& p : pending) {
      auto a = g.find(p.a), b = g.find(p.b);
      if (!a) fail(p.line, "unknown node '" + p.a + "'");
      if (!b) fail(p.line, "unknown node '" + p.b + "'");
      try {
        g.add_edge(p.rel, *a, *b);
      } catch (const ConfigError& e) {
        fail(p.line, e.what());
      }
    }
    return g;
  }

  static KnowledgeGraph load(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open graph file " + file.string());
    return parse(in, file.string());
  }

  std::string to_text() const {
    std::ostringstream os;
    for (const auto& n : nodes_) os << to_string(n.kind) << ' ' << n.name << '\n';
    for (const auto& e : edges_)
      os << to_string(e.relation) << ' ' << nodes_[e.a].name << ' ' << nodes_[e.b].name << '\n';
    return os.str();
  }

 private:
  static void insert_sorted(std::vector<NodeId>& v, NodeId x) {
    v.insert(std::upper_bound(v.begin(), v.end(), x), x);
  }

  std::vector<Node> nodes_;
  std::vector<Edge> edges_;
  std::vector<std::vector<NodeId>> adjacency_;
  std::unordered_map<std::string, NodeId> by_name_;
  std::set<std::pair<NodeId, NodeId>> edge_keys_;
};

struct SceneAnnotation {
  std::vector<std::string> objects;
};

// Ground-truth stand-in for an object detector: resolves annotated names.
inline NodeSet detect_objects(const KnowledgeGraph& g, const SceneAnnotation& scene) {
  NodeSet out;
  for (const auto& name : scene.objects) {
    const NodeId id = g.id(name);
    if (g.node(id).kind != NodeKind::object) {
      throw LookupError("'" + name + "' is an affordance, not a detectable object");
    }
    out.insert(id);
  }
  return out;
}

struct PropagationState {
  std::size_t step = 0;
  NodeSet active;     // accepted so far, including the initial set
  NodeSet candidate;  // proposed at this step
  std::map<NodeId, double> importance;
};

// Expands `initial` for up to `steps` rounds. Each round proposes the
// not-yet-evaluated neighbors of the nodes accepted in the previous round and
// accepts those whose importance is strictly above `gamma`. A rejected node is
// never proposed again.
template <class ImportanceFn>
NodeSet propagate(const KnowledgeGraph& g, const NodeSet& initial, ImportanceFn&& importance,
                  double gamma, int steps, std::vector<PropagationState>* trace = nullptr) {
  if (steps < 0) throw ContractError("propagate: step count must be non-negative");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ContractError("propagate: gamma must lie in [0, 1]");
  for (NodeId id : initial) {
    if (id >= g.size()) throw LookupError("propagate: initial node " + std::to_string(id) + " not in graph");
  }
  NodeSet active = initial;
  NodeSet visited = initial;
  NodeSet frontier = initial;
  if (trace) trace->push_back({0, active, {}, {}});
  for (int k = 1; k <= steps && !frontier.empty(); ++k) {
    PropagationState state;
    state.step = static_cast<std::size_t>(k);
    for (NodeId f : frontier)
      for (NodeId nb : g.neighbors(f))
        if (!visited.count(nb)) state.candidate.insert(nb);
    NodeSet accepted;
    for (NodeId c : state.candidate) {
      const double score = static_cast<double>(importance(c));
      state.importance[c] = score;
      visited.insert(c);
      if (score > gamma) accepted.insert(c);
    }
    active.insert(accepted.begin(), accepted.end());
    frontier = std::move(accepted);
    if (trace) {
      state.active = active;
      trace->push_back(std::move(state));
    }
  }
  return active;
}

struct KgConfig {
  std::size_t embed_dim = 32;    // node embedding width
  std::size_t context_dim = 32;  // context vector width
  std::size_t hidden = 32;       // importance network hidden width
  std::size_t n_max = 16;        // context rows kept
  double gamma = 0.5;
  int steps = 3;
  bool per_frame = false;
  double importance_bias = 0.0;  // initial value of the importance output bias
};

template <class T>
struct ContextSet {
  Var<T> vectors;  // [n_max × context_dim], rows >= count are zero
  std::size_t count = 0;
  std::size_t frame = 0;
  std::vector<NodeId> nodes;  // in row order
  std::vector<T> importance;  // in row order
};

// Learnable parts of the graph pathway: node embeddings, the importance
// network and the context network. Both networks read a node's embedding
// concatenated with a visual summary vector.
struct KgNetworks {
  std::size_t embeddings = 0;
  Dense importance_hidden, importance_out, context;
  std::size_t node_count = 0, visual_dim = 0;
  KgConfig config;

  template <class T, class Rng>
  static KgNetworks create(ParameterStore<T>& store, const std::string& path,
                           std::size_t node_count, std::size_t visual_dim, const KgConfig& cfg,
                           Rng& rng) {
    KgNetworks n;
    n.node_count = node_count;
    n.visual_dim = visual_dim;
    n.config = cfg;
    n.embeddings = store.add(path + ".node_embedding",
                             uniform_tensor<T>({node_count, cfg.embed_dim}, 1.0, rng));
    const std::size_t in = cfg.embed_dim + visual_dim;
    n.importance_hidden = Dense::create(store, path + ".importance.hidden", in, cfg.hidden, rng);
    n.importance_out = Dense::create(store, path + ".importance.out", cfg.hidden, 1, rng);
    store[n.importance_out.bias].value[0] = static_cast<T>(cfg.importance_bias);
    n.context = Dense::create(store, path + ".context", in, cfg.context_dim, rng);
    return n;
  }

  static std::size_t count(std::size_t node_count, std::size_t visual_dim, const KgConfig& cfg) {
    const std::size_t in = cfg.embed_dim + visual_dim;
    return node_count * cfg.embed_dim + Dense::count(in, cfg.hidden) + Dense::count(cfg.hidden, 1) +
           Dense::count(in, cfg.context_dim);
  }

  template <class T>
  Var<T> node_inputs(Tape<T>& tape, ParameterStore<T>& store, Var<T> visual) const {
    Var<T> emb = tape.param(store[embeddings]);
    return concat<T>({emb, repeat_rows(visual, node_count)}, 1);
  }

  // Importance of every node as a [node_count × 1] column in (0, 1).
  template <class T>
  Var<T> importance_all(Tape<T>& tape, ParameterStore<T>& store, Var<T> visual) const {
    Var<T> x = node_inputs(tape, store, visual);
    return sigmoid(importance_out(tape, store, gelu(importance_hidden(tape, store, x))));
  }

  template <class T>
  T importance(Tape<T>& tape, ParameterStore<T>& store, NodeId node, Var<T> visual) const {
    if (node >= node_count) throw LookupError("importance: node " + std::to_string(node) + " not in graph");
    return importance_all(tape, store, visual).value()[node];
  }

  // One context row per active node in descending importance (ties by
  // ascending id), truncated to n_max and zero-padded. Rows are scaled by
  // the node's importance so the importance network receives gradient.
  template <class T>
  ContextSet<T> context_vectors(Tape<T>& tape, ParameterStore<T>& store, const NodeSet& active,
                                Var<T> importance_col, Var<T> visual, std::size_t frame = 0) const {
    std::vector<NodeId> order(active.begin(), active.end());
    const Tensor<T>& imp = importance_col.value();
    std::stable_sort(order.begin(), order.end(), [&](NodeId a, NodeId b) {
      if (imp[a] != imp[b]) return imp[a] > imp[b];
      return a < b;
    });
    if (order.size() > config.n_max) order.resize(config.n_max);

    ContextSet<T> out;
    out.count = order.size();
    out.frame = frame;
    out.nodes = order;
    for (NodeId id : order) out.importance.push_back(imp[id]);
    if (order.empty()) {
      out.vectors = tape.constant(Tensor<T>({config.n_max, config.context_dim}));
      return out;
    }
    Var<T> inputs = gather_rows(node_inputs(tape, store, visual), std::span<const std::size_t>(order));
    Var<T> scores = gather_rows(importance_col, std::span<const std::size_t>(order));
    Var<T> rows = scale_rows(kgaa::tanh(context(tape, store, inputs)), scores);
    if (order.size() < config.n_max) {
      Var<T> pad = tape.constant(Tensor<T>({config.n_max - order.size(), config.context_dim}));
      rows = concat<T>({rows, pad}, 0);
    }
    out.vectors = rows;
    return out;
  }
};

}  // namespace kgaa::kg
