#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "kgaa/knowledge_graph.hpp"
#include "oracles.hpp"

using namespace kgaa;
using kgaa::kg::KnowledgeGraph;
using kgaa::kg::NodeKind;
using kgaa::kg::NodeSet;
using kgaa::kg::Relation;

namespace {

KnowledgeGraph parse(const std::string& text) {
  std::istringstream in(text);
  return KnowledgeGraph::parse(in, "toy.graph");
}

KnowledgeGraph toy() {
  return parse(
      "object tomato\nobject knife\naffordance cuttable\naffordance graspable\n"
      "has-affordance tomato cuttable\ntool-for knife cuttable\nhas-affordance tomato graspable\n");
}

struct RandomGraph {
  KnowledgeGraph graph;
  std::vector<std::set<std::size_t>> adj;
};

RandomGraph random_graph(std::mt19937_64& rng) {
  RandomGraph r;
  const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 30)(rng);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t i = 0; i < n; ++i) {
    const bool object = i == 0 || (i != 1 && coin(rng));
    r.graph.add_node(object ? NodeKind::object : NodeKind::affordance, "n" + std::to_string(i));
  }
  r.adj.resize(n);
  std::bernoulli_distribution link(std::uniform_real_distribution<double>(0.05, 0.4)(rng));
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b)
      if (r.graph.node(a).kind != r.graph.node(b).kind && link(rng)) {
        r.graph.add_edge(coin(rng) ? Relation::has_affordance : Relation::tool_for, a, b);
        r.adj[a].insert(b);
        r.adj[b].insert(a);
      }
  return r;
}

kg::KgNetworks make_networks(ParameterStore<double>& store, std::size_t nodes, std::size_t visual, kg::KgConfig cfg,
                             std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return kg::KgNetworks::create(store, "kg", nodes, visual, cfg, rng);
}

}  // namespace

TEST(GraphFile, ParsesNodesAndEdges) {
  auto g = toy();
  EXPECT_EQ(g.size(), 4u);
  EXPECT_EQ(g.edges().size(), 3u);
  EXPECT_EQ(g.node(g.id("knife")).kind, NodeKind::object);
  EXPECT_EQ(g.neighbors(g.id("cuttable")).size(), 2u);
}

TEST(GraphFile, NodesMayFollowEdgesAndCommentsAreSkipped) {
  auto g = parse("# header\nhas-affordance egg crackable  # trailing\n\nobject egg\naffordance crackable\n");
  EXPECT_EQ(g.size(), 2u);
  EXPECT_EQ(g.edges().size(), 1u);
}

TEST(GraphFile, ErrorsCarryLineNumbers) {
  auto expect_line = [](const std::string& text, const std::string& needle) {
    try {
      parse(text);
      FAIL() << "expected a ConfigError for: " << text;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_line("object a\nobject a\n", "toy.graph:2:");
  expect_line("object a\nobject b\nhas-affordance a b\n", "toy.graph:3:");      // object-object
  expect_line("object a\nhas-affordance a missing\n", "toy.graph:2: unknown node 'missing'");
  expect_line("widget a\n", "toy.graph:1: unknown record kind");
  expect_line("object a\naffordance b\nhas-affordance a b\ntool-for b a\n", "toy.graph:4:");  // duplicate pair
  expect_line("object a b\n", "toy.graph:1:");
}

TEST(GraphFile, SelfLoopRejected) {
  KnowledgeGraph g;
  auto a = g.add_node(NodeKind::object, "a");
  EXPECT_THROW(g.add_edge(Relation::has_affordance, a, a), ConfigError);
}

TEST(GraphFile, RoundTripsThroughText) {
  auto g = toy();
  auto h = parse(g.to_text());
  ASSERT_EQ(h.size(), g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    EXPECT_EQ(h.node(i).name, g.node(i).name);
    EXPECT_EQ(h.neighbors(i), g.neighbors(i));
  }
}

TEST(GraphFile, KitchenGraphLoads) {
  auto g = KnowledgeGraph::load(std::string(KGAA_SOURCE_DIR) + "/data/kitchen.graph");
  EXPECT_EQ(g.objects().size(), 10u);
  EXPECT_GT(g.edges().size(), 10u);
}

TEST(Detect, ResolvesObjectNames) {
  auto g = toy();
  EXPECT_EQ(kg::detect_objects(g, {{"tomato", "knife"}}), (NodeSet{g.id("tomato"), g.id("knife")}));
  EXPECT_TRUE(kg::detect_objects(g, {{}}).empty());
  EXPECT_EQ(kg::detect_objects(g, {{"knife", "knife"}}).size(), 1u);
  try {
    kg::detect_objects(g, {{"spoon"}});
    FAIL();
  } catch (const LookupError& e) {
    EXPECT_NE(std::string(e.what()).find("spoon"), std::string::npos);
  }
  EXPECT_THROW(kg::detect_objects(g, {{"cuttable"}}), LookupError);
}

TEST(Propagate, ToyExample) {
  auto g = toy();
  std::map<kg::NodeId, double> imp{{g.id("cuttable"), 0.9}, {g.id("graspable"), 0.2}, {g.id("knife"), 0.8}};
  auto f = [&](kg::NodeId id) { return imp.at(id); };
  auto got = kg::propagate(g, {g.id("tomato")}, f, 0.5, 2);
  EXPECT_EQ(got, (NodeSet{g.id("tomato"), g.id("cuttable"), g.id("knife")}));
}

TEST(Propagate, ThresholdIsStrict) {
  auto g = toy();
  auto half = [](kg::NodeId) { return 0.5; };
  EXPECT_EQ(kg::propagate(g, {g.id("tomato")}, half, 0.5, 3), (NodeSet{g.id("tomato")}));
}

TEST(Propagate, EdgeCases) {
  auto g = toy();
  auto all = [](kg::NodeId) { return 0.999; };
  EXPECT_TRUE(kg::propagate(g, {}, all, 0.0, 5).empty());
  EXPECT_EQ(kg::propagate(g, {g.id("tomato")}, all, 1.0, 5), (NodeSet{g.id("tomato")}));
  EXPECT_EQ(kg::propagate(g, {g.id("tomato")}, all, 0.0, 10).size(), 4u);
  EXPECT_EQ(kg::propagate(g, {g.id("tomato")}, all, 0.0, 0), (NodeSet{g.id("tomato")}));
  EXPECT_THROW(kg::propagate(g, {g.id("tomato")}, all, 0.5, -1), ContractError);
  EXPECT_THROW(kg::propagate(g, {g.id("tomato")}, all, 1.5, 1), ContractError);
  EXPECT_THROW(kg::propagate(g, {99}, all, 0.5, 1), LookupError);
}

TEST(Propagate, RejectedNodesAreNotReproposed) {
  // knife is rejected at step 2 via cuttable; later fronts must not revisit it
  auto g = parse(
      "object a\nobject knife\naffordance x\naffordance y\n"
      "has-affordance a x\ntool-for knife x\nhas-affordance a y\ntool-for knife y\n");
  std::vector<kg::PropagationState> trace;
  std::map<kg::NodeId, double> imp{{g.id("x"), 0.9}, {g.id("y"), 0.9}, {g.id("knife"), 0.1}};
  kg::propagate(g, {g.id("a")}, [&](kg::NodeId id) { return imp.at(id); }, 0.5, 4, &trace);
  std::size_t proposals = 0;
  for (const auto& s : trace) proposals += s.candidate.count(g.id("knife"));
  EXPECT_EQ(proposals, 1u);
}

TEST(Propagate, MatchesBruteForceOracle) {
  const std::vector<std::pair<double, int>> settings{{0.0, 1}, {0.3, 2}, {0.5, 3}, {0.7, 5}, {0.9, 30}};
  for (int s = 0; s < 100; ++s) {
    std::mt19937_64 rng(s);
    auto r = random_graph(rng);
    std::vector<double> imp(r.graph.size());
    for (auto& v : imp) v = std::uniform_real_distribution<double>(0, 1)(rng);
    NodeSet initial;
    for (std::size_t i = 0; i < r.graph.size(); ++i)
      if (std::bernoulli_distribution(0.15)(rng)) initial.insert(i);
    for (auto [gamma, steps] : settings) {
      std::vector<kg::PropagationState> trace;
      auto got = kg::propagate(r.graph, initial, [&](kg::NodeId id) { return imp[id]; }, gamma, steps, &trace);
      auto want = oracle::propagate(r.adj, initial, imp, gamma, steps);
      ASSERT_EQ(got, want) << "graph " << s << " gamma " << gamma << " T " << steps;
      // trace invariants: candidates are neighbors of the previous acceptances
      NodeSet seen = initial, frontier = initial;
      for (std::size_t k = 1; k < trace.size(); ++k) {
        NodeSet expect;
        for (auto f : frontier)
          for (auto nb : r.adj[f])
            if (!seen.count(nb)) expect.insert(nb);
        ASSERT_EQ(trace[k].candidate, expect);
        seen.insert(expect.begin(), expect.end());
        frontier.clear();
        for (auto c : trace[k].candidate)
          if (imp[c] > gamma) frontier.insert(c);
        for (auto a : trace[k].active) ASSERT_TRUE(initial.count(a) || seen.count(a));
      }
    }
  }
}

TEST(Propagate, MonotoneInGamma) {
  for (int s = 0; s < 100; ++s) {
    std::mt19937_64 rng(500 + s);
    auto r = random_graph(rng);
    std::vector<double> imp(r.graph.size());
    for (auto& v : imp) v = std::uniform_real_distribution<double>(0, 1)(rng);
    const NodeSet initial{0};
    auto f = [&](kg::NodeId id) { return imp[id]; };
    NodeSet prev = kg::propagate(r.graph, initial, f, 0.0, 4);
    for (double gamma : {0.2, 0.4, 0.6, 0.8, 1.0}) {
      NodeSet cur = kg::propagate(r.graph, initial, f, gamma, 4);
      ASSERT_TRUE(std::includes(prev.begin(), prev.end(), cur.begin(), cur.end())) << "graph " << s;
      prev = cur;
    }
  }
}

TEST(Propagate, IndependentOfEdgeInsertionOrder) {
  std::mt19937_64 rng(77);
  auto r = random_graph(rng);
  auto edges = r.graph.edges();
  std::shuffle(edges.begin(), edges.end(), rng);
  KnowledgeGraph h;
  for (const auto& n : r.graph.nodes()) h.add_node(n.kind, n.name);
  for (const auto& e : edges) h.add_edge(e.relation, e.b, e.a);
  std::vector<double> imp(r.graph.size());
  for (auto& v : imp) v = std::uniform_real_distribution<double>(0, 1)(rng);
  auto f = [&](kg::NodeId id) { return imp[id]; };
  EXPECT_EQ(kg::propagate(r.graph, {0}, f, 0.4, 6), kg::propagate(h, {0}, f, 0.4, 6));
}

TEST(Importance, InUnitIntervalAndDeterministic) {
  kg::KgConfig cfg;
  ParameterStore<double> s1, s2;
  auto n1 = make_networks(s1, 5, 6, cfg, 3);
  auto n2 = make_networks(s2, 5, 6, cfg, 3);
  Tape<double> t;
  std::mt19937_64 rng(1);
  auto visual = t.constant(oracle::random_tensor({1, 6}, rng));
  auto a = n1.importance_all(t, s1, visual).value();
  auto b = n2.importance_all(t, s2, visual).value();
  EXPECT_EQ(a, b);
  for (double v : a.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  EXPECT_EQ(n1.importance(t, s1, 2, visual), a[2]);
  EXPECT_THROW(n1.importance(t, s1, 9, visual), LookupError);
}

TEST(Importance, ZeroOutputLayerGivesOneHalf) {
  kg::KgConfig cfg;
  ParameterStore<double> store;
  auto net = make_networks(store, 4, 3, cfg, 0);
  store[net.importance_out.weight].value.fill(0.0);
  store[net.importance_out.bias].value.fill(0.0);
  Tape<double> t;
  auto imp = net.importance_all(t, store, t.constant(Tensor<double>({1, 3}, 0.7))).value();
  for (double v : imp.data()) EXPECT_EQ(v, 0.5);
}

namespace {

kg::ContextSet<double> context_for(Tape<double>& t, ParameterStore<double>& store, const kg::KgNetworks& net,
                                   const NodeSet& active, const std::vector<double>& stub) {
  auto col = t.constant(Tensor<double>({stub.size(), 1}, stub));
  return net.context_vectors(t, store, active, col, t.constant(Tensor<double>({1, 3}, 0.2)));
}

void expect_zero_padding(const kg::ContextSet<double>& c, std::size_t n_max) {
  const auto& v = c.vectors.value();
  ASSERT_EQ(v.dim(0), n_max);
  for (std::size_t r = c.count; r < n_max; ++r)
    for (std::size_t k = 0; k < v.cols(); ++k) ASSERT_EQ(v(r, k), 0.0);
}

}  // namespace

TEST(Context, EmptyActiveSetIsAllZero) {
  kg::KgConfig cfg;
  cfg.n_max = 4;
  ParameterStore<double> store;
  auto net = make_networks(store, 6, 3, cfg, 1);
  Tape<double> t;
  auto c = context_for(t, store, net, {}, std::vector<double>(6, 0.5));
  EXPECT_EQ(c.count, 0u);
  expect_zero_padding(c, 4);
}

TEST(Context, FullActiveSetHasNoZeroRows) {
  kg::KgConfig cfg;
  cfg.n_max = 4;
  ParameterStore<double> store;
  auto net = make_networks(store, 6, 3, cfg, 1);
  Tape<double> t;
  auto c = context_for(t, store, net, {0, 2, 3, 5}, {0.9, 0.1, 0.8, 0.7, 0.1, 0.6});
  EXPECT_EQ(c.count, 4u);
  for (std::size_t r = 0; r < 4; ++r) {
    double norm = 0;
    for (std::size_t k = 0; k < cfg.context_dim; ++k) norm += std::abs(c.vectors.value()(r, k));
    EXPECT_GT(norm, 0.0);
  }
}

TEST(Context, TruncationKeepsHighestImportance) {
  kg::KgConfig cfg;
  cfg.n_max = 4;
  ParameterStore<double> store;
  auto net = make_networks(store, 8, 3, cfg, 1);
  for (int s = 0; s < 20; ++s) {
    std::mt19937_64 rng(s);
    std::vector<double> stub(8);
    for (auto& v : stub) v = std::uniform_real_distribution<double>(0.01, 0.99)(rng);
    if (s % 4 == 0) stub[5] = stub[2];  // tie broken by ascending id
    NodeSet active{0, 1, 2, 3, 5, 7};   // n_max + 2
    Tape<double> t;
    auto c = context_for(t, store, net, active, stub);
    // sort oracle
    std::vector<std::pair<double, std::size_t>> ranked;
    for (auto id : active) ranked.push_back({-stub[id], id});
    std::sort(ranked.begin(), ranked.end());
    std::vector<kg::NodeId> want;
    for (std::size_t i = 0; i < 4; ++i) want.push_back(ranked[i].second);
    EXPECT_EQ(c.nodes, want);
    EXPECT_EQ(c.count, 4u);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(c.importance[i], stub[want[i]]);
  }
}

TEST(Context, PaddingInvariantOnRandomSets) {
  kg::KgConfig cfg;
  cfg.n_max = 5;
  ParameterStore<double> store;
  auto net = make_networks(store, 9, 3, cfg, 2);
  for (int s = 0; s < 50; ++s) {
    std::mt19937_64 rng(s);
    NodeSet active;
    for (std::size_t i = 0; i < 9; ++i)
      if (std::bernoulli_distribution(0.4)(rng)) active.insert(i);
    std::vector<double> stub(9);
    for (auto& v : stub) v = std::uniform_real_distribution<double>(0.01, 0.99)(rng);
    Tape<double> t;
    auto c = context_for(t, store, net, active, stub);
    EXPECT_EQ(c.count, std::min<std::size_t>(active.size(), 5));
    expect_zero_padding(c, 5);
  }
}
