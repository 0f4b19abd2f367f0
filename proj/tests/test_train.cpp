#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "kgaa/checkpoint.hpp"
#include "kgaa/train.hpp"
#include "oracles.hpp"

using namespace kgaa;
namespace fs = std::filesystem;

namespace {

const std::string kRoot = KGAA_SOURCE_DIR;

struct Kitchen {
  kg::KnowledgeGraph graph = kg::KnowledgeGraph::load(kRoot + "/data/kitchen.graph");
  data::ActionGrammar grammar = data::ActionGrammar::load(kRoot + "/data/kitchen_grammar.json");
  std::vector<data::EpisodeSample> episodes = data::generate(grammar, 12, 4);
  std::vector<const data::EpisodeSample*> ptrs() const {
    std::vector<const data::EpisodeSample*> out;
    for (const auto& e : episodes) out.push_back(&e);
    return out;
  }
};

const Kitchen& kitchen() {
  static const Kitchen k;
  return k;
}

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.heads = 2;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.ffn_multiplier = 2;
  c.rect_hidden = 8;
  c.kg.embed_dim = 8;
  c.kg.context_dim = 8;
  c.kg.hidden = 8;
  return c;
}

double log_softmax_at(const Tensor<double>& logits, std::size_t row, int target) {
  double top = -1e300;
  for (std::size_t k = 0; k < logits.cols(); ++k) top = std::max(top, logits(row, k));
  double z = 0;
  for (std::size_t k = 0; k < logits.cols(); ++k) z += std::exp(logits(row, k) - top);
  return logits(row, static_cast<std::size_t>(target)) - top - std::log(z);
}

}  // namespace

TEST(Targets, PositionalMatching) {
  const std::vector<int> future{3, 3, 3, 5, 5, 2, 2, 2, 2, 2};
  auto t = match_targets(future, 5);
  EXPECT_EQ(t.actions, (std::vector<int>{3, 5, 2, 0, 0}));
  EXPECT_EQ(t.durations, (std::vector<double>{0.3, 0.2, 0.5, 0.0, 0.0}));
  EXPECT_THROW(match_targets(future, 2), ContractError);
  EXPECT_THROW(match_targets(std::vector<int>{}, 3), ContractError);
}

TEST(Loss, MatchesScalarOracle) {
  for (int s = 0; s < 20; ++s) {
    std::mt19937_64 rng(s);
    Tape<double> t;
    ForwardOutputs<double> out;
    const auto a_obs = oracle::random_tensor({4, 5}, rng, -3, 3);
    const auto a_pred = oracle::random_tensor({3, 5}, rng, -3, 3);
    auto d = oracle::random_tensor({3}, rng, 0, 1);
    out.a_obs = t.variable(a_obs);
    out.a_pred = t.variable(a_pred);
    out.d_pred = t.variable(d);
    const std::vector<int> observed{1, 1, 2, 4};
    const QueryTargets targets{{2, 3, 0}, {0.25, 0.75, 0.0}};
    const LossWeights w{0.7, 1.3, 10.0};
    double ce_obs = 0, ce_act = 0, sq = 0;
    for (std::size_t i = 0; i < 4; ++i) ce_obs -= log_softmax_at(a_obs, i, observed[i]);
    for (std::size_t i = 0; i < 3; ++i) ce_act -= log_softmax_at(a_pred, i, targets.actions[i]);
    for (std::size_t i = 0; i < 3; ++i) sq += (d[i] - targets.durations[i]) * (d[i] - targets.durations[i]);
    const double want = w.observed * ce_obs / 4 + w.action * ce_act / 3 + w.duration * sq;
    EXPECT_NEAR(anticipation_loss(out, observed, targets, w).value()[0], want, 1e-12);
  }
}

TEST(Loss, ConfidentCorrectLogitsGiveNearZeroLoss) {
  Tape<double> t;
  ForwardOutputs<double> out;
  Tensor<double> obs({2, 4}), pred({3, 4});
  obs(0, 1) = obs(1, 2) = 20;
  pred(0, 3) = pred(1, 0) = pred(2, 0) = 20;
  out.a_obs = t.variable(obs);
  out.a_pred = t.variable(pred);
  out.d_pred = t.variable(Tensor<double>({3}, std::vector<double>{1, 0, 0}));
  const QueryTargets targets{{3, 0, 0}, {1, 0, 0}};
  EXPECT_LT(anticipation_loss(out, std::vector<int>{1, 2}, targets, LossWeights{}).value()[0], 1e-6);
  EXPECT_THROW(anticipation_loss(out, std::vector<int>{1, 2}, QueryTargets{{3}, {1}}, LossWeights{}),
               ContractError);
}

TEST(Loss, InvalidWeightsRejected) {
  EXPECT_THROW((LossWeights{-1, 1, 1}.validate()), ConfigError);
  EXPECT_THROW((LossWeights{0, 0, 0}.validate()), ConfigError);
}

TEST(Windows, TrainingWindowArithmetic) {
  auto w = training_window(100, 0.05, 0.5);
  EXPECT_EQ(w.observed_end, 5u);
  EXPECT_EQ(w.target_end, 55u);
  EXPECT_EQ(training_window(100, 0.7, 0.5).target_end, 100u);
  EXPECT_THROW(training_window(10, 1.0, 0.5), RangeError);
}

TEST(Adam, MatchesScalarUpdate) {
  ParameterStore<double> store;
  store.add("x", Tensor<double>({1}, 2.0));
  Adam<double> adam(store, AdamOptions{0.1, 0.9, 0.999, 1e-8});
  double x = 2.0, m = 0, v = 0;
  for (int k = 1; k <= 10; ++k) {
    store.zero_grad();
    Tape<double> t;
    auto p = t.param(store[0]);
    t.backward(sum(mul(p, p)));
    adam.step(store);
    const double g = 2 * x;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    x -= 0.1 * (m / (1 - std::pow(0.9, k))) / (std::sqrt(v / (1 - std::pow(0.999, k))) + 1e-8);
    EXPECT_NEAR(store[0].value[0], x, 1e-12);
  }
}

TEST(Checkpoint, RoundTripAndErrors) {
  Checkpoint ck;
  ck.put("a", Tensor<double>({2, 2}, std::vector<double>{1, 2, 3, 4}));
  ck.put("b.c", Shape{3}, {0.5f, -0.0f, 1e30f});
  const auto bytes = ck.serialize();
  auto back = Checkpoint::deserialize(bytes, "ck");
  EXPECT_EQ(back.tensor<double>("a"), ck.tensor<double>("a"));
  EXPECT_EQ(back.at("b.c").values, ck.at("b.c").values);
  EXPECT_THROW(back.at("missing"), LookupError);

  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(Checkpoint::deserialize(bad, "ck"), DataError);
  EXPECT_THROW(Checkpoint::deserialize({bytes.begin(), bytes.end() - 2}, "ck"), DataError);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(Checkpoint::deserialize(bad, "ck"), DataError);
  bad = bytes;
  bad[8] = 9;
  EXPECT_THROW(Checkpoint::deserialize(bad, "ck"), DataError);
  EXPECT_THROW(Checkpoint::load("/nonexistent/x.ckpt"), DataError);
  EXPECT_THROW(ck.put("z", Shape{2}, {1.0f}), DimensionError);
}

TEST(Checkpoint, ModelParametersRoundTrip) {
  const auto& k = kitchen();
  Model<float> a(small_config(), k.graph.size(), 1), b(small_config(), k.graph.size(), 2);
  Checkpoint ck;
  store_to_checkpoint(a.params(), ck);
  const auto file = fs::path(::testing::TempDir()) / "kgaa_model.ckpt";
  ck.save(file);
  load_store(b.params(), Checkpoint::load(file));
  for (std::size_t i = 0; i < a.params().size(); ++i) EXPECT_EQ(a.params()[i].value, b.params()[i].value);

  auto other = small_config();
  other.d_model = 8;
  Model<float> c(other, k.graph.size(), 0);
  EXPECT_THROW(load_store(c.params(), ck), DimensionError);
  auto per_head = small_config();
  per_head.per_head_rectification = true;
  Model<float> d(per_head, k.graph.size(), 0);
  EXPECT_THROW(load_store(d.params(), ck), DimensionError);
  Checkpoint partial;
  partial.put("input.weight", a.params()[0].value);
  EXPECT_THROW(load_store(b.params(), partial), DataError);
}

TEST(Trainer, LossDecreases) {
  const auto& k = kitchen();
  Model<float> model(small_config(), k.graph.size(), 3);
  TrainOptions opt;
  opt.batch_size = 4;
  opt.seed = 3;
  Trainer<float> trainer(model, k.graph, opt);
  const auto eps = k.ptrs();
  double first = 0, last = 0;
  for (int s = 0; s < 60; ++s) {
    const double l = trainer.step(eps);
    if (s < 5) first += l;
    if (s >= 55) last += l;
  }
  EXPECT_LT(last, 0.7 * first);
  EXPECT_EQ(trainer.steps_done(), 60u);
}

TEST(Trainer, ResumeFollowsUninterruptedRun) {
  const auto& k = kitchen();
  const auto eps = k.ptrs();
  for (bool use_kg : {true, false}) {
    TrainOptions opt;
    opt.batch_size = 3;
    opt.seed = 11;
    opt.use_kg = use_kg;
    Model<float> straight(small_config(), k.graph.size(), 5);
    Trainer<float> t1(straight, k.graph, opt);
    for (int s = 0; s < 6; ++s) t1.step(eps);

    Model<float> first(small_config(), k.graph.size(), 5);
    Trainer<float> t2(first, k.graph, opt);
    for (int s = 0; s < 3; ++s) t2.step(eps);
    Checkpoint ck;
    t2.save_state(ck);
    const auto file = fs::path(::testing::TempDir()) / "kgaa_resume.ckpt";
    ck.save(file);

    Model<float> resumed(small_config(), k.graph.size(), 99);
    Trainer<float> t3(resumed, k.graph, opt);
    t3.load_state(Checkpoint::load(file));
    EXPECT_EQ(t3.steps_done(), 3u);
    for (int s = 0; s < 3; ++s) t3.step(eps);
    for (std::size_t i = 0; i < straight.params().size(); ++i)
      ASSERT_EQ(straight.params()[i].value, resumed.params()[i].value) << straight.params()[i].path;
  }
}

TEST(Trainer, NonFiniteLossIsNumericError) {
  const auto& k = kitchen();
  Model<float> model(small_config(), k.graph.size(), 3);
  model.params()[0].value.fill(std::numeric_limits<float>::quiet_NaN());
  Trainer<float> trainer(model, k.graph, TrainOptions{});
  EXPECT_THROW(trainer.step(k.ptrs()), NumericError);
}

TEST(Trainer, InvalidOptionsRejected) {
  const auto& k = kitchen();
  Model<float> model(small_config(), k.graph.size(), 3);
  TrainOptions opt;
  opt.alphas.clear();
  EXPECT_THROW(Trainer<float>(model, k.graph, opt), ConfigError);
  opt = TrainOptions{};
  opt.batch_size = 0;
  EXPECT_THROW(Trainer<float>(model, k.graph, opt), ConfigError);
  Trainer<float> ok(model, k.graph, TrainOptions{});
  EXPECT_THROW(ok.step({}), ContractError);
}

TEST(Forecast, DecodesToRequestedHorizon) {
  const auto& k = kitchen();
  Model<float> model(small_config(), k.graph.size(), 3);
  const auto& ep = k.episodes[0];
  PredictionBundle<float> bundle;
  auto fc = model_forecast(model, k.graph, ep, 10, 37, true, &bundle);
  EXPECT_EQ(fc.future.size(), 37u);
  EXPECT_EQ(bundle.a_obs.rows(), 10u);
  EXPECT_EQ(fc.last_observed, data::argmax_rows(bundle.a_obs).back());
  EXPECT_THROW(model_forecast(model, k.graph, ep, 0, 5, true), RangeError);
}
