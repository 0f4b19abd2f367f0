#pragma once

// Transformer encoder-decoder for action anticipation whose attention logits
// are rectified by matrices produced from knowledge-graph context:
//
//   attention(Q, K, V; R) = softmax(Q R K^T / sqrt(d_k)) V
//
// The encoder self-attention uses R_e, the decoder cross-attention uses R_d.
// Both come from separate LSTM rectifiers over the same context set and are
// parameterised as R = I + dR, with dR produced by a zero-initialised head.

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "kgaa/autograd.hpp"
#include "kgaa/errors.hpp"
#include "kgaa/knowledge_graph.hpp"
#include "kgaa/nn.hpp"

namespace kgaa {

struct ModelConfig {
  std::size_t d_model = 32;
  std::size_t heads = 4;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t queries = 8;
  std::size_t classes = 13;  // includes the `none` class
  std::size_t feature_dim = 64;
  std::size_t max_positions = 256;
  std::size_t ffn_multiplier = 4;
  std::size_t rect_hidden = 32;
  double rect_forget_bias = 3.0;  // added to the LSTM forget-gate bias at init
  double dropout = 0.1;
  bool per_head_rectification = false;
  bool decoder_self_attention = true;
  bool positional_encoding = true;
  kg::KgConfig kg;

  std::size_t d_k() const { return d_model / heads; }

  void validate() const {
    if (heads == 0 || d_model == 0 || d_model % heads != 0) {
      throw ConfigError("model: d_model (" + std::to_string(d_model) +
                        ") must be a positive multiple of heads (" + std::to_string(heads) + ")");
    }
    if (queries < 2) throw ConfigError("model: need at least two decoder queries");
    if (classes < 2) throw ConfigError("model: need at least two classes");
    if (feature_dim == 0 || max_positions == 0) throw ConfigError("model: zero-sized input");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must lie in [0, 1)");
    if (kg.n_max == 0) throw ConfigError("model: n_max must be positive");
    if (kg.gamma < 0.0 || kg.gamma > 1.0) throw ConfigError("model: gamma must lie in [0, 1]");
    if (kg.steps < 0) throw ConfigError("model: propagation steps must be non-negative");
  }
};

inline constexpr int kNoneClass = 0;

template <class T>
struct PredictionBundle {
  Tensor<T> a_obs;   // [N_obs × classes]
  Tensor<T> a_pred;  // [queries × classes]
  Tensor<T> d_pred;  // [queries], on the simplex
};

template <class T>
struct ObservedWindow {
  Tensor<T> features;                          // [N_obs × feature_dim]
  std::vector<std::vector<std::string>> scenes;  // visible objects per observed frame
  std::size_t first_frame = 0;
};

struct AttentionRecord {
  std::string site;  // e.g. "encoder.0.self", "decoder.1.cross"
  std::size_t head = 0;
  Tensor<double> weights;
};

struct AttentionTrace {
  std::vector<AttentionRecord> attention;
  std::vector<Tensor<double>> rect_encoder, rect_decoder;
  std::vector<kg::NodeId> context_nodes;
  std::vector<double> context_importance;
};

template <class T>
struct AttentionResult {
  Var<T> output;
  Var<T> weights;
};

// softmax(Q R K^T / sqrt(d_k)) V for Q[a×d_k], K[b×d_k], V[b×d_v], R[d_k×d_k].
template <class T>
AttentionResult<T> kg_attention(Var<T> q, Var<T> k, Var<T> v, Var<T> r) {
  const std::size_t dk = q.value().cols();
  if (r.value().rank() != 2 || r.value().dim(0) != dk || r.value().dim(1) != dk) {
    throw DimensionError("kg_attention: rectification " + shape_str(r.shape()) +
                         " incompatible with queries " + shape_str(q.shape()));
  }
  Var<T> logits = scale(matmul(matmul(q, r), transpose(k)), T(1) / std::sqrt(T(dk)));
  Var<T> weights = softmax(logits, 1);
  return {matmul(weights, v), weights};
}

// Standard scaled dot-product attention.
template <class T>
AttentionResult<T> scaled_dot_attention(Var<T> q, Var<T> k, Var<T> v) {
  const std::size_t dk = q.value().cols();
  Var<T> logits = scale(matmul(q, transpose(k)), T(1) / std::sqrt(T(dk)));
  Var<T> weights = softmax(logits, 1);
  return {matmul(weights, v), weights};
}

struct AttentionBlock {
  Dense query, key, value, output;

  template <class T, class Rng>
  static AttentionBlock create(ParameterStore<T>& store, const std::string& path, std::size_t d,
                               Rng& rng) {
    return {Dense::create(store, path + ".query", d, d, rng),
            Dense::create(store, path + ".key", d, d, rng),
            Dense::create(store, path + ".value", d, d, rng),
            Dense::create(store, path + ".output", d, d, rng)};
  }
  static std::size_t count(std::size_t d) { return 4 * Dense::count(d, d); }
};

struct EncoderLayer {
  AttentionBlock attention;
  LayerNorm norm1;
  Dense ff1, ff2;
  LayerNorm norm2;
};

struct DecoderLayer {
  AttentionBlock self_attention;
  LayerNorm norm1;
  AttentionBlock cross_attention;
  LayerNorm norm2;
  Dense ff1, ff2;
  LayerNorm norm3;
};

struct Rectifier {
  Lstm lstm;
  Dense head;
};

struct ForwardOptions {
  bool use_kg = true;
  bool training = false;
  std::mt19937_64* rng = nullptr;  // dropout source, required when training
  AttentionTrace* trace = nullptr;
};

template <class T>
struct ForwardOutputs {
  Var<T> a_obs, a_pred, d_pred;
  std::vector<Var<T>> rect_encoder, rect_decoder;
  kg::NodeSet active;
  std::size_t context_count = 0;
};

template <class T>
class Model {
 public:
  Model(ModelConfig cfg, std::size_t graph_nodes, std::uint64_t seed)
      : config_(std::move(cfg)), graph_nodes_(graph_nodes) {
    config_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = config_.d_model, f = config_.feature_dim;
    const std::size_t hidden = config_.ffn_multiplier * d;
    input_ = Dense::create(store_, "input", f, d, rng);
    positions_ = store_.add("positions", uniform_tensor<T>({config_.max_positions, d}, 1.0, rng));
    for (std::size_t l = 0; l < config_.encoder_layers; ++l) {
      const std::string p = "encoder." + std::to_string(l);
      EncoderLayer layer;
      layer.attention = AttentionBlock::create(store_, p + ".attention", d, rng);
      layer.norm1 = LayerNorm::create(store_, p + ".norm1", d);
      layer.ff1 = Dense::create(store_, p + ".ff1", d, hidden, rng);
      layer.ff2 = Dense::create(store_, p + ".ff2", hidden, d, rng);
      layer.norm2 = LayerNorm::create(store_, p + ".norm2", d);
      encoder_.push_back(layer);
    }
    queries_ = store_.add("queries", uniform_tensor<T>({config_.queries, d},
                                                       1.0 / std::sqrt(double(d)), rng));
    for (std::size_t l = 0; l < config_.decoder_layers; ++l) {
      const std::string p = "decoder." + std::to_string(l);
      DecoderLayer layer;
      layer.self_attention = AttentionBlock::create(store_, p + ".self_attention", d, rng);
      layer.norm1 = LayerNorm::create(store_, p + ".norm1", d);
      layer.cross_attention = AttentionBlock::create(store_, p + ".cross_attention", d, rng);
      layer.norm2 = LayerNorm::create(store_, p + ".norm2", d);
      layer.ff1 = Dense::create(store_, p + ".ff1", d, hidden, rng);
      layer.ff2 = Dense::create(store_, p + ".ff2", hidden, d, rng);
      layer.norm3 = LayerNorm::create(store_, p + ".norm3", d);
      decoder_.push_back(layer);
    }
    obs_head_ = Dense::create(store_, "head.observed", d, config_.classes, rng);
    act_head_ = Dense::create(store_, "head.action", d, config_.classes, rng);
    dur_head_ = Dense::create(store_, "head.duration", d, 1, rng);
    kg_ = kg::KgNetworks::create(store_, "kg", graph_nodes, f, config_.kg, rng);
    const std::size_t rect_out = rect_outputs();
    for (auto* r : {&rect_encoder_, &rect_decoder_}) {
      const std::string p = r == &rect_encoder_ ? "rectifier.encoder" : "rectifier.decoder";
      r->lstm = Lstm::create(store_, p + ".lstm", config_.kg.context_dim, config_.rect_hidden, rng,
                            config_.rect_forget_bias);
      r->head = Dense::create(store_, p + ".head", config_.rect_hidden, rect_out, rng, true);
    }
  }

  const ModelConfig& config() const { return config_; }
  std::size_t graph_nodes() const { return graph_nodes_; }
  ParameterStore<T>& params() { return store_; }
  const ParameterStore<T>& params() const { return store_; }
  const kg::KgNetworks& kg_networks() const { return kg_; }

  // Closed-form parameter count for a configuration.
  static std::size_t parameter_count(const ModelConfig& c, std::size_t graph_nodes) {
    const std::size_t d = c.d_model, f = c.feature_dim, h = c.ffn_multiplier * d;
    const std::size_t dk = c.d_model / c.heads;
    const std::size_t rect_out = (c.per_head_rectification ? c.heads : 1) * dk * dk;
    const std::size_t ffn = Dense::count(d, h) + Dense::count(h, d);
    const std::size_t enc = AttentionBlock::count(d) + ffn + 2 * LayerNorm::count(d);
    const std::size_t dec = 2 * AttentionBlock::count(d) + ffn + 3 * LayerNorm::count(d);
    return Dense::count(f, d) + c.max_positions * d + c.encoder_layers * enc + c.queries * d +
           c.decoder_layers * dec + 2 * Dense::count(d, c.classes) + Dense::count(d, 1) +
           kg::KgNetworks::count(graph_nodes, f, c.kg) +
           2 * (Lstm::count(c.kg.context_dim, c.rect_hidden) + Dense::count(c.rect_hidden, rect_out));
  }

  // x0 = features · W_f + b + positional row per frame index.
  Var<T> project_input(Tape<T>& tape, Var<T> features, std::size_t first_frame = 0) {
    if (features.value().rank() != 2 || features.value().cols() != config_.feature_dim) {
      throw DimensionError("project_input: features " + shape_str(features.shape()) +
                           " do not have " + std::to_string(config_.feature_dim) + " columns");
    }
    Var<T> x = input_(tape, store_, features);
    if (!config_.positional_encoding) return x;
    const std::size_t n = features.value().rows();
    if (first_frame + n > config_.max_positions) {
      throw DimensionError("project_input: " + std::to_string(first_frame + n) +
                           " frames exceed max_positions " + std::to_string(config_.max_positions));
    }
    return add(x, slice(tape.param(store_[positions_]), 0, first_frame, first_frame + n));
  }

  // LSTM over the context rows, then R = I + reshape(head(h_final)).
  std::vector<Var<T>> rectification(Tape<T>& tape, const Rectifier& r, Var<T> context) {
    const std::size_t dk = config_.d_k();
    if (context.value().rank() != 2 || context.value().dim(0) != config_.kg.n_max ||
        context.value().dim(1) != config_.kg.context_dim) {
      throw DimensionError("rectification: context " + shape_str(context.shape()) + " expected [" +
                           std::to_string(config_.kg.n_max) + "x" +
                           std::to_string(config_.kg.context_dim) + "]");
    }
    Var<T> h = r.lstm(tape, store_, context);
    Var<T> delta = r.head(tape, store_, h);
    Var<T> eye = tape.constant(Tensor<T>::identity(dk));
    std::vector<Var<T>> out;
    const std::size_t count = config_.per_head_rectification ? config_.heads : 1;
    for (std::size_t i = 0; i < count; ++i) {
      Var<T> block = reshape(slice(delta, 1, i * dk * dk, (i + 1) * dk * dk), {dk, dk});
      out.push_back(add(eye, block));
    }
    return out;
  }

  std::vector<Var<T>> rectification_encoder(Tape<T>& tape, Var<T> context) {
    return rectification(tape, rect_encoder_, context);
  }
  std::vector<Var<T>> rectification_decoder(Tape<T>& tape, Var<T> context) {
    return rectification(tape, rect_decoder_, context);
  }

  std::vector<Var<T>> identity_rectification(Tape<T>& tape) const {
    const std::size_t count = config_.per_head_rectification ? config_.heads : 1;
    std::vector<Var<T>> out;
    for (std::size_t i = 0; i < count; ++i)
      out.push_back(tape.constant(Tensor<T>::identity(config_.d_k())));
    return out;
  }

  // Multi-head attention; an empty `rect` means plain scaled dot-product.
  Var<T> multi_head(Tape<T>& tape, const AttentionBlock& b, Var<T> xq, Var<T> xkv,
                    const std::vector<Var<T>>& rect, const ForwardOptions& opt,
                    const std::string& site) {
    const std::size_t dk = config_.d_k();
    Var<T> q = b.query(tape, store_, xq);
    Var<T> k = b.key(tape, store_, xkv);
    Var<T> v = b.value(tape, store_, xkv);
    std::vector<Var<T>> heads;
    for (std::size_t h = 0; h < config_.heads; ++h) {
      Var<T> qh = slice(q, 1, h * dk, (h + 1) * dk);
      Var<T> kh = slice(k, 1, h * dk, (h + 1) * dk);
      Var<T> vh = slice(v, 1, h * dk, (h + 1) * dk);
      AttentionResult<T> res = rect.empty()
                                   ? scaled_dot_attention(qh, kh, vh)
                                   : kg_attention(qh, kh, vh, rect[rect.size() == 1 ? 0 : h]);
      if (opt.trace) opt.trace->attention.push_back({site, h, Tensor<double>::cast(res.weights.value())});
      heads.push_back(res.output);
    }
    return b.output(tape, store_, concat(heads, 1));
  }

  Var<T> encode(Tape<T>& tape, Var<T> x, const std::vector<Var<T>>& rect,
                const ForwardOptions& opt = {}) {
    if (x.value().rows() == 0) throw ContractError("encode: no observed frames");
    for (std::size_t l = 0; l < encoder_.size(); ++l) {
      const EncoderLayer& layer = encoder_[l];
      Var<T> a = multi_head(tape, layer.attention, x, x, rect, opt,
                            "encoder." + std::to_string(l) + ".self");
      x = layer.norm1(tape, store_, add(x, drop(a, opt)));
      Var<T> f = layer.ff2(tape, store_, gelu(layer.ff1(tape, store_, x)));
      x = layer.norm2(tape, store_, add(x, drop(f, opt)));
    }
    return x;
  }

  Var<T> decode(Tape<T>& tape, Var<T> encoded, const std::vector<Var<T>>& rect,
                const ForwardOptions& opt = {}) {
    Var<T> q = tape.param(store_[queries_]);
    for (std::size_t l = 0; l < decoder_.size(); ++l) {
      const DecoderLayer& layer = decoder_[l];
      const std::string p = "decoder." + std::to_string(l);
      if (config_.decoder_self_attention) {
        Var<T> s = multi_head(tape, layer.self_attention, q, q, {}, opt, p + ".self");
        q = layer.norm1(tape, store_, add(q, drop(s, opt)));
      }
      Var<T> c = multi_head(tape, layer.cross_attention, q, encoded, rect, opt, p + ".cross");
      q = layer.norm2(tape, store_, add(q, drop(c, opt)));
      Var<T> f = layer.ff2(tape, store_, gelu(layer.ff1(tape, store_, q)));
      q = layer.norm3(tape, store_, add(q, drop(f, opt)));
    }
    return q;
  }

  // a_obs per observed frame, a_pred per query, d_pred = softmax over queries.
  void heads(Tape<T>& tape, Var<T> encoded, Var<T> q, ForwardOutputs<T>& out) {
    out.a_obs = obs_head_(tape, store_, encoded);
    out.a_pred = act_head_(tape, store_, q);
    Var<T> logits = reshape(dur_head_(tape, store_, q), {1, config_.queries});
    out.d_pred = reshape(softmax(logits, 1), {config_.queries});
  }

  // Graph pathway: detect -> propagate -> context set. Returns the context.
  kg::ContextSet<T> knowledge_context(Tape<T>& tape, const kg::KnowledgeGraph& graph,
                                      const ObservedWindow<T>& window, Var<T> features,
                                      kg::NodeSet* active_out = nullptr) {
    if (graph.size() != graph_nodes_) {
      throw DimensionError("model was built for " + std::to_string(graph_nodes_) +
                           " graph nodes, graph has " + std::to_string(graph.size()));
    }
    const auto& kc = config_.kg;
    Var<T> visual = mean_rows(features);
    Var<T> importance = kg_.importance_all(tape, store_, visual);
    auto lookup = [&](const Tensor<T>& imp) {
      return [&imp](kg::NodeId id) { return static_cast<double>(imp[id]); };
    };
    kg::NodeSet active;
    if (kc.per_frame) {
      for (std::size_t i = 0; i < window.scenes.size(); ++i) {
        Var<T> frame_visual = slice(features, 0, i, i + 1);
        Tensor<T> imp = kg_.importance_all(tape, store_, frame_visual).value();
        const auto initial = kg::detect_objects(graph, {window.scenes[i]});
        const auto got = kg::propagate(graph, initial, lookup(imp), kc.gamma, kc.steps);
        active.insert(got.begin(), got.end());
      }
    } else {
      kg::SceneAnnotation scene;
      for (const auto& s : window.scenes) scene.objects.insert(scene.objects.end(), s.begin(), s.end());
      const auto initial = kg::detect_objects(graph, scene);
      active = kg::propagate(graph, initial, lookup(importance.value()), kc.gamma, kc.steps);
    }
    if (active_out) *active_out = active;
    const std::size_t last = window.first_frame + window.features.rows() - 1;
    return kg_.context_vectors(tape, store_, active, importance, visual, last);
  }

  ForwardOutputs<T> forward(Tape<T>& tape, const kg::KnowledgeGraph& graph,
                            const ObservedWindow<T>& window, const ForwardOptions& opt = {}) {
    if (window.features.rows() == 0 || window.features.rank() != 2) {
      throw ContractError("forward: window has no observed frames");
    }
    if (opt.training && config_.dropout > 0.0 && !opt.rng) {
      throw ContractError("forward: training mode needs a dropout generator");
    }
    ForwardOutputs<T> out;
    Var<T> features = tape.constant(window.features);
    if (opt.use_kg) {
      auto ctx = knowledge_context(tape, graph, window, features, &out.active);
      out.context_count = ctx.count;
      out.rect_encoder = rectification_encoder(tape, ctx.vectors);
      out.rect_decoder = rectification_decoder(tape, ctx.vectors);
      if (opt.trace) {
        opt.trace->context_nodes = ctx.nodes;
        opt.trace->context_importance.assign(ctx.importance.begin(), ctx.importance.end());
      }
    } else {
      out.rect_encoder = identity_rectification(tape);
      out.rect_decoder = identity_rectification(tape);
    }
    if (opt.trace) {
      for (auto& r : out.rect_encoder) opt.trace->rect_encoder.push_back(Tensor<double>::cast(r.value()));
      for (auto& r : out.rect_decoder) opt.trace->rect_decoder.push_back(Tensor<double>::cast(r.value()));
    }
    Var<T> x0 = project_input(tape, features, window.first_frame);
    Var<T> encoded = encode(tape, x0, out.rect_encoder, opt);
    Var<T> q = decode(tape, encoded, out.rect_decoder, opt);
    heads(tape, encoded, q, out);
    return out;
  }

  PredictionBundle<T> predict(const kg::KnowledgeGraph& graph, const ObservedWindow<T>& window,
                              bool use_kg, AttentionTrace* trace = nullptr) {
    Tape<T> tape;
    ForwardOptions opt;
    opt.use_kg = use_kg;
    opt.trace = trace;
    auto out = forward(tape, graph, window, opt);
    return {out.a_obs.value(), out.a_pred.value(), out.d_pred.value()};
  }

 private:
  std::size_t rect_outputs() const {
    const std::size_t dk = config_.d_k();
    return (config_.per_head_rectification ? config_.heads : 1) * dk * dk;
  }

  Var<T> drop(Var<T> x, const ForwardOptions& opt) {
    if (!opt.training || config_.dropout <= 0.0) return x;
    return dropout(x, static_cast<T>(config_.dropout), *opt.rng);
  }

  ModelConfig config_;
  std::size_t graph_nodes_ = 0;
  ParameterStore<T> store_;
  Dense input_;
  std::size_t positions_ = 0;
  std::vector<EncoderLayer> encoder_;
  std::size_t queries_ = 0;
  std::vector<DecoderLayer> decoder_;
  Dense obs_head_, act_head_, dur_head_;
  kg::KgNetworks kg_;
  Rectifier rect_encoder_, rect_decoder_;
};

}  // namespace kgaa
