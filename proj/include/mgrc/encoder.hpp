#pragma once

// Graph encoder: token embedding, bottom-up graph initialization, then
// n_layers blocks of (token / sentence / paragraph self-attention ->
// cross-level integration -> feed-forward over [pre || post]).

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mgrc/docgraph.hpp"
#include "mgrc/params.hpp"

namespace mgrc {

struct EncoderConfig {
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t n_layers = 2;
  std::size_t d_ff = 256;
  double dropout = 0.1;
  std::size_t vocab_size = 0;
  std::size_t max_position = 512;
  GraphConfig graph;
  double init_std = 0.02;
  /// Run an integration pass after each of the three self-attention passes
  /// instead of once per layer.
  bool integrate_each_sublayer = false;
  // Ablation switches.
  bool relational = true;
  bool self_attention = true;
  bool integration = true;

  std::size_t d_head() const { return d_model / heads; }

  void validate() const {
    if (heads == 0 || d_model == 0 || d_model % heads != 0)
      throw ContractError("d_model " + std::to_string(d_model) + " is not divisible by " + std::to_string(heads) + " heads");
    if (d_model < 2) throw ContractError("d_model must be at least 2");
    if (d_ff < d_model) throw ContractError("d_ff must be >= d_model");
    if (vocab_size == 0) throw ContractError("vocab_size is unset");
    if (max_position == 0) throw ContractError("max_position is unset");
    if (dropout < 0.0 || dropout >= 1.0) throw ContractError("dropout must lie in [0, 1)");
    if (graph.token_window < 0 || graph.sentence_window < 0 || graph.paragraph_window < 0)
      throw ContractError("negative relative-position window");
  }
};

inline nlohmann::json to_json(const EncoderConfig& c) {
  return {{"d_model", c.d_model},
          {"heads", c.heads},
          {"n_layers", c.n_layers},
          {"d_ff", c.d_ff},
          {"dropout", c.dropout},
          {"vocab_size", c.vocab_size},
          {"max_position", c.max_position},
          {"token_window", c.graph.token_window},
          {"sentence_window", c.graph.sentence_window},
          {"paragraph_window", c.graph.paragraph_window},
          {"ordinal_clip", c.graph.ordinal_clip},
          {"init_std", c.init_std},
          {"integrate_each_sublayer", c.integrate_each_sublayer},
          {"relational", c.relational},
          {"self_attention", c.self_attention},
          {"integration", c.integration}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("d_model", c.d_model);
  get("heads", c.heads);
  get("n_layers", c.n_layers);
  get("d_ff", c.d_ff);
  get("dropout", c.dropout);
  get("vocab_size", c.vocab_size);
  get("max_position", c.max_position);
  get("token_window", c.graph.token_window);
  get("sentence_window", c.graph.sentence_window);
  get("paragraph_window", c.graph.paragraph_window);
  get("ordinal_clip", c.graph.ordinal_clip);
  get("init_std", c.init_std);
  get("integrate_each_sublayer", c.integrate_each_sublayer);
  get("relational", c.relational);
  get("self_attention", c.self_attention);
  get("integration", c.integration);
  return c;
}

namespace detail {

inline constexpr std::array<const char*, 3> kSelfSublayers{"tok", "sent", "para"};

inline std::string layer_prefix(std::size_t layer, const std::string& sub) {
  return "L" + std::to_string(layer) + "." + sub;
}

inline void attention_specs(std::vector<ParamSpec>& out, const EncoderConfig& c, const std::string& prefix,
                            std::size_t buckets, bool norm) {
  const std::size_t d = c.d_model, dz = c.d_head();
  for (std::size_t h = 0; h < c.heads; ++h) {
    const std::string hp = prefix + ".h" + std::to_string(h);
    out.push_back({hp + ".wq", {d, dz}});
    out.push_back({hp + ".wk", {d, dz}});
    out.push_back({hp + ".wv", {d, dz}});
  }
  out.push_back({prefix + ".rel_k", {buckets, dz}});
  out.push_back({prefix + ".rel_v", {buckets, dz}});
  out.push_back({prefix + ".wo", {d, d}});
  out.push_back({prefix + ".bo", {d}, InitKind::kZero});
  if (norm) {
    out.push_back({prefix + ".ln_g", {d}, InitKind::kOne});
    out.push_back({prefix + ".ln_b", {d}, InitKind::kZero});
  }
}

}  // namespace detail

/// Every encoder parameter with its shape.
inline std::vector<ParamSpec> encoder_param_specs(const EncoderConfig& c) {
  const std::size_t d = c.d_model;
  std::vector<ParamSpec> out{
      {"embed.token", {c.vocab_size, d}},
      {"embed.position", {c.max_position, d}},
      {"init.rel.sentence", {c.graph.ordinal_buckets(), d}},
      {"init.rel.paragraph", {c.graph.ordinal_buckets(), d}},
      {"init.rel.document", {c.graph.ordinal_buckets(), d}},
      {"init.type", {kNumNodeTypes, d}},
  };
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    for (std::size_t k = 0; k < 3; ++k)
      detail::attention_specs(out, c, detail::layer_prefix(l, detail::kSelfSublayers[k]),
                              c.graph.self_buckets(static_cast<NodeType>(k)), true);
    if (c.integrate_each_sublayer)
      for (std::size_t k = 0; k < 2; ++k)
        detail::attention_specs(out, c, detail::layer_prefix(l, "integ" + std::to_string(k)),
                                c.graph.integration_buckets(), true);
    detail::attention_specs(out, c, detail::layer_prefix(l, "integ"), c.graph.integration_buckets(), false);
    const std::string f = detail::layer_prefix(l, "ffn");
    out.push_back({f + ".w1", {2 * d, c.d_ff}});
    out.push_back({f + ".b1", {c.d_ff}, InitKind::kZero});
    out.push_back({f + ".w2", {c.d_ff, d}});
    out.push_back({f + ".b2", {d}, InitKind::kZero});
    out.push_back({f + ".ln_g", {d}, InitKind::kOne});
    out.push_back({f + ".ln_b", {d}, InitKind::kZero});
  }
  return out;
}

template <class T>
void init_encoder_params(ParamStore<T>& store, const EncoderConfig& c, std::uint64_t seed) {
  c.validate();
  init_params(store, encoder_param_specs(c), c.init_std, seed);
}

// ---------------------------------------------------------------------------
// Attention

template <class T>
struct HeadTrace {
  Tensor<T> scores;   // e_ij, n x n (entries outside the neighbor set are meaningless)
  Tensor<T> weights;  // alpha_ij, exactly 0 outside the neighbor set
  Tensor<T> output;   // z_i, n x d_z
};

template <class T>
struct SublayerTrace {
  std::string name;
  std::vector<NodeId> nodes;
  std::shared_ptr<const Mask> mask;
  std::vector<HeadTrace<T>> heads;
  Tensor<T> concat;  // z'_i
};

template <class T>
using AttentionTrace = std::vector<SublayerTrace<T>>;

/// Precomputed attention structures for one graph.
struct GraphStructures {
  std::array<AttentionStructure, 3> self;
  AttentionStructure integration;
};

inline GraphStructures build_structures(const HierGraph& g) {
  GraphStructures s;
  for (std::size_t k = 0; k < 3; ++k) s.self[k] = self_attention_structure(g, static_cast<NodeType>(k));
  s.integration = integration_structure(g);
  return s;
}

/// Multi-head relational graph attention over the rows of `x` (ordered as
/// `s.nodes`), followed by the output projection and dropout.
template <class T>
Var<T> gat_attention(Bound<T>& p, const EncoderConfig& cfg, const std::string& prefix, Var<T> x,
                     const AttentionStructure& s, AttentionTrace<T>* trace = nullptr) {
  const std::size_t n = s.size();
  if (x.value().rows() != n) throw ShapeError(prefix + ": state rows do not match the attention structure");
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.d_head())));
  std::optional<Var<T>> rel_k_t, rel_v;
  if (cfg.relational) {
    rel_k_t = transpose(p(prefix + ".rel_k"));
    rel_v = p(prefix + ".rel_v");
  }
  SublayerTrace<T>* st = nullptr;
  if (trace) {
    trace->push_back({prefix, s.nodes, s.mask, {}, {}});
    st = &trace->back();
  }
  std::vector<Var<T>> outs;
  outs.reserve(cfg.heads);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const std::string hp = prefix + ".h" + std::to_string(h);
    Var<T> q = matmul(x, p(hp + ".wq"));
    Var<T> k = matmul(x, p(hp + ".wk"));
    Var<T> v = matmul(x, p(hp + ".wv"));
    Var<T> e = matmul(q, transpose(k));
    if (rel_k_t) e = add(e, gather_buckets(matmul(q, *rel_k_t), s.bucket, s.mask, n));
    e = scale(e, inv_sqrt);
    Var<T> a = masked_softmax(e, *s.mask);
    Var<T> z = matmul(a, v);
    if (rel_v) z = add(z, matmul(bucket_sum(a, s.bucket, s.mask, s.num_buckets), *rel_v));
    if (st) st->heads.push_back({e.value(), a.value(), z.value()});
    outs.push_back(z);
  }
  Var<T> cat = outs.size() == 1 ? outs.front() : concat_cols(outs);
  if (st) st->concat = cat.value();
  Var<T> y = add_row(matmul(cat, p(prefix + ".wo")), p(prefix + ".bo"));
  return dropout(y, cfg.dropout);
}

// ---------------------------------------------------------------------------
// Encoder stages

/// Token-node states: token embedding plus absolute position embedding.
template <class T>
Var<T> embed_tokens(Bound<T>& p, const EncoderConfig& cfg, const TrainingInstance& inst, const HierGraph& g) {
  Index ids, pos;
  for (NodeId t : g.level(NodeType::kToken)) {
    const std::size_t position = g.nodes[t].position;
    const TokenId id = inst.tokens.at(position);
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
      throw ContractError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(cfg.vocab_size));
    if (position >= cfg.max_position)
      throw ContractError("position " + std::to_string(position) + " exceeds max_position");
    ids.push_back(static_cast<std::size_t>(id));
    pos.push_back(position);
  }
  return add(gather_rows(p("embed.token"), std::move(ids)), gather_rows(p("embed.position"), std::move(pos)));
}

/// Bottom-up average pooling: each parent is the mean over its children of
/// (child state + ordinal embedding), plus the parent's type embedding.
/// Returns states for all nodes in node-id order.
template <class T>
Var<T> graph_initialize(Bound<T>& p, const EncoderConfig& cfg, const HierGraph& g, Var<T> tokens) {
  if (tokens.value().rows() != g.level(NodeType::kToken).size())
    throw ShapeError("graph_initialize: token states do not cover the token nodes");
  std::vector<Var<T>> blocks{tokens};
  Var<T> prev = tokens;
  for (std::size_t o = 1; o < kNumNodeTypes; ++o) {
    const auto& parents = g.level(static_cast<NodeType>(o));
    const auto& kids = g.level(static_cast<NodeType>(o - 1));
    const NodeId first_parent = parents.front();
    std::vector<std::vector<std::size_t>> members(parents.size());
    Index rows, buckets;
    for (NodeId c : kids) {
      const GraphNode& child = g.nodes[c];
      members.at(*child.container - first_parent).push_back(rows.size());
      rows.push_back(child.level_index);
      buckets.push_back(ordinal_bucket(child.ordinal, cfg.graph.ordinal_clip));
    }
    Tensor<T> avg = Tensor<T>::matrix(parents.size(), rows.size());
    for (std::size_t i = 0; i < parents.size(); ++i) {
      if (members[i].empty())
        throw ContractError(std::string(node_type_name(static_cast<NodeType>(o))) + " node " +
                            std::to_string(parents[i]) + " has no children to average");
      const T w = T{1} / static_cast<T>(members[i].size());
      for (std::size_t k : members[i]) avg(i, k) = w;
    }
    Var<T> h = gather_rows(prev, std::move(rows));
    if (cfg.relational)
      h = add(h, gather_rows(p(std::string("init.rel.") + std::string(node_type_name(static_cast<NodeType>(o)))), std::move(buckets)));
    Var<T> pooled = matmul(p.tape().constant(std::move(avg)), h);
    pooled = add_row(pooled, gather_rows(p("init.type"), Index{o}));
    blocks.push_back(pooled);
    prev = pooled;
  }
  return concat_rows(blocks);
}

/// Self-attention among the nodes of one level; other rows pass through.
template <class T>
Var<T> self_attention_level(Bound<T>& p, const EncoderConfig& cfg, std::size_t layer, NodeType level,
                            const GraphStructures& gs, Var<T> states, AttentionTrace<T>* trace = nullptr) {
  if (level == NodeType::kDocument) throw ContractError("the document node has no self-attention level");
  const auto k = static_cast<std::size_t>(level);
  const AttentionStructure& s = gs.self[k];
  const std::string prefix = detail::layer_prefix(layer, detail::kSelfSublayers[k]);
  Index idx(s.nodes.begin(), s.nodes.end());
  Var<T> x = gather_rows(states, idx);
  Var<T> y = gat_attention(p, cfg, prefix, x, s, trace);
  Var<T> out = layer_norm(add(x, y), p(prefix + ".ln_g"), p(prefix + ".ln_b"));
  return scatter_rows(states, out, std::move(idx));
}

/// One attention pass over the cross-level edges and self-loops of all
/// nodes. Returns (pre, post).
template <class T>
std::pair<Var<T>, Var<T>> graph_integration(Bound<T>& p, const EncoderConfig& cfg, const std::string& prefix,
                                            const GraphStructures& gs, Var<T> states,
                                            AttentionTrace<T>* trace = nullptr) {
  if (!cfg.integration) return {states, states};
  return {states, gat_attention(p, cfg, prefix, states, gs.integration, trace)};
}

/// layer_norm(pre + W2 gelu(W1 [pre || post] + b1) + b2).
template <class T>
Var<T> feed_forward_concat(Bound<T>& p, const EncoderConfig& cfg, std::size_t layer, Var<T> pre, Var<T> post) {
  if (pre.shape() != post.shape()) throw ShapeError("feed_forward_concat: pre and post differ in shape");
  const std::string f = detail::layer_prefix(layer, "ffn");
  Var<T> h = gelu(add_row(matmul(concat_cols(std::vector<Var<T>>{pre, post}), p(f + ".w1")), p(f + ".b1")));
  Var<T> y = dropout(add_row(matmul(h, p(f + ".w2")), p(f + ".b2")), cfg.dropout);
  return layer_norm(add(pre, y), p(f + ".ln_g"), p(f + ".ln_b"));
}

template <class T>
Var<T> encode(Bound<T>& p, const EncoderConfig& cfg, const TrainingInstance& inst, const HierGraph& g,
              const GraphStructures& gs, AttentionTrace<T>* trace = nullptr) {
  Var<T> states = graph_initialize(p, cfg, g, embed_tokens(p, cfg, inst, g));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (std::size_t k = 0; k < 3; ++k) {
      if (cfg.self_attention) states = self_attention_level(p, cfg, l, static_cast<NodeType>(k), gs, states, trace);
      if (cfg.integrate_each_sublayer && k < 2) {
        const std::string prefix = detail::layer_prefix(l, "integ" + std::to_string(k));
        auto [pre, post] = graph_integration(p, cfg, prefix, gs, states, trace);
        if (cfg.integration) states = layer_norm(add(pre, post), p(prefix + ".ln_g"), p(prefix + ".ln_b"));
      }
    }
    auto [pre, post] = graph_integration(p, cfg, detail::layer_prefix(l, "integ"), gs, states, trace);
    states = feed_forward_concat(p, cfg, l, pre, post);
  }
  return states;
}

template <class T>
Var<T> encode(Bound<T>& p, const EncoderConfig& cfg, const TrainingInstance& inst, const HierGraph& g,
              AttentionTrace<T>* trace = nullptr) {
  return encode(p, cfg, inst, g, build_structures(g), trace);
}

}  // namespace mgrc
