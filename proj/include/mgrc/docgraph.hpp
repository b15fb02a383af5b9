#pragma once

// Four-granularity document graph: token, sentence, paragraph and document
// nodes joined by the containment tree plus the token-paragraph,
// token-document and sentence-document shortcuts, all bidirectional. Every
// node pair is connected by a path of at most two edges.

#include <algorithm>
#include <array>
#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mgrc/autodiff.hpp"
#include "mgrc/preprocess.hpp"

namespace mgrc {

using NodeId = std::size_t;

/// Granularity levels; the ordering (child level + 1 == parent level) is used
/// by the initializer.
enum class NodeType : std::uint8_t { kToken = 0, kSentence = 1, kParagraph = 2, kDocument = 3 };
inline constexpr std::size_t kNumNodeTypes = 4;

inline std::string_view node_type_name(NodeType t) {
  static constexpr std::array<std::string_view, 4> names{"token", "sentence", "paragraph", "document"};
  return names[static_cast<std::size_t>(t)];
}

/// Directed edge families of the integration graph. "AToB" carries
/// information from an A node into a B node.
enum class EdgeType : std::uint8_t {
  kTokenToSentence = 0,
  kSentenceToToken,
  kSentenceToParagraph,
  kParagraphToSentence,
  kParagraphToDocument,
  kDocumentToParagraph,
  kTokenToParagraph,
  kParagraphToToken,
  kTokenToDocument,
  kDocumentToToken,
  kSentenceToDocument,
  kDocumentToSentence,
  kSelfLoop,
};
inline constexpr std::size_t kNumCrossEdgeTypes = 12;

inline std::string_view edge_type_name(EdgeType t) {
  static constexpr std::array<std::string_view, 13> names{
      "token->sentence",    "sentence->token",    "sentence->paragraph", "paragraph->sentence", "paragraph->document",
      "document->paragraph", "token->paragraph",  "paragraph->token",    "token->document",     "document->token",
      "sentence->document", "document->sentence", "self"};
  return names[static_cast<std::size_t>(t)];
}

/// Same edge family, opposite direction.
inline EdgeType reverse_edge_type(EdgeType t) {
  if (t == EdgeType::kSelfLoop) return t;
  const auto v = static_cast<std::uint8_t>(t);
  return static_cast<EdgeType>(v ^ 1u);
}

/// Relative-position clipping constants.
struct GraphConfig {
  int token_window = 16;
  int sentence_window = 8;
  int paragraph_window = 8;
  std::size_t ordinal_clip = 32;

  int window(NodeType level) const {
    switch (level) {
      case NodeType::kToken: return token_window;
      case NodeType::kSentence: return sentence_window;
      case NodeType::kParagraph: return paragraph_window;
      default: throw ContractError("no self-attention level for the document node");
    }
  }
  std::size_t self_buckets(NodeType level) const { return 2 * static_cast<std::size_t>(window(level)) + 1; }
  std::size_t ordinal_buckets() const { return ordinal_clip + 1; }
  /// Rows of the integration relational table: one block per cross-level
  /// family plus one self-loop row per node type.
  std::size_t integration_buckets() const { return kNumCrossEdgeTypes * ordinal_buckets() + kNumNodeTypes; }
};

/// Bucket for a same-level pair at level offset j - i.
inline std::size_t same_level_bucket(std::ptrdiff_t offset, int window) {
  const std::ptrdiff_t k = window;
  return static_cast<std::size_t>(std::clamp(offset, -k, k) + k);
}

/// Bucket for a cross-level edge: ordinal of the finer node in the coarser one.
inline std::size_t ordinal_bucket(std::size_t ordinal, std::size_t clip) { return std::min(ordinal, clip); }

struct GraphNode {
  NodeType type = NodeType::kToken;
  /// Parent in the containment tree; unset for the document node.
  std::optional<NodeId> container;
  /// Index among the siblings sharing `container`.
  std::size_t ordinal = 0;
  /// Index among all nodes of the same type.
  std::size_t level_index = 0;
  /// Instance position for token nodes.
  std::size_t position = 0;
};

struct Edge {
  NodeId src = 0;
  NodeId dst = 0;
  EdgeType type = EdgeType::kSelfLoop;
  std::size_t bucket = 0;
};

struct HierGraph {
  GraphConfig config;
  std::vector<GraphNode> nodes;
  /// Integration edges: cross-level families plus one self-loop per node.
  std::vector<Edge> edges;
  std::array<std::vector<NodeId>, kNumNodeTypes> levels;
  /// Instance position -> token node, or -1 for positions without a node.
  std::vector<std::ptrdiff_t> position_to_node;

  const std::vector<NodeId>& level(NodeType t) const { return levels[static_cast<std::size_t>(t)]; }
  NodeId document() const { return levels[3].front(); }
  std::size_t size() const noexcept { return nodes.size(); }

  std::vector<NodeId> children(NodeId parent) const {
    std::vector<NodeId> out;
    for (NodeId i = 0; i < nodes.size(); ++i)
      if (nodes[i].container && *nodes[i].container == parent) out.push_back(i);
    return out;
  }
};

namespace detail {

inline std::size_t integration_bucket_index(const Edge& e, const HierGraph& g) {
  if (e.type == EdgeType::kSelfLoop)
    return kNumCrossEdgeTypes * g.config.ordinal_buckets() + static_cast<std::size_t>(g.nodes[e.dst].type);
  return static_cast<std::size_t>(e.type) * g.config.ordinal_buckets() + e.bucket;
}

}  // namespace detail

/// Builds the graph for one instance. Token nodes exist for [CLS], question
/// and content tokens; [SEP] and [PAD] positions get none. [CLS] and the
/// question form the first sentence, which is the only sentence of the
/// [CLS] pseudo-paragraph (candidate entry 0).
inline HierGraph build_graph(const TrainingInstance& inst, const GraphConfig& cfg = {}) {
  const std::size_t L = inst.length();
  if (inst.candidates.empty() || inst.sentences.empty())
    throw ContractError(inst.example_id + ": instance needs the [CLS] candidate and sentence");
  std::size_t real = 0;
  while (real < L && inst.mask[real]) ++real;
  const std::size_t sep1 = inst.question_length + 1;
  const std::size_t sep2 = real - 1;

  HierGraph g;
  g.config = cfg;
  g.position_to_node.assign(L, -1);

  // Sentence lookup per position.
  std::vector<std::ptrdiff_t> sentence_of(L, -1);
  for (std::size_t s = 0; s < inst.sentences.size(); ++s) {
    const TokenSpan& sp = inst.sentences[s];
    if (sp.end >= L || sp.start > sp.end) throw ContractError("sentence span outside the instance");
    for (std::size_t p = sp.start; p <= sp.end; ++p) {
      if (sentence_of[p] >= 0) throw ContractError("position " + std::to_string(p) + " is in two sentences");
      sentence_of[p] = static_cast<std::ptrdiff_t>(s);
    }
  }

  std::vector<std::size_t> token_positions;
  for (std::size_t p = 0; p < real; ++p) {
    if (p == sep1 || p == sep2) continue;
    if (sentence_of[p] < 0)
      throw ContractError(inst.example_id + ": token at position " + std::to_string(p) + " is not in any sentence");
    token_positions.push_back(p);
  }

  // Sentence -> candidate entry by containment.
  std::vector<std::size_t> sentence_paragraph(inst.sentences.size(), 0);
  for (std::size_t s = 1; s < inst.sentences.size(); ++s) {
    const TokenSpan& sp = inst.sentences[s];
    bool found = false;
    for (std::size_t c = 1; c < inst.candidates.size(); ++c) {
      if (inst.candidates[c].start <= sp.start && sp.end <= inst.candidates[c].end) {
        sentence_paragraph[s] = c;
        found = true;
        break;
      }
    }
    if (!found) throw ContractError(inst.example_id + ": sentence " + std::to_string(s) + " lies in no candidate");
  }

  const std::size_t n_tok = token_positions.size();
  const std::size_t n_sent = inst.sentences.size();
  const std::size_t n_para = inst.candidates.size();
  const NodeId sent0 = n_tok, para0 = n_tok + n_sent, doc = n_tok + n_sent + n_para;
  g.nodes.resize(doc + 1);

  std::vector<std::size_t> sent_token_count(n_sent, 0), para_sentence_count(n_para, 0), para_token_count(n_para, 0);
  std::vector<std::size_t> token_in_para(n_tok);
  for (std::size_t k = 0; k < n_tok; ++k) {
    const auto s = static_cast<std::size_t>(sentence_of[token_positions[k]]);
    GraphNode& node = g.nodes[k];
    node.type = NodeType::kToken;
    node.container = sent0 + s;
    node.ordinal = sent_token_count[s]++;
    node.level_index = k;
    node.position = token_positions[k];
    token_in_para[k] = para_token_count[sentence_paragraph[s]]++;
    g.position_to_node[token_positions[k]] = static_cast<std::ptrdiff_t>(k);
    g.levels[0].push_back(k);
  }
  for (std::size_t s = 0; s < n_sent; ++s) {
    if (sent_token_count[s] == 0) throw ContractError(inst.example_id + ": sentence " + std::to_string(s) + " has no tokens");
    GraphNode& node = g.nodes[sent0 + s];
    node.type = NodeType::kSentence;
    node.container = para0 + sentence_paragraph[s];
    node.ordinal = para_sentence_count[sentence_paragraph[s]]++;
    node.level_index = s;
    g.levels[1].push_back(sent0 + s);
  }
  for (std::size_t c = 0; c < n_para; ++c) {
    if (para_sentence_count[c] == 0)
      throw ContractError(inst.example_id + ": candidate " + std::to_string(c) + " has no sentences");
    GraphNode& node = g.nodes[para0 + c];
    node.type = NodeType::kParagraph;
    node.container = doc;
    node.ordinal = c;
    node.level_index = c;
    g.levels[2].push_back(para0 + c);
  }
  g.nodes[doc].type = NodeType::kDocument;
  g.levels[3].push_back(doc);

  const std::size_t clip = cfg.ordinal_clip;
  auto link = [&](NodeId fine, NodeId coarse, EdgeType up, std::size_t ordinal) {
    const std::size_t b = ordinal_bucket(ordinal, clip);
    g.edges.push_back({fine, coarse, up, b});
    g.edges.push_back({coarse, fine, reverse_edge_type(up), b});
  };
  for (NodeId i = 0; i <= doc; ++i) g.edges.push_back({i, i, EdgeType::kSelfLoop, 0});
  for (std::size_t k = 0; k < n_tok; ++k) {
    const NodeId sent = *g.nodes[k].container;
    link(k, sent, EdgeType::kTokenToSentence, g.nodes[k].ordinal);
    link(k, *g.nodes[sent].container, EdgeType::kTokenToParagraph, token_in_para[k]);
    link(k, doc, EdgeType::kTokenToDocument, k);
  }
  for (std::size_t s = 0; s < n_sent; ++s) {
    const NodeId id = sent0 + s;
    link(id, *g.nodes[id].container, EdgeType::kSentenceToParagraph, g.nodes[id].ordinal);
    link(id, doc, EdgeType::kSentenceToDocument, s);
  }
  for (std::size_t c = 0; c < n_para; ++c) link(para0 + c, doc, EdgeType::kParagraphToDocument, c);
  return g;
}

/// Bucket of a same-level self-attention pair (i attends to j).
inline std::size_t relative_position(const HierGraph& g, NodeId i, NodeId j) {
  const GraphNode& a = g.nodes.at(i);
  const GraphNode& b = g.nodes.at(j);
  if (a.type != b.type) throw ContractError("relative_position: nodes on different levels");
  const auto offset = static_cast<std::ptrdiff_t>(b.level_index) - static_cast<std::ptrdiff_t>(a.level_index);
  return same_level_bucket(offset, g.config.window(a.type));
}

/// Bucket of an integration edge.
inline std::size_t relative_position(const Edge& e) { return e.bucket; }

// ---------------------------------------------------------------------------
// Validation

struct GraphViolation {
  enum class Kind { kMissingSelfLoop, kAsymmetricEdge, kContainment, kInconsistentEdge, kReachability };
  Kind kind;
  NodeId u = 0;
  NodeId v = 0;
  std::string message;
};

/// Checks self-loops, edge symmetry, tree containment, consistency of the
/// shortcut edges with the tree, and two-hop reachability between all pairs.
/// Returns the first violation found.
inline std::optional<GraphViolation> validate_graph(const HierGraph& g) {
  using Kind = GraphViolation::Kind;
  const std::size_t n = g.nodes.size();
  std::vector<std::size_t> self(n, 0);
  std::vector<std::vector<NodeId>> out_adj(n);
  std::vector<std::array<std::vector<NodeId>, kNumCrossEdgeTypes>> by_type(n);
  for (const Edge& e : g.edges) {
    if (e.src >= n || e.dst >= n) return GraphViolation{Kind::kInconsistentEdge, e.src, e.dst, "edge endpoint out of range"};
    if (e.type == EdgeType::kSelfLoop) {
      if (e.src != e.dst) return GraphViolation{Kind::kInconsistentEdge, e.src, e.dst, "self-loop between distinct nodes"};
      ++self[e.src];
    } else {
      by_type[e.src][static_cast<std::size_t>(e.type)].push_back(e.dst);
    }
    out_adj[e.src].push_back(e.dst);
  }
  for (NodeId i = 0; i < n; ++i)
    if (self[i] != 1) return GraphViolation{Kind::kMissingSelfLoop, i, i, "node " + std::to_string(i) + " lacks exactly one self-loop"};

  for (const Edge& e : g.edges) {
    if (e.type == EdgeType::kSelfLoop) continue;
    const auto& back = by_type[e.dst][static_cast<std::size_t>(reverse_edge_type(e.type))];
    if (std::find(back.begin(), back.end(), e.src) == back.end())
      return GraphViolation{Kind::kAsymmetricEdge, e.src, e.dst,
                            std::string(edge_type_name(e.type)) + " edge " + std::to_string(e.src) + "->" +
                                std::to_string(e.dst) + " has no reverse"};
  }

  auto parent_check = [&](NodeType level, EdgeType up) -> std::optional<GraphViolation> {
    for (NodeId i : g.level(level)) {
      const auto& ups = by_type[i][static_cast<std::size_t>(up)];
      if (ups.size() != 1 || !g.nodes[i].container || ups.front() != *g.nodes[i].container)
        return GraphViolation{Kind::kContainment, i, g.nodes[i].container.value_or(i),
                              std::string(node_type_name(level)) + " node " + std::to_string(i) + " has " +
                                  std::to_string(ups.size()) + " " + std::string(edge_type_name(up)) + " edges"};
    }
    return std::nullopt;
  };
  if (auto v = parent_check(NodeType::kToken, EdgeType::kTokenToSentence)) return v;
  if (auto v = parent_check(NodeType::kSentence, EdgeType::kSentenceToParagraph)) return v;
  if (auto v = parent_check(NodeType::kParagraph, EdgeType::kParagraphToDocument)) return v;

  for (NodeId t : g.level(NodeType::kToken)) {
    const NodeId para = *g.nodes[*g.nodes[t].container].container;
    for (NodeId p : by_type[t][static_cast<std::size_t>(EdgeType::kTokenToParagraph)])
      if (p != para)
        return GraphViolation{Kind::kInconsistentEdge, t, p, "token " + std::to_string(t) + " linked to a foreign paragraph"};
  }

  std::vector<int> dist(n);
  for (NodeId s = 0; s < n; ++s) {
    std::fill(dist.begin(), dist.end(), -1);
    std::deque<NodeId> q{s};
    dist[s] = 0;
    while (!q.empty()) {
      const NodeId u = q.front();
      q.pop_front();
      for (NodeId v : out_adj[u])
        if (dist[v] < 0) {
          dist[v] = dist[u] + 1;
          q.push_back(v);
        }
    }
    for (NodeId t = 0; t < n; ++t)
      if (dist[t] < 0 || dist[t] > 2)
        return GraphViolation{Kind::kReachability, s, t,
                              "node " + std::to_string(t) + " is " + (dist[t] < 0 ? "unreachable" : std::to_string(dist[t]) + " hops") +
                                  " from node " + std::to_string(s)};
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Dense attention structures

/// Participating nodes plus row-major n x n neighbor mask and bucket table
/// (row i = receiving node, column j = sending node).
struct AttentionStructure {
  std::vector<NodeId> nodes;
  std::shared_ptr<const Mask> mask;
  std::shared_ptr<const Index> bucket;
  std::size_t num_buckets = 0;

  std::size_t size() const noexcept { return nodes.size(); }
};

/// Fully connected same-level structure with clipped relative-distance buckets.
inline AttentionStructure self_attention_structure(const HierGraph& g, NodeType level) {
  AttentionStructure s;
  s.nodes = g.level(level);
  const std::size_t n = s.nodes.size();
  const int window = g.config.window(level);
  auto bucket = std::make_shared<Index>(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      (*bucket)[i * n + j] = same_level_bucket(static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(i), window);
  s.mask = std::make_shared<Mask>(n * n, 1);
  s.bucket = std::move(bucket);
  s.num_buckets = g.config.self_buckets(level);
  return s;
}

/// All nodes; neighbors are the integration edges.
inline AttentionStructure integration_structure(const HierGraph& g) {
  AttentionStructure s;
  const std::size_t n = g.size();
  s.nodes.resize(n);
  for (NodeId i = 0; i < n; ++i) s.nodes[i] = i;
  auto mask = std::make_shared<Mask>(n * n, 0);
  auto bucket = std::make_shared<Index>(n * n, 0);
  for (const Edge& e : g.edges) {
    (*mask)[e.dst * n + e.src] = 1;
    (*bucket)[e.dst * n + e.src] = detail::integration_bucket_index(e, g);
  }
  s.mask = std::move(mask);
  s.bucket = std::move(bucket);
  s.num_buckets = g.config.integration_buckets();
  return s;
}

/// Debug dump: nodes with type/container and per-edge-type incoming neighbor lists.
inline nlohmann::json graph_to_json(const HierGraph& g) {
  using nlohmann::json;
  json nodes = json::array();
  std::vector<json> incoming(g.size(), json::object());
  for (const Edge& e : g.edges) {
    json& slot = incoming[e.dst][std::string(edge_type_name(e.type))];
    if (slot.is_null()) slot = json::array();
    slot.push_back(json::array({e.src, e.bucket}));
  }
  for (NodeId i = 0; i < g.size(); ++i) {
    const GraphNode& n = g.nodes[i];
    json jn{{"id", i}, {"type", std::string(node_type_name(n.type))}, {"ordinal", n.ordinal}, {"incoming", incoming[i]}};
    jn["container"] = n.container ? json(*n.container) : json(nullptr);
    if (n.type == NodeType::kToken) jn["position"] = n.position;
    nodes.push_back(std::move(jn));
  }
  return json{{"nodes", std::move(nodes)}};
}

}  // namespace mgrc
