#pragma once

// Output layer: start/end logits from token nodes, long-answer logits from
// paragraph nodes, answer-type logits from the document node; the joint
// loss; and fragment-level answer selection.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mgrc/encoder.hpp"

namespace mgrc {

enum class TypeAggregation { kLogSumExp, kMax };

struct HeadConfig {
  std::size_t max_answer_tokens = 30;
  TypeAggregation aggregation = TypeAggregation::kLogSumExp;
};

inline std::vector<ParamSpec> head_param_specs(std::size_t d) {
  return {{"head.span.w", {d, 2}},
          {"head.span.b", {2}, InitKind::kZero},
          {"head.long.w", {d, 1}},
          {"head.long.b", {1}, InitKind::kZero},
          {"head.type.w", {d, static_cast<std::size_t>(kNumAnswerTypes)}},
          {"head.type.b", {static_cast<std::size_t>(kNumAnswerTypes)}, InitKind::kZero}};
}

/// Encoder plus head parameters.
inline std::vector<ParamSpec> model_param_specs(const EncoderConfig& c) {
  auto specs = encoder_param_specs(c);
  for (auto& s : head_param_specs(c.d_model)) specs.push_back(std::move(s));
  return specs;
}

template <class T>
ParamStore<T> init_model_params(const EncoderConfig& c, std::uint64_t seed) {
  c.validate();
  ParamStore<T> store;
  init_params(store, model_param_specs(c), c.init_std, seed);
  return store;
}

/// Logits on the tape. `start`/`end` are 1 x L over instance positions,
/// `long_logits` 1 x |S|, `type_logits` 1 x 5.
template <class T>
struct ScoreVars {
  Var<T> start;
  Var<T> end;
  Var<T> long_logits;
  Var<T> type_logits;
  Mask span_mask;
};

/// Positions that may be start/end targets: [CLS] and content tokens.
inline Mask span_mask(const TrainingInstance& inst, const HierGraph& g) {
  Mask m(inst.length(), 0);
  m[0] = 1;
  for (std::size_t pos = inst.content_begin(); pos < inst.length(); ++pos) m[pos] = g.position_to_node[pos] >= 0;
  return m;
}

template <class T>
ScoreVars<T> score_nodes(Bound<T>& p, const TrainingInstance& inst, const HierGraph& g, Var<T> states) {
  Tape<T>& tape = p.tape();
  const auto& toks = g.level(NodeType::kToken);
  Var<T> tok = gather_rows(states, Index(toks.begin(), toks.end()));
  Var<T> span = add_row(matmul(tok, p("head.span.w")), p("head.span.b"));
  Index positions;
  for (NodeId t : toks) positions.push_back(g.nodes[t].position);
  Var<T> by_pos = transpose(scatter_rows(tape.constant(Tensor<T>::matrix(inst.length(), 2)), span, std::move(positions)));

  const auto& paras = g.level(NodeType::kParagraph);
  Var<T> para = gather_rows(states, Index(paras.begin(), paras.end()));
  Var<T> lg = transpose(add_row(matmul(para, p("head.long.w")), p("head.long.b")));

  Var<T> doc = gather_rows(states, Index{g.document()});
  Var<T> ty = add_row(matmul(doc, p("head.type.w")), p("head.type.b"));

  return {gather_rows(by_pos, Index{0}), gather_rows(by_pos, Index{1}), lg, ty, span_mask(inst, g)};
}

/// -[log p_s(s) + log p_e(e) + log p_t(t) + log p_l(l)]; the span terms are
/// dropped for long-only instances.
template <class T>
Var<T> joint_loss(const ScoreVars<T>& s, const TrainingInstance& inst) {
  if (inst.start >= s.span_mask.size() || inst.end >= s.span_mask.size() || !s.span_mask[inst.start] ||
      !s.span_mask[inst.end])
    throw ContractError(inst.example_id + ": span target at a masked position");
  const std::size_t n_long = s.long_logits.value().size();
  if (inst.long_target >= n_long) throw ContractError(inst.example_id + ": long target out of range");
  Var<T> total = pick(masked_log_softmax(s.type_logits, Mask(kNumAnswerTypes, 1)), static_cast<std::size_t>(inst.type));
  total = add(total, pick(masked_log_softmax(s.long_logits, Mask(n_long, 1)), inst.long_target));
  if (inst.type != AnswerType::kLong) {
    total = add(total, pick(masked_log_softmax(s.start, s.span_mask), inst.start));
    total = add(total, pick(masked_log_softmax(s.end, s.span_mask), inst.end));
  }
  return scale(total, T{-1});
}

// ---------------------------------------------------------------------------
// Inference

/// Plain logits of one fragment with what answer selection needs to map
/// back to the document. Masked span positions hold -inf.
struct ScoreSet {
  std::string example_id;
  std::size_t fragment = 0;
  std::size_t doc_offset = 0;
  std::size_t content_begin = 0;
  std::vector<double> start;
  std::vector<double> end;
  std::vector<double> long_logits;
  std::vector<double> type_logits;
  std::vector<TokenSpan> candidates;
  std::vector<int> candidate_ids;

  std::size_t to_document(std::size_t pos) const { return pos - content_begin + doc_offset; }
};

template <class T>
ScoreSet export_scores(const ScoreVars<T>& s, const TrainingInstance& inst) {
  ScoreSet out;
  out.example_id = inst.example_id;
  out.fragment = inst.fragment;
  out.doc_offset = inst.doc_offset;
  out.content_begin = inst.content_begin();
  const double ninf = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < inst.length(); ++i) {
    out.start.push_back(s.span_mask[i] ? static_cast<double>(s.start.value()[i]) : ninf);
    out.end.push_back(s.span_mask[i] ? static_cast<double>(s.end.value()[i]) : ninf);
  }
  for (T v : s.long_logits.value().data()) out.long_logits.push_back(static_cast<double>(v));
  for (T v : s.type_logits.value().data()) out.type_logits.push_back(static_cast<double>(v));
  out.candidates = inst.candidates;
  out.candidate_ids = inst.candidate_ids;
  return out;
}

struct SpanScore {
  std::size_t start = 0;
  std::size_t end = 0;
  double score = 0.0;
};

inline double fragment_score(const ScoreSet& s, TypeAggregation agg) {
  const auto first = s.type_logits.begin() + 1;
  const double mx = *std::max_element(first, s.type_logits.end());
  if (agg == TypeAggregation::kMax) return mx - s.type_logits[0];
  double total = 0.0;
  for (auto it = first; it != s.type_logits.end(); ++it) total += std::exp(*it - mx);
  return mx + std::log(total) - s.type_logits[0];
}

inline double long_score(const ScoreSet& s, std::size_t entry) { return s.long_logits.at(entry) - s.long_logits[0]; }

/// All valid spans inside candidate entry `entry` with their g_short scores,
/// in (start, end) order.
inline std::vector<SpanScore> short_spans(const ScoreSet& s, std::size_t entry, std::size_t max_tokens) {
  std::vector<SpanScore> out;
  if (entry == 0) return out;
  const TokenSpan& c = s.candidates.at(entry);
  const double base = s.start[0] + s.end[0];
  for (std::size_t i = c.start; i <= c.end; ++i) {
    if (!std::isfinite(s.start[i])) continue;
    for (std::size_t j = i; j <= c.end && j - i + 1 <= max_tokens; ++j)
      if (std::isfinite(s.end[j])) out.push_back({i, j, s.start[i] + s.end[j] - base});
  }
  return out;
}

inline std::optional<SpanScore> best_short_span(const ScoreSet& s, std::size_t entry, std::size_t max_tokens) {
  std::optional<SpanScore> best;
  for (const SpanScore& sp : short_spans(s, entry, max_tokens))
    if (!best || sp.score > best->score) best = sp;
  return best;
}

enum class ShortKind { kNone, kSpan, kYes, kNo };

struct DocumentPrediction {
  std::string example_id;
  std::optional<int> long_candidate;
  TokenSpan long_span;  // document tokens (clipped to the chosen fragment)
  double long_score = 0.0;
  ShortKind short_kind = ShortKind::kNone;
  TokenSpan short_span;  // document tokens
  double short_score = 0.0;
  AnswerType type = AnswerType::kNoAnswer;
  std::size_t fragment = 0;
};

/// Picks the candidate maximizing g_long + g_frag over all fragments (ties:
/// earliest document candidate, then lowest fragment index), then the best
/// short span inside it in the same fragment, or yes/no when that is the
/// fragment's top type.
inline DocumentPrediction select_answers(const std::vector<ScoreSet>& frags, const HeadConfig& cfg = {}) {
  if (frags.empty()) throw ContractError("select_answers needs at least one fragment");
  DocumentPrediction pred;
  pred.example_id = frags.front().example_id;
  const ScoreSet* best = nullptr;
  std::size_t best_entry = 0;
  double best_score = 0.0;
  for (const ScoreSet& f : frags) {
    const double gf = fragment_score(f, cfg.aggregation);
    for (std::size_t l = 1; l < f.long_logits.size(); ++l) {
      const double sc = long_score(f, l) + gf;
      bool better = !best || sc > best_score;
      if (best && sc == best_score) {
        const int a = f.candidate_ids[l], b = best->candidate_ids[best_entry];
        better = a < b || (a == b && f.fragment < best->fragment);
      }
      if (better) {
        best = &f;
        best_entry = l;
        best_score = sc;
      }
    }
  }
  if (!best) return pred;

  const ScoreSet& f = *best;
  pred.fragment = f.fragment;
  pred.long_candidate = f.candidate_ids[best_entry];
  pred.long_span = {f.to_document(f.candidates[best_entry].start), f.to_document(f.candidates[best_entry].end)};
  pred.long_score = best_score;
  pred.type = static_cast<AnswerType>(std::max_element(f.type_logits.begin(), f.type_logits.end()) - f.type_logits.begin());
  if (pred.type == AnswerType::kYes || pred.type == AnswerType::kNo) {
    pred.short_kind = pred.type == AnswerType::kYes ? ShortKind::kYes : ShortKind::kNo;
    pred.short_score = best_score;
  } else if (auto sp = best_short_span(f, best_entry, cfg.max_answer_tokens)) {
    pred.short_kind = ShortKind::kSpan;
    pred.short_span = {f.to_document(sp->start), f.to_document(sp->end)};
    pred.short_score = sp->score;
  }
  return pred;
}

inline nlohmann::json to_json(const DocumentPrediction& p) {
  using nlohmann::json;
  json j{{"example_id", p.example_id}, {"type", std::string(answer_type_name(p.type))}};
  if (p.long_candidate) {
    j["long"] = {{"candidate", *p.long_candidate}, {"start", p.long_span.start}, {"end", p.long_span.end}, {"score", p.long_score}};
  } else {
    j["long"] = nullptr;
  }
  switch (p.short_kind) {
    case ShortKind::kNone: j["short"] = nullptr; break;
    case ShortKind::kSpan: j["short"] = {{"start", p.short_span.start}, {"end", p.short_span.end}, {"score", p.short_score}}; break;
    case ShortKind::kYes: j["short"] = "yes"; break;
    case ShortKind::kNo: j["short"] = "no"; break;
  }
  if (p.short_kind != ShortKind::kNone) j["short_score"] = p.short_score;
  return j;
}

inline AnswerType parse_answer_type(const std::string& s) {
  for (int t = 0; t < kNumAnswerTypes; ++t)
    if (answer_type_name(static_cast<AnswerType>(t)) == s) return static_cast<AnswerType>(t);
  throw FormatError("unknown answer type '" + s + "'");
}

inline DocumentPrediction prediction_from_json(const nlohmann::json& j) {
  try {
    DocumentPrediction p;
    p.example_id = j.at("example_id").get<std::string>();
    p.type = parse_answer_type(j.at("type").get<std::string>());
    if (!j.at("long").is_null()) {
      const auto& l = j["long"];
      p.long_candidate = l.at("candidate").get<int>();
      p.long_span = {l.at("start").get<std::size_t>(), l.at("end").get<std::size_t>()};
      p.long_score = l.at("score").get<double>();
    }
    const auto& s = j.at("short");
    if (s.is_string()) {
      const auto v = s.get<std::string>();
      if (v != "yes" && v != "no") throw FormatError("short answer string must be yes or no");
      p.short_kind = v == "yes" ? ShortKind::kYes : ShortKind::kNo;
      p.short_score = j.at("short_score").get<double>();
    } else if (!s.is_null()) {
      p.short_kind = ShortKind::kSpan;
      p.short_span = {s.at("start").get<std::size_t>(), s.at("end").get<std::size_t>()};
      p.short_score = s.at("score").get<double>();
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed prediction: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Whole-model forward

template <class T>
ScoreVars<T> forward(Bound<T>& p, const EncoderConfig& cfg, const TrainingInstance& inst, const HierGraph& g,
                     const GraphStructures& gs, AttentionTrace<T>* trace = nullptr) {
  return score_nodes(p, inst, g, encode(p, cfg, inst, g, gs, trace));
}

template <class T>
ScoreVars<T> forward(Bound<T>& p, const EncoderConfig& cfg, const TrainingInstance& inst) {
  const HierGraph g = build_graph(inst, cfg.graph);
  return forward(p, cfg, inst, g, build_structures(g));
}

/// Inference-mode scores for one instance.
template <class T>
ScoreSet predict_scores(const ParamStore<T>& params, const EncoderConfig& cfg, const TrainingInstance& inst) {
  Tape<T> tape(false, 0);
  Bound<T> p(tape, params);
  return export_scores(forward(p, cfg, inst), inst);
}

}  // namespace mgrc
