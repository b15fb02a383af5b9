#pragma once

// Thresholded precision / recall / F1 for the long and short answer grains,
// threshold sweep, and the five-case error breakdown.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mgrc/heads.hpp"

namespace mgrc {

enum class Grain { kLong, kShort };

inline std::string_view grain_name(Grain g) { return g == Grain::kLong ? "long" : "short"; }

/// One example reduced to what a grain's metrics need.
struct Judgement {
  bool gold_has_answer = false;
  bool predicted = false;
  double score = 0.0;
  bool correct = false;
};

inline bool gold_has(const GoldAnswer& g, Grain grain) {
  return grain == Grain::kLong ? g.has_long() : (g.has_short() || g.yes_no != YesNo::kNone);
}

inline bool prediction_matches(const DocumentPrediction& p, const GoldAnswer& g, Grain grain) {
  if (grain == Grain::kLong) return p.long_candidate && g.long_candidate && static_cast<std::size_t>(*p.long_candidate) == *g.long_candidate;
  switch (p.short_kind) {
    case ShortKind::kNone: return false;
    case ShortKind::kYes: return g.yes_no == YesNo::kYes;
    case ShortKind::kNo: return g.yes_no == YesNo::kNo;
    case ShortKind::kSpan: return g.short_span && *g.short_span == p.short_span;
  }
  return false;
}

/// Pairs predictions with gold by example id. Duplicate ids on either side
/// and predictions without gold are errors; gold without a prediction
/// counts as not emitted.
inline std::vector<Judgement> judge(const std::vector<DocumentPrediction>& preds, const std::vector<GoldAnswer>& gold,
                                    Grain grain) {
  std::map<std::string, const DocumentPrediction*> by_id;
  for (const auto& p : preds)
    if (!by_id.emplace(p.example_id, &p).second) throw ContractError("duplicate prediction for example " + p.example_id);
  std::map<std::string, bool> seen;
  std::vector<Judgement> out;
  out.reserve(gold.size());
  for (const auto& g : gold) {
    if (!seen.emplace(g.example_id, true).second) throw ContractError("duplicate gold example " + g.example_id);
    Judgement j;
    j.gold_has_answer = gold_has(g, grain);
    auto it = by_id.find(g.example_id);
    if (it != by_id.end()) {
      const DocumentPrediction& p = *it->second;
      j.predicted = grain == Grain::kLong ? p.long_candidate.has_value() : p.short_kind != ShortKind::kNone;
      j.score = grain == Grain::kLong ? p.long_score : p.short_score;
      j.correct = j.predicted && prediction_matches(p, g, grain);
    }
    out.push_back(j);
  }
  for (const auto& [id, _] : by_id)
    if (!seen.count(id)) throw ContractError("prediction for unknown example " + id);
  return out;
}

struct PRF {
  double threshold = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
};

inline PRF f1_at_threshold(const std::vector<Judgement>& js, double tau) {
  PRF r;
  r.threshold = tau;
  for (const auto& j : js) {
    const bool emitted = j.predicted && j.score > tau;
    if (emitted && j.correct) {
      ++r.tp;
    } else {
      if (emitted) ++r.fp;
      if (j.gold_has_answer) ++r.fn;
    }
  }
  r.precision = r.tp + r.fp ? static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fp) : 0.0;
  r.recall = r.tp + r.fn ? static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn) : 0.0;
  r.f1 = r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

struct Sweep {
  PRF best;
  std::vector<PRF> curve;  // ascending threshold
};

/// Evaluates every distinct predicted score and +-inf as the threshold and
/// keeps the best F1; ties go to the larger threshold.
inline Sweep threshold_sweep(const std::vector<Judgement>& js) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> taus{-inf, inf};
  for (const auto& j : js)
    if (j.predicted) taus.push_back(j.score);
  std::sort(taus.begin(), taus.end());
  taus.erase(std::unique(taus.begin(), taus.end()), taus.end());
  Sweep s;
  for (double t : taus) {
    s.curve.push_back(f1_at_threshold(js, t));
    if (s.curve.size() == 1 || s.curve.back().f1 >= s.best.f1) s.best = s.curve.back();
  }
  return s;
}

/// Counts for: 1 answer & emitted & correct, 2 no answer & not emitted,
/// 3 answer & emitted & wrong, 4 answer & not emitted, 5 no answer & emitted.
inline std::array<std::size_t, 5> five_case_breakdown(const std::vector<Judgement>& js, double tau) {
  std::array<std::size_t, 5> c{};
  for (const auto& j : js) {
    const bool emitted = j.predicted && j.score > tau;
    if (j.gold_has_answer) {
      ++c[emitted ? (j.correct ? 0 : 2) : 3];
    } else {
      ++c[emitted ? 4 : 1];
    }
  }
  return c;
}

struct GrainReport {
  Sweep sweep;
  std::array<std::size_t, 5> cases{};
};

struct EvalReport {
  std::size_t examples = 0;
  GrainReport long_answer;
  GrainReport short_answer;
};

inline EvalReport evaluate(const std::vector<DocumentPrediction>& preds, const std::vector<GoldAnswer>& gold) {
  EvalReport r;
  r.examples = gold.size();
  for (Grain g : {Grain::kLong, Grain::kShort}) {
    const auto js = judge(preds, gold, g);
    GrainReport& gr = g == Grain::kLong ? r.long_answer : r.short_answer;
    gr.sweep = threshold_sweep(js);
    gr.cases = five_case_breakdown(js, gr.sweep.best.threshold);
  }
  return r;
}

namespace detail {

inline nlohmann::json threshold_json(double t) {
  if (std::isinf(t)) return t > 0 ? "inf" : "-inf";
  return t;
}

inline nlohmann::json prf_json(const PRF& p) {
  return {{"threshold", threshold_json(p.threshold)}, {"tp", p.tp}, {"fp", p.fp}, {"fn", p.fn},
          {"precision", p.precision}, {"recall", p.recall}, {"f1", p.f1}};
}

}  // namespace detail

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j{{"examples", r.examples}};
  for (Grain g : {Grain::kLong, Grain::kShort}) {
    const GrainReport& gr = g == Grain::kLong ? r.long_answer : r.short_answer;
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& p : gr.sweep.curve) curve.push_back(detail::prf_json(p));
    j[std::string(grain_name(g))] = {{"best", detail::prf_json(gr.sweep.best)}, {"curve", std::move(curve)}, {"cases", gr.cases}};
  }
  return j;
}

inline void print_table(std::ostream& os, const EvalReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-8s | %-26s | %-26s\n", "", "Long Answer", "Short Answer");
  os << buf;
  std::snprintf(buf, sizeof buf, "%-8s | %8s %8s %8s | %8s %8s %8s\n", "", "P", "R", "F1", "P", "R", "F1");
  os << buf;
  const PRF& l = r.long_answer.sweep.best;
  const PRF& s = r.short_answer.sweep.best;
  std::snprintf(buf, sizeof buf, "%-8s | %8.4f %8.4f %8.4f | %8.4f %8.4f %8.4f\n", "best", l.precision, l.recall, l.f1,
                s.precision, s.recall, s.f1);
  os << buf;
  std::snprintf(buf, sizeof buf, "%-8s | %26.4g | %26.4g\n", "tau", l.threshold, s.threshold);
  os << buf;
  for (std::size_t k = 0; k < 5; ++k) {
    std::snprintf(buf, sizeof buf, "case %zu   | %26zu | %26zu\n", k + 1, r.long_answer.cases[k], r.short_answer.cases[k]);
    os << buf;
  }
}

}  // namespace mgrc
