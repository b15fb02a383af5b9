#pragma once

// Raw examples -> fixed-length training instances: tokenization, sentence
// segmentation, candidate markup, sliding-window fragmentation and answer
// tagging.

#include <algorithm>
#include <cctype>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mgrc/rng.hpp"
#include "mgrc/tokenizer.hpp"
#include "mgrc/vocab.hpp"

namespace mgrc {

using json = nlohmann::json;

/// Order fixed so that 0 is the null label.
enum class AnswerType : int { kNoAnswer = 0, kYes = 1, kNo = 2, kLong = 3, kShort = 4 };
inline constexpr int kNumAnswerTypes = 5;

inline std::string_view answer_type_name(AnswerType t) {
  static constexpr std::array<std::string_view, 5> names{"no-answer", "yes", "no", "long", "short"};
  return names[static_cast<std::size_t>(t)];
}

enum class YesNo { kNone, kYes, kNo };

/// Byte range [begin, end).
struct ByteSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
};

/// Inclusive token range.
struct TokenSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

struct Candidate {
  CandidateKind kind = CandidateKind::kParagraph;
  std::string text;
  /// Optional pre-split sentence texts, in order, each found verbatim in `text`.
  std::vector<std::string> sentences;
};

struct Annotation {
  std::optional<std::size_t> long_index;
  /// Byte offsets into the long candidate's text.
  std::vector<ByteSpan> short_spans;
  YesNo yes_no = YesNo::kNone;
};

struct RawExample {
  std::string id;
  std::string question;
  std::vector<Candidate> candidates;
  Annotation annotation;
};

// ---------------------------------------------------------------------------
// Sentence segmentation

/// Rule-based splitter. A sentence ends after '.', '?' or '!' when the
/// terminator is followed by whitespace and then an uppercase letter, or by
/// optional whitespace and the end of text. Trailing whitespace belongs to
/// the sentence it follows, so the returned [begin, end) ranges tile the text.
inline std::vector<ByteSpan> segment_sentences(std::string_view text) {
  std::vector<ByteSpan> out;
  const std::size_t n = text.size();
  std::size_t start = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const char c = text[i];
    if (c != '.' && c != '?' && c != '!') continue;
    std::size_t j = i + 1;
    while (j < n && detail::is_space(static_cast<unsigned char>(text[j]))) ++j;
    const bool at_end = j == n;
    const bool had_space = j > i + 1;
    if (at_end || (had_space && std::isupper(static_cast<unsigned char>(text[j])))) {
      out.push_back({start, j});
      start = j;
      i = j - 1;
    }
  }
  if (start < n) out.push_back({start, n});
  return out;
}

// ---------------------------------------------------------------------------
// Document tokenization with markup

struct DocumentTokens {
  std::vector<TokenId> ids;
  /// Per token: owning candidate and byte range in that candidate's text.
  /// Markup tokens have an empty range at 0.
  std::vector<std::size_t> owner;
  std::vector<ByteSpan> bytes;
  std::vector<bool> is_markup;
  std::vector<TokenSpan> candidates;
  std::vector<TokenSpan> sentences;
  std::vector<std::size_t> sentence_candidate;

  std::size_t size() const noexcept { return ids.size(); }
};

namespace detail {

inline std::vector<ByteSpan> candidate_sentences(const Candidate& c) {
  if (c.sentences.empty()) return segment_sentences(c.text);
  std::vector<ByteSpan> spans;
  std::size_t cursor = 0;
  for (const auto& s : c.sentences) {
    const std::size_t pos = c.text.find(s, cursor);
    if (pos == std::string::npos) throw FormatError("sentence text not found in candidate: '" + s + "'");
    spans.push_back({pos, pos + s.size()});
    cursor = pos + s.size();
  }
  // Extend to tile the text.
  if (!spans.empty()) {
    spans.front().begin = 0;
    for (std::size_t i = 0; i + 1 < spans.size(); ++i) spans[i].end = spans[i + 1].begin;
    spans.back().end = c.text.size();
  }
  return spans;
}

}  // namespace detail

/// Tokenizes every candidate in order and prefixes each run with its
/// [Paragraph=N]/[Table=N]/[List=N] markup token (N counts per kind). The
/// markup token belongs to the candidate's span and to its first sentence.
inline DocumentTokens tokenize_document(const std::vector<Candidate>& candidates, const Vocab& vocab) {
  DocumentTokens doc;
  std::array<int, 3> counters{0, 0, 0};
  for (std::size_t ci = 0; ci < candidates.size(); ++ci) {
    const Candidate& cand = candidates[ci];
    const auto kind_index = static_cast<std::size_t>(cand.kind);
    if (kind_index >= counters.size()) throw FormatError("unknown candidate kind");
    const std::size_t first = doc.size();
    doc.ids.push_back(vocab.markup(cand.kind, counters[kind_index]++));
    doc.owner.push_back(ci);
    doc.bytes.push_back({0, 0});
    doc.is_markup.push_back(true);

    const std::vector<Piece> pieces = wordpiece_pieces(cand.text, vocab);
    const std::vector<ByteSpan> sents = detail::candidate_sentences(cand);
    std::size_t p = 0;
    bool first_sentence = true;
    for (const ByteSpan& s : sents) {
      const std::size_t sent_first = first_sentence ? first : doc.size();
      while (p < pieces.size() && pieces[p].begin < s.end) {
        doc.ids.push_back(pieces[p].id);
        doc.owner.push_back(ci);
        doc.bytes.push_back({pieces[p].begin, pieces[p].end});
        doc.is_markup.push_back(false);
        ++p;
      }
      // Whitespace-only sentences carry no tokens and are dropped.
      if (doc.size() > sent_first) {
        doc.sentences.push_back({sent_first, doc.size() - 1});
        doc.sentence_candidate.push_back(ci);
        first_sentence = false;
      }
    }
    if (first_sentence) {
      // No sentence had tokens: the markup token alone forms one.
      doc.sentences.push_back({first, first});
      doc.sentence_candidate.push_back(ci);
    }
    doc.candidates.push_back({first, doc.size() - 1});
  }
  return doc;
}

// ---------------------------------------------------------------------------
// Gold answers in document token coordinates

struct GoldAnswer {
  std::string example_id;
  std::optional<std::size_t> long_candidate;
  std::optional<TokenSpan> long_span;
  /// First short span's start to last short span's end.
  std::optional<TokenSpan> short_span;
  YesNo yes_no = YesNo::kNone;

  bool has_long() const noexcept { return long_candidate.has_value(); }
  bool has_short() const noexcept { return short_span.has_value() || yes_no != YesNo::kNone; }
};

inline void validate_example(const RawExample& ex) {
  const Annotation& a = ex.annotation;
  if (!a.long_index) {
    if (!a.short_spans.empty() || a.yes_no != YesNo::kNone)
      throw FormatError(ex.id + ": short or yes/no annotation without a long answer");
    return;
  }
  if (*a.long_index >= ex.candidates.size())
    throw FormatError(ex.id + ": long answer index " + std::to_string(*a.long_index) + " outside the document");
  if (!a.short_spans.empty() && a.yes_no != YesNo::kNone)
    throw FormatError(ex.id + ": short spans and yes/no are exclusive");
  const std::size_t len = ex.candidates[*a.long_index].text.size();
  for (const ByteSpan& s : a.short_spans)
    if (s.begin >= s.end || s.end > len)
      throw FormatError(ex.id + ": short span [" + std::to_string(s.begin) + "," + std::to_string(s.end) +
                        ") outside the long answer (" + std::to_string(len) + " bytes)");
}

inline GoldAnswer resolve_gold(const RawExample& ex, const DocumentTokens& doc) {
  validate_example(ex);
  GoldAnswer g;
  g.example_id = ex.id;
  g.yes_no = ex.annotation.yes_no;
  if (!ex.annotation.long_index) return g;
  const std::size_t ci = *ex.annotation.long_index;
  g.long_candidate = ci;
  g.long_span = doc.candidates[ci];
  if (ex.annotation.short_spans.empty()) return g;

  auto spans = ex.annotation.short_spans;
  std::sort(spans.begin(), spans.end(), [](const ByteSpan& a, const ByteSpan& b) { return a.begin < b.begin; });
  auto overlapping = [&](const ByteSpan& s) {
    std::optional<TokenSpan> r;
    for (std::size_t k = doc.candidates[ci].start; k <= doc.candidates[ci].end; ++k) {
      if (doc.is_markup[k]) continue;
      if (doc.bytes[k].begin < s.end && doc.bytes[k].end > s.begin) {
        if (!r) r = TokenSpan{k, k};
        r->end = k;
      }
    }
    if (!r) throw FormatError(ex.id + ": short span covers no token");
    return *r;
  };
  g.short_span = TokenSpan{overlapping(spans.front()).start, overlapping(spans.back()).end};
  return g;
}

// ---------------------------------------------------------------------------
// Fragmentation

struct PreprocessConfig {
  std::size_t max_length = 512;
  std::size_t stride = 128;
  double keep_prob = 0.03;
};

/// Document token range [start, end) covered by one fragment.
struct Fragment {
  std::size_t index = 0;
  std::size_t start = 0;
  std::size_t end = 0;
};

/// Windows of B = L - 3 - |Q| tokens every `stride` tokens; the last window
/// is the first one reaching the end of the document.
inline std::vector<Fragment> fragment_document(std::size_t doc_length, std::size_t question_length,
                                               std::size_t max_length, std::size_t stride) {
  if (max_length < 4 || question_length >= max_length - 3)
    throw ContractError("question of " + std::to_string(question_length) + " tokens does not fit instance length " +
                        std::to_string(max_length));
  if (stride == 0) throw ContractError("stride must be positive");
  const std::size_t budget = max_length - 3 - question_length;
  std::vector<Fragment> out;
  for (std::size_t k = 0;; ++k) {
    const std::size_t start = k * stride;
    const std::size_t end = std::min(start + budget, doc_length);
    out.push_back({k, start, end});
    if (start + budget >= doc_length) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Instances

struct TrainingInstance {
  std::string example_id;
  std::size_t fragment = 0;
  /// Document token index of the first content token.
  std::size_t doc_offset = 0;

  std::vector<TokenId> tokens;        // length L
  std::vector<std::uint8_t> mask;     // 1 for real tokens
  std::size_t question_length = 0;
  /// Long-answer candidates inside the fragment; entry 0 is the [CLS] pseudo-candidate.
  std::vector<TokenSpan> candidates;
  /// Document candidate index per entry of `candidates` (-1 for [CLS]).
  std::vector<int> candidate_ids;
  /// Sentence spans; entry 0 is the [CLS] sentence ([CLS] and the question).
  std::vector<TokenSpan> sentences;

  std::size_t long_target = 0;
  std::size_t start = 0;
  std::size_t end = 0;
  AnswerType type = AnswerType::kNoAnswer;

  std::size_t length() const noexcept { return tokens.size(); }
  std::size_t content_begin() const noexcept { return question_length + 2; }
  /// Instance position -> document token index (only valid for content positions).
  std::size_t to_document(std::size_t pos) const { return pos - content_begin() + doc_offset; }

  friend bool operator==(const TrainingInstance&, const TrainingInstance&) = default;
};

/// Builds the instance for one fragment and tags it with the answer type:
/// short when every annotated short span is inside, yes/no or long when the
/// long answer is entirely inside, else no-answer with [CLS] targets.
inline TrainingInstance build_instance(const std::string& example_id, const DocumentTokens& doc, const GoldAnswer& gold,
                                       const std::vector<TokenId>& question, const Fragment& frag,
                                       std::size_t max_length, const Vocab& vocab) {
  if (frag.end > doc.size() || frag.start > frag.end) throw ContractError("fragment outside the document");
  if (question.size() + (frag.end - frag.start) + 3 > max_length)
    throw ContractError("fragment does not fit the instance length");
  TrainingInstance inst;
  inst.example_id = example_id;
  inst.fragment = frag.index;
  inst.doc_offset = frag.start;
  inst.question_length = question.size();

  inst.tokens.reserve(max_length);
  inst.tokens.push_back(vocab.cls());
  inst.tokens.insert(inst.tokens.end(), question.begin(), question.end());
  inst.tokens.push_back(vocab.sep());
  inst.tokens.insert(inst.tokens.end(), doc.ids.begin() + static_cast<std::ptrdiff_t>(frag.start),
                     doc.ids.begin() + static_cast<std::ptrdiff_t>(frag.end));
  inst.tokens.push_back(vocab.sep());
  inst.mask.assign(inst.tokens.size(), 1);
  inst.tokens.resize(max_length, vocab.pad());
  inst.mask.resize(max_length, 0);

  const std::size_t base = inst.content_begin();
  auto to_instance = [&](std::size_t d) { return d - frag.start + base; };
  auto clip = [&](const TokenSpan& s) -> std::optional<TokenSpan> {
    if (s.end < frag.start || s.start >= frag.end) return std::nullopt;
    return TokenSpan{to_instance(std::max(s.start, frag.start)), to_instance(std::min(s.end, frag.end - 1))};
  };

  inst.candidates.push_back({0, 0});
  inst.candidate_ids.push_back(-1);
  std::optional<std::size_t> gold_entry;
  for (std::size_t ci = 0; ci < doc.candidates.size(); ++ci) {
    if (auto c = clip(doc.candidates[ci])) {
      if (gold.long_candidate && *gold.long_candidate == ci) gold_entry = inst.candidates.size();
      inst.candidates.push_back(*c);
      inst.candidate_ids.push_back(static_cast<int>(ci));
    }
  }
  inst.sentences.push_back({0, question.size()});
  for (const TokenSpan& s : doc.sentences)
    if (auto c = clip(s)) inst.sentences.push_back(*c);

  auto inside = [&](const TokenSpan& s) { return s.start >= frag.start && s.end < frag.end; };
  const bool long_inside = gold.long_span && inside(*gold.long_span);

  if (gold.short_span && inside(*gold.short_span)) {
    inst.type = AnswerType::kShort;
    inst.start = to_instance(gold.short_span->start);
    inst.end = to_instance(gold.short_span->end);
    inst.long_target = *gold_entry;
  } else if (gold.yes_no != YesNo::kNone && long_inside) {
    inst.type = gold.yes_no == YesNo::kYes ? AnswerType::kYes : AnswerType::kNo;
    inst.long_target = *gold_entry;
  } else if (long_inside && !gold.short_span && gold.yes_no == YesNo::kNone) {
    inst.type = AnswerType::kLong;
    inst.long_target = *gold_entry;
  }
  return inst;
}

/// Keeps every positive; keeps each no-answer instance independently with
/// probability `keep_prob`. The draw for an instance depends only on
/// (seed, example id, fragment), so order and parallelism do not matter.
inline std::vector<TrainingInstance> downsample_null(std::vector<TrainingInstance> instances, double keep_prob,
                                                     std::uint64_t seed) {
  if (!(keep_prob >= 0.0 && keep_prob <= 1.0)) throw ContractError("keep_prob must lie in [0, 1]");
  std::vector<TrainingInstance> out;
  for (auto& inst : instances) {
    if (inst.type != AnswerType::kNoAnswer) {
      out.push_back(std::move(inst));
      continue;
    }
    std::mt19937_64 rng(derive_seed(derive_seed(seed, hash_string(inst.example_id)), inst.fragment));
    if (unit_uniform(rng) < keep_prob) out.push_back(std::move(inst));
  }
  return out;
}

struct PreprocessedExample {
  GoldAnswer gold;
  std::vector<TrainingInstance> instances;
};

inline PreprocessedExample preprocess_example(const RawExample& ex, const Vocab& vocab, const PreprocessConfig& cfg) {
  validate_example(ex);
  const DocumentTokens doc = tokenize_document(ex.candidates, vocab);
  PreprocessedExample out;
  out.gold = resolve_gold(ex, doc);
  const std::vector<TokenId> question = wordpiece_tokenize(ex.question, vocab);
  for (const Fragment& f : fragment_document(doc.size(), question.size(), cfg.max_length, cfg.stride))
    out.instances.push_back(build_instance(ex.id, doc, out.gold, question, f, cfg.max_length, vocab));
  return out;
}

// ---------------------------------------------------------------------------
// JSON

inline json to_json(const RawExample& ex) {
  json cands = json::array();
  for (const auto& c : ex.candidates) {
    json jc{{"kind", std::string(kCandidateKindNames[static_cast<std::size_t>(c.kind)])}, {"text", c.text}};
    if (!c.sentences.empty()) jc["sentences"] = c.sentences;
    cands.push_back(std::move(jc));
  }
  json ann = json::object();
  ann["long"] = ex.annotation.long_index ? json(*ex.annotation.long_index) : json(nullptr);
  json shorts = json::array();
  for (const auto& s : ex.annotation.short_spans) shorts.push_back({s.begin, s.end});
  ann["short"] = std::move(shorts);
  ann["yes_no"] = ex.annotation.yes_no == YesNo::kNone ? json(nullptr)
                                                       : json(ex.annotation.yes_no == YesNo::kYes ? "yes" : "no");
  return json{{"example_id", ex.id}, {"question", ex.question}, {"candidates", std::move(cands)},
              {"annotation", std::move(ann)}};
}

inline YesNo parse_yes_no(const json& j) {
  if (j.is_null()) return YesNo::kNone;
  const std::string s = j.get<std::string>();
  if (s == "yes") return YesNo::kYes;
  if (s == "no") return YesNo::kNo;
  throw FormatError("yes_no must be \"yes\", \"no\" or null, got '" + s + "'");
}

inline RawExample raw_example_from_json(const json& j) {
  try {
    RawExample ex;
    ex.id = j.at("example_id").get<std::string>();
    ex.question = j.at("question").get<std::string>();
    for (const auto& jc : j.at("candidates")) {
      Candidate c;
      c.kind = parse_candidate_kind(jc.at("kind").get<std::string>());
      c.text = jc.at("text").get<std::string>();
      if (jc.contains("sentences")) c.sentences = jc["sentences"].get<std::vector<std::string>>();
      ex.candidates.push_back(std::move(c));
    }
    if (j.contains("annotation")) {
      const json& a = j["annotation"];
      if (a.contains("long") && !a["long"].is_null()) ex.annotation.long_index = a["long"].get<std::size_t>();
      if (a.contains("short"))
        for (const auto& s : a["short"]) ex.annotation.short_spans.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()});
      if (a.contains("yes_no")) ex.annotation.yes_no = parse_yes_no(a["yes_no"]);
    }
    validate_example(ex);
    return ex;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed example: ") + e.what());
  }
}

inline json span_json(const TokenSpan& s) { return json::array({s.start, s.end}); }

inline json to_json(const TrainingInstance& inst) {
  json cands = json::array(), sents = json::array();
  for (const auto& s : inst.candidates) cands.push_back(span_json(s));
  for (const auto& s : inst.sentences) sents.push_back(span_json(s));
  return json{{"provenance", {{"example_id", inst.example_id}, {"fragment", inst.fragment}, {"doc_offset", inst.doc_offset}}},
              {"c", inst.tokens},
              {"mask", inst.mask},
              {"question_len", inst.question_length},
              {"S", std::move(cands)},
              {"S_doc", inst.candidate_ids},
              {"sentences", std::move(sents)},
              {"l", inst.long_target},
              {"s", inst.start},
              {"e", inst.end},
              {"t", static_cast<int>(inst.type)}};
}

inline TokenSpan span_from_json(const json& j) { return {j.at(0).get<std::size_t>(), j.at(1).get<std::size_t>()}; }

inline TrainingInstance instance_from_json(const json& j) {
  try {
    TrainingInstance inst;
    const json& prov = j.at("provenance");
    inst.example_id = prov.at("example_id").get<std::string>();
    inst.fragment = prov.at("fragment").get<std::size_t>();
    inst.doc_offset = prov.at("doc_offset").get<std::size_t>();
    inst.tokens = j.at("c").get<std::vector<TokenId>>();
    inst.mask = j.at("mask").get<std::vector<std::uint8_t>>();
    inst.question_length = j.at("question_len").get<std::size_t>();
    for (const auto& s : j.at("S")) inst.candidates.push_back(span_from_json(s));
    inst.candidate_ids = j.at("S_doc").get<std::vector<int>>();
    for (const auto& s : j.at("sentences")) inst.sentences.push_back(span_from_json(s));
    inst.long_target = j.at("l").get<std::size_t>();
    inst.start = j.at("s").get<std::size_t>();
    inst.end = j.at("e").get<std::size_t>();
    const int t = j.at("t").get<int>();
    if (t < 0 || t >= kNumAnswerTypes) throw FormatError("answer type out of range: " + std::to_string(t));
    inst.type = static_cast<AnswerType>(t);
    if (inst.tokens.size() != inst.mask.size()) throw FormatError("c and mask lengths differ");
    if (inst.candidates.empty() || inst.candidates.size() != inst.candidate_ids.size())
      throw FormatError("S and S_doc must be non-empty and of equal length");
    if (inst.long_target >= inst.candidates.size()) throw FormatError("l outside S");
    if (inst.start > inst.end || inst.end >= inst.tokens.size()) throw FormatError("invalid s/e");
    return inst;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed instance: ") + e.what());
  }
}

inline json to_json(const GoldAnswer& g) {
  json j{{"example_id", g.example_id}};
  j["long"] = g.long_candidate ? json(*g.long_candidate) : json(nullptr);
  j["long_span"] = g.long_span ? span_json(*g.long_span) : json(nullptr);
  if (g.yes_no != YesNo::kNone) {
    j["short"] = g.yes_no == YesNo::kYes ? "yes" : "no";
  } else {
    j["short"] = g.short_span ? span_json(*g.short_span) : json(nullptr);
  }
  return j;
}

inline GoldAnswer gold_from_json(const json& j) {
  try {
    GoldAnswer g;
    g.example_id = j.at("example_id").get<std::string>();
    if (!j.at("long").is_null()) g.long_candidate = j["long"].get<std::size_t>();
    if (j.contains("long_span") && !j["long_span"].is_null()) g.long_span = span_from_json(j["long_span"]);
    const json& s = j.at("short");
    if (s.is_string()) {
      g.yes_no = parse_yes_no(s);
    } else if (!s.is_null()) {
      g.short_span = span_from_json(s);
    }
    return g;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed gold record: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// JSONL helpers

template <class T, class Parse>
std::vector<T> read_jsonl(const std::string& path, Parse parse) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  std::vector<T> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse(json::parse(line)));
    } catch (const json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

template <class Range>
void write_jsonl(const std::string& path, const Range& items) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path);
  for (const auto& item : items) out << to_json(item).dump() << '\n';
}

}  // namespace mgrc
