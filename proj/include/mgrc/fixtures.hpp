#pragma once

// Small hand-built inputs shared by the unit tests and the self-test suites.

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mgrc/preprocess.hpp"

namespace mgrc::fixtures {

/// Hand-assembled instance: [CLS] q.. [SEP] then, per candidate, its
/// sentences of the given token counts, then [SEP] and padding up to L.
/// Token ids are arbitrary small integers (id 1 for every content token
/// unless `vocab_size` asks for variety).
inline TrainingInstance layout_instance(std::size_t question_length,
                                        const std::vector<std::vector<std::size_t>>& candidate_sentences,
                                        std::size_t L = 0, int vocab_size = 0) {
  TrainingInstance inst;
  inst.example_id = "layout";
  inst.question_length = question_length;
  std::vector<TokenId> toks{2};
  for (std::size_t i = 0; i < question_length; ++i) toks.push_back(vocab_size ? 4 + static_cast<int>(i) % (vocab_size - 4) : 1);
  toks.push_back(3);
  inst.candidates.push_back({0, 0});
  inst.candidate_ids.push_back(-1);
  inst.sentences.push_back({0, question_length});
  int cand_id = 0;
  for (const auto& sents : candidate_sentences) {
    const std::size_t cstart = toks.size();
    for (std::size_t n : sents) {
      const std::size_t sstart = toks.size();
      for (std::size_t k = 0; k < n; ++k)
        toks.push_back(vocab_size ? 4 + static_cast<int>(toks.size() * 7 % (vocab_size - 4)) : 1);
      inst.sentences.push_back({sstart, toks.size() - 1});
    }
    inst.candidates.push_back({cstart, toks.size() - 1});
    inst.candidate_ids.push_back(cand_id++);
  }
  toks.push_back(3);
  inst.mask.assign(toks.size(), 1);
  if (L < toks.size()) L = toks.size();
  inst.mask.resize(L, 0);
  toks.resize(L, 0);
  inst.tokens = std::move(toks);
  return inst;
}

/// Layout with random question length and candidate/sentence/token counts.
inline TrainingInstance random_layout(std::mt19937_64& rng, std::size_t max_candidates = 5, int vocab_size = 0) {
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return static_cast<std::size_t>(uniform_int(rng, static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
  };
  const std::size_t q = pick(vocab_size ? 1 : 0, 6);
  std::vector<std::vector<std::size_t>> layout(pick(1, max_candidates));
  for (auto& c : layout) {
    c.resize(pick(1, 4));
    for (auto& s : c) s = pick(1, 6);
  }
  return layout_instance(q, layout, 0, vocab_size);
}

// Twelve hand-traced tagging cases over one small document.
//
// Question "q1 q2" (2 tokens), L = 20, stride = 5, so the content budget is
// 15. The document has four candidates; candidate k is a markup token plus
// the seven words t{10k}..t{10k+6}, i.e. doc tokens [8k, 8k+7]. Fragments:
//   0:[0,15) 1:[5,20) 2:[10,25) 3:[15,30) 4:[20,32)
// Instance position of doc token d in fragment f is d - start(f) + 4.
inline Vocab labeling_vocab() {
  std::vector<std::string> words{"q1", "q2"};
  for (int i = 0; i < 40; ++i) words.push_back("t" + std::to_string(i));
  return Vocab::with_reserved(words);
}

inline RawExample labeling_document() {
  RawExample ex;
  ex.id = "fixture";
  ex.question = "q1 q2";
  for (int k = 0; k < 4; ++k) {
    std::string text;
    for (int w = 0; w < 7; ++w) text += (w ? " t" : "t") + std::to_string(10 * k + w);
    ex.candidates.push_back({CandidateKind::kParagraph, text, {}});
  }
  return ex;
}

// Byte range of words [a, b] of a candidate whose words are all 2 or 3 chars.
inline ByteSpan words(const RawExample& ex, std::size_t cand, int a, int b) {
  const std::string& text = ex.candidates[cand].text;
  std::size_t pos = 0, begin = 0;
  for (int w = 0; w <= b; ++w) {
    const std::size_t end = text.find(' ', pos);
    if (w == a) begin = pos;
    if (w == b) return {begin, end == std::string::npos ? text.size() : end};
    pos = end + 1;
  }
  return {0, 0};
}

struct LabelCase {
  std::string name;
  Annotation annotation;
  std::size_t fragment;
  AnswerType type;
  std::size_t l, s, e;
};

inline std::vector<LabelCase> labeling_cases() {
  const RawExample ex = labeling_document();
  auto ann = [](std::optional<std::size_t> lng, std::vector<ByteSpan> shorts, YesNo yn = YesNo::kNone) {
    Annotation a;
    a.long_index = lng;
    a.short_spans = std::move(shorts);
    a.yes_no = yn;
    return a;
  };
  return {
      {"short, one span, long inside", ann(1, {words(ex, 1, 1, 2)}), 1, AnswerType::kShort, 2, 9, 10},
      {"short, two spans collapse to outer bounds", ann(1, {words(ex, 1, 4, 5), words(ex, 1, 1, 1)}), 1,
       AnswerType::kShort, 2, 9, 13},
      {"short inside, long clipped", ann(1, {words(ex, 1, 1, 2)}), 0, AnswerType::kShort, 2, 14, 15},
      {"short straddles fragment end", ann(1, {words(ex, 1, 5, 6)}), 0, AnswerType::kNoAnswer, 0, 0, 0},
      {"yes, long inside", ann(1, {}, YesNo::kYes), 1, AnswerType::kYes, 2, 0, 0},
      {"no, long inside", ann(1, {}, YesNo::kNo), 1, AnswerType::kNo, 2, 0, 0},
      {"yes, long clipped", ann(1, {}, YesNo::kYes), 0, AnswerType::kNoAnswer, 0, 0, 0},
      {"long only, inside", ann(1, {}), 1, AnswerType::kLong, 2, 0, 0},
      {"long only, clipped", ann(1, {}), 2, AnswerType::kNoAnswer, 0, 0, 0},
      {"unanswerable example", ann(std::nullopt, {}), 1, AnswerType::kNoAnswer, 0, 0, 0},
      {"fragment misses the long answer", ann(1, {words(ex, 1, 1, 2)}), 4, AnswerType::kNoAnswer, 0, 0, 0},
      {"short in the last fragment", ann(3, {words(ex, 3, 0, 1)}), 4, AnswerType::kShort, 2, 9, 10},
  };
}

inline PreprocessConfig labeling_config() {
  PreprocessConfig cfg;
  cfg.max_length = 20;
  cfg.stride = 5;
  cfg.keep_prob = 1.0;
  return cfg;
}

}  // namespace mgrc::fixtures
