#pragma once

// Synthetic QA corpus with planted answers.
//
// Every document is a few paragraphs of filler sentences plus "decoy" facts
// of the form "The <key> is in <entity>." An answerable document asks
// "where is the <key> ?" and contains that key exactly once, in the gold
// paragraph, followed by the entity that is the short answer. A yes/no
// document states "The <key> is true." or "... false." and asks whether the
// key is true. A null document asks about a key it never mentions.

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mgrc/preprocess.hpp"
#include "mgrc/rng.hpp"

namespace mgrc {

struct IntRange {
  std::size_t lo = 1;
  std::size_t hi = 1;
};

struct CorpusSpec {
  std::uint64_t seed = 1;
  std::size_t n_docs = 64;
  IntRange paragraphs{3, 5};
  IntRange sentences{1, 3};
  /// Filler sentence length in words, terminator excluded.
  IntRange tokens{4, 8};
  double answerable_fraction = 0.5;
  double yes_no_fraction = 0.0;
  /// Number of pseudo-words; split into keys, entities and filler.
  std::size_t vocab_size = 200;

  std::size_t n_keys() const { return vocab_size / 6; }
  std::size_t n_entities() const { return vocab_size / 6; }

  void validate() const {
    for (const IntRange* r : {&paragraphs, &sentences, &tokens})
      if (r->lo == 0 || r->lo > r->hi) throw ContractError("corpus ranges must be non-empty with a positive lower end");
    if (!(answerable_fraction >= 0 && answerable_fraction <= 1 && yes_no_fraction >= 0 && yes_no_fraction <= 1 &&
          answerable_fraction + yes_no_fraction <= 1))
      throw ContractError("answerable and yes/no fractions must lie in [0, 1] and sum to at most 1");
    if (vocab_size < 36 || vocab_size > 4900) throw ContractError("synthetic vocab_size must lie in [36, 4900]");
    // Decoys need keys and entities other than the planted ones.
    if (n_keys() < paragraphs.hi + 2 || n_entities() < paragraphs.hi + 2)
      throw ContractError("synthetic vocab_size too small for the paragraph count");
  }
};

inline nlohmann::json to_json(const CorpusSpec& s) {
  return {{"seed", s.seed},
          {"n_docs", s.n_docs},
          {"paragraphs", {s.paragraphs.lo, s.paragraphs.hi}},
          {"sentences", {s.sentences.lo, s.sentences.hi}},
          {"tokens", {s.tokens.lo, s.tokens.hi}},
          {"answerable_fraction", s.answerable_fraction},
          {"yes_no_fraction", s.yes_no_fraction},
          {"vocab_size", s.vocab_size}};
}

enum class PlantKind { kNull, kShort, kYesNo };

struct Corpus {
  Vocab vocab;
  std::vector<RawExample> examples;
  std::vector<GoldAnswer> gold;
  std::vector<PlantKind> kinds;
};

namespace synth_detail {

inline const std::vector<std::string>& template_words() {
  static const std::vector<std::string> w{"where", "is", "the", "in", "true", "false", ".", "?"};
  return w;
}

/// Pronounceable consonant-vowel words, distinct for i < 4900.
inline std::vector<std::string> pseudo_words(std::size_t n) {
  static const std::string cons = "bdfgklmnprstvz", vow = "aeiou";
  std::vector<std::string> syl;
  for (char c : cons)
    for (char v : vow) syl.push_back(std::string{c, v});
  const std::set<std::string> taken(template_words().begin(), template_words().end());
  std::vector<std::string> out;
  for (std::size_t i = 0; out.size() < n; ++i) {
    std::string w = syl[i % 70] + syl[(i / 70 + i) % 70];
    if (!taken.count(w)) out.push_back(std::move(w));
  }
  return out;
}

inline std::string capitalized(std::string w) {
  w[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
  return w;
}

inline std::size_t draw(std::mt19937_64& rng, IntRange r) {
  return static_cast<std::size_t>(uniform_int(rng, static_cast<std::int64_t>(r.lo), static_cast<std::int64_t>(r.hi)));
}

/// k distinct indices from [0, n) excluding `skip`.
inline std::vector<std::size_t> distinct(std::mt19937_64& rng, std::size_t n, std::size_t k, std::size_t skip) {
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < n; ++i)
    if (i != skip) pool.push_back(i);
  seeded_shuffle(pool, rng);
  pool.resize(k);
  return pool;
}

struct Words {
  std::vector<std::string> keys, entities, filler;
};

inline Words split_words(const CorpusSpec& spec) {
  auto all = pseudo_words(spec.vocab_size);
  Words w;
  w.keys.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(spec.n_keys()));
  w.entities.assign(all.begin() + static_cast<std::ptrdiff_t>(spec.n_keys()),
                    all.begin() + static_cast<std::ptrdiff_t>(spec.n_keys() + spec.n_entities()));
  w.filler.assign(all.begin() + static_cast<std::ptrdiff_t>(spec.n_keys() + spec.n_entities()), all.end());
  return w;
}

// Paragraph assembly that remembers the byte range of one planted word.
struct ParagraphBuilder {
  Candidate cand;
  std::optional<ByteSpan> marked;

  void sentence(const std::vector<std::string>& words, std::optional<std::size_t> mark = {}) {
    std::string s;
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (i > 0 && words[i] != "." && words[i] != "?") s += ' ';
      if (mark && *mark == i) marked = ByteSpan{cand.text.size() + (cand.text.empty() ? 0 : 1) + s.size(), 0};
      s += i == 0 ? capitalized(words[i]) : words[i];
      if (mark && *mark == i) marked->end = cand.text.size() + (cand.text.empty() ? 0 : 1) + s.size();
    }
    if (!cand.text.empty()) cand.text += ' ';
    cand.text += s;
    cand.sentences.push_back(s);
  }
};

}  // namespace synth_detail

/// Wordpiece vocabulary covering every word the generator can emit.
inline Vocab synthetic_vocab(const CorpusSpec& spec) {
  std::vector<std::string> pieces = synth_detail::template_words();
  for (auto& w : synth_detail::pseudo_words(spec.vocab_size)) pieces.push_back(std::move(w));
  return Vocab::with_reserved(pieces);
}

/// Plant kinds for every document: exact counts round(n * fraction), order
/// shuffled by the seed.
inline std::vector<PlantKind> plant_schedule(const CorpusSpec& spec) {
  const auto n = spec.n_docs;
  const auto n_short = static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.answerable_fraction));
  const auto n_yn = std::min(n - n_short, static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.yes_no_fraction)));
  std::vector<PlantKind> kinds(n, PlantKind::kNull);
  std::fill_n(kinds.begin(), n_short, PlantKind::kShort);
  std::fill_n(kinds.begin() + static_cast<std::ptrdiff_t>(n_short), n_yn, PlantKind::kYesNo);
  std::mt19937_64 rng(derive_seed(spec.seed, 0x6b696e6473));
  seeded_shuffle(kinds, rng);
  return kinds;
}

/// One document from its own substream.
inline RawExample generate_document(const CorpusSpec& spec, const synth_detail::Words& w, std::size_t index, PlantKind kind) {
  using namespace synth_detail;
  std::mt19937_64 rng(derive_seed(spec.seed, index));
  RawExample ex;
  ex.id = "synth-" + std::to_string(spec.seed) + "-" + std::to_string(index);

  const std::size_t n_par = draw(rng, spec.paragraphs);
  const std::size_t key = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(w.keys.size()) - 1));
  const std::size_t entity = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(w.entities.size()) - 1));
  const std::size_t gold_par = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(n_par) - 1));
  // One decoy fact per paragraph, none using the asked key or planted entity.
  const auto decoy_keys = distinct(rng, w.keys.size(), n_par, key);
  const auto decoy_entities = distinct(rng, w.entities.size(), n_par, entity);
  const bool polarity = unit_uniform(rng) < 0.5;

  ex.question = kind == PlantKind::kYesNo ? "is the " + w.keys[key] + " true ?" : "where is the " + w.keys[key] + " ?";

  for (std::size_t p = 0; p < n_par; ++p) {
    ParagraphBuilder b;
    const std::size_t n_sent = draw(rng, spec.sentences);
    // Facts go at a random sentence slot; the planted one after the decoy.
    const bool planted = kind != PlantKind::kNull && p == gold_par;
    const std::size_t total = n_sent + 1 + (planted ? 1 : 0);
    const auto decoy_slot = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(total) - 1));
    std::size_t plant_slot = total;
    if (planted) {
      plant_slot = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(total) - 2));
      if (plant_slot >= decoy_slot) ++plant_slot;
    }
    for (std::size_t s = 0; s < total; ++s) {
      if (s == decoy_slot) {
        b.sentence({"the", w.keys[decoy_keys[p]], "is", "in", w.entities[decoy_entities[p]], "."});
      } else if (s == plant_slot) {
        if (kind == PlantKind::kShort)
          b.sentence({"the", w.keys[key], "is", "in", w.entities[entity], "."}, 4);
        else
          b.sentence({"the", w.keys[key], "is", polarity ? "true" : "false", "."});
      } else {
        std::vector<std::string> words;
        const std::size_t len = draw(rng, spec.tokens);
        for (std::size_t k = 0; k < len; ++k)
          words.push_back(w.filler[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(w.filler.size()) - 1))]);
        words.push_back(".");
        b.sentence(words);
      }
    }
    if (planted) {
      ex.annotation.long_index = p;
      if (kind == PlantKind::kShort) ex.annotation.short_spans.push_back(*b.marked);
      if (kind == PlantKind::kYesNo) ex.annotation.yes_no = polarity ? YesNo::kYes : YesNo::kNo;
    }
    ex.candidates.push_back(std::move(b.cand));
  }
  return ex;
}

/// Pure function of the spec.
inline Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  const auto words = synth_detail::split_words(spec);
  Corpus c{synthetic_vocab(spec), {}, {}, plant_schedule(spec)};
  for (std::size_t i = 0; i < spec.n_docs; ++i) {
    c.examples.push_back(generate_document(spec, words, i, c.kinds[i]));
    c.gold.push_back(resolve_gold(c.examples.back(), tokenize_document(c.examples.back().candidates, c.vocab)));
  }
  return c;
}

}  // namespace mgrc
