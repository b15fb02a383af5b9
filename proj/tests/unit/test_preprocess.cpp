#include <catch_amalgamated.hpp>

#include <random>
#include <set>

#include "mgrc/fixtures.hpp"
#include "mgrc/preprocess.hpp"

using namespace mgrc;

TEST_CASE("wordpiece greedy longest match") {
  Vocab v = Vocab::with_reserved({"play", "##ing", "##in", "p", "the"});
  CHECK(wordpiece_tokenize("", v).empty());
  auto ids = wordpiece_tokenize("playing", v);
  REQUIRE(ids.size() == 2);
  CHECK(v.piece(ids[0]) == "play");
  CHECK(v.piece(ids[1]) == "##ing");
  CHECK(wordpiece_tokenize("qzx", v) == std::vector<TokenId>{v.unk()});
  // Uncased, punctuation split off.
  auto mixed = wordpiece_tokenize("The PLAYING.", v);
  REQUIRE(mixed.size() == 4);
  CHECK(v.piece(mixed[0]) == "the");
  CHECK(mixed[3] == v.unk());
}

TEST_CASE("wordpiece offsets cover the source bytes") {
  Vocab v = Vocab::with_reserved({"play", "##ing", "go"});
  auto pieces = wordpiece_pieces("go  playing", v);
  REQUIRE(pieces.size() == 3);
  CHECK(pieces[1].begin == 4);
  CHECK(pieces[1].end == 8);
  CHECK(pieces[2].begin == 8);
  CHECK(pieces[2].end == 11);
}

TEST_CASE("vocab requires specials exactly once") {
  CHECK_THROWS_AS(Vocab({"[PAD]", "[UNK]", "[CLS]"}), FormatError);
  auto entries = Vocab::reserved_entries();
  entries.push_back("[CLS]");
  CHECK_THROWS_AS(Vocab(entries), FormatError);
  Vocab v = Vocab::with_reserved({"a"});
  CHECK(v.markup(CandidateKind::kTable, 3) == v.find("[Table=3]"));
  CHECK(v.markup(CandidateKind::kList, 500) == v.find("[List=49]"));
}

TEST_CASE("sentence segmentation rules") {
  CHECK(segment_sentences("A b. C d.").size() == 2);
  CHECK(segment_sentences("no terminator").size() == 1);
  CHECK(segment_sentences("").empty());
  // Lowercase after the terminator does not split.
  CHECK(segment_sentences("e.g. this stays. One more").size() == 2);
  CHECK(segment_sentences("Really?! Yes. ").size() == 2);

  std::mt19937_64 rng(1);
  const std::string alphabet = "ab .?!ABC\n";
  for (int trial = 0; trial < 300; ++trial) {
    std::string s;
    const auto n = rng() % 40;
    for (std::size_t i = 0; i < n; ++i) s.push_back(alphabet[rng() % alphabet.size()]);
    auto spans = segment_sentences(s);
    // Tiling: every byte in exactly one sentence.
    std::size_t cursor = 0;
    for (const auto& sp : spans) {
      CHECK(sp.begin == cursor);
      CHECK(sp.end > sp.begin);
      cursor = sp.end;
    }
    CHECK(cursor == s.size());
  }
}

TEST_CASE("markup tokens count per kind") {
  Vocab v = Vocab::with_reserved({"x"});
  std::vector<Candidate> cands{{CandidateKind::kParagraph, "x", {}},
                               {CandidateKind::kTable, "x", {}},
                               {CandidateKind::kParagraph, "x", {}}};
  auto doc = tokenize_document(cands, v);
  REQUIRE(doc.candidates.size() == 3);
  CHECK(v.piece(doc.ids[doc.candidates[0].start]) == "[Paragraph=0]");
  CHECK(v.piece(doc.ids[doc.candidates[1].start]) == "[Table=0]");
  CHECK(v.piece(doc.ids[doc.candidates[2].start]) == "[Paragraph=1]");
  // Markup belongs to the first sentence of its candidate.
  CHECK(doc.sentences[0].start == doc.candidates[0].start);

  CHECK(tokenize_document({}, v).ids.empty());
}

TEST_CASE("empty candidate still yields a markup-only sentence") {
  Vocab v = Vocab::with_reserved({"x"});
  auto doc = tokenize_document({{CandidateKind::kList, "", {}}}, v);
  REQUIRE(doc.sentences.size() == 1);
  CHECK(doc.sentences[0] == TokenSpan{0, 0});
}

TEST_CASE("fragment window arithmetic") {
  auto frags = fragment_document(600, 10, 512, 128);
  REQUIRE(frags.size() == 2);
  CHECK(frags[0].start == 0);
  CHECK(frags[1].start == 128);
  CHECK(frags[0].end == 499);
  CHECK(frags[1].end == 600);

  CHECK(fragment_document(499, 10, 512, 128).size() == 1);
  CHECK(fragment_document(0, 10, 512, 128).size() == 1);
  CHECK_THROWS_AS(fragment_document(100, 509, 512, 128), ContractError);

  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t len = rng() % 3000, q = rng() % 60, stride = 1 + rng() % 200;
    auto fs = fragment_document(len, q, 512, stride);
    std::size_t covered = 0;
    for (const auto& f : fs) {
      CHECK(f.start <= covered);
      covered = std::max(covered, f.end);
      CHECK(f.end - f.start <= 512 - 3 - q);
    }
    CHECK(covered == len);
    // Only the last window reaches the end.
    for (std::size_t i = 0; i + 1 < fs.size(); ++i) CHECK(fs[i].end < len);
  }
}

TEST_CASE("answer-type tagging on the 12-case fixture") {
  const Vocab v = fixtures::labeling_vocab();
  const auto cfg = fixtures::labeling_config();
  std::set<AnswerType> seen;
  for (const auto& c : fixtures::labeling_cases()) {
    INFO(c.name);
    RawExample ex = fixtures::labeling_document();
    ex.annotation = c.annotation;
    auto pre = preprocess_example(ex, v, cfg);
    REQUIRE(pre.instances.size() == 5);
    const auto& inst = pre.instances[c.fragment];
    CHECK(inst.type == c.type);
    CHECK(inst.long_target == c.l);
    CHECK(inst.start == c.s);
    CHECK(inst.end == c.e);
    seen.insert(inst.type);
  }
  CHECK(seen.size() == 5);
}

TEST_CASE("instance layout and invariants") {
  const Vocab v = fixtures::labeling_vocab();
  RawExample ex = fixtures::labeling_document();
  ex.annotation.long_index = 1;
  ex.annotation.short_spans = {fixtures::words(ex, 1, 2, 4)};
  auto pre = preprocess_example(ex, v, fixtures::labeling_config());
  for (const auto& inst : pre.instances) {
    CHECK(inst.length() == 20);
    CHECK(inst.tokens[0] == v.cls());
    CHECK(inst.tokens[inst.question_length + 1] == v.sep());
    std::size_t real = 0;
    for (auto m : inst.mask) real += m;
    for (std::size_t i = real; i < inst.length(); ++i) CHECK(inst.tokens[i] == v.pad());
    CHECK(inst.tokens[real - 1] == v.sep());
    CHECK(inst.candidates[0] == TokenSpan{0, 0});
    CHECK(inst.start <= inst.end);
    if (inst.type == AnswerType::kNoAnswer) {
      CHECK(inst.start == 0);
      CHECK(inst.end == 0);
      CHECK(inst.long_target == 0);
    }
    if (inst.type == AnswerType::kShort) {
      // Remapped span points at the tokenization of the annotated text.
      const auto& sp = ex.annotation.short_spans[0];
      auto want = wordpiece_tokenize(ex.candidates[1].text.substr(sp.begin, sp.end - sp.begin), v);
      std::vector<TokenId> got(inst.tokens.begin() + inst.start, inst.tokens.begin() + inst.end + 1);
      CHECK(got == want);
    }
    // Top-level candidates do not overlap.
    for (std::size_t i = 2; i < inst.candidates.size(); ++i) CHECK(inst.candidates[i - 1].end < inst.candidates[i].start);
  }
  // Short span shorter than the budget is fully contained in some fragment.
  bool any = false;
  for (const auto& inst : pre.instances) any = any || inst.type == AnswerType::kShort;
  CHECK(any);
}

TEST_CASE("annotation offsets outside the document are rejected") {
  const Vocab v = fixtures::labeling_vocab();
  RawExample ex = fixtures::labeling_document();
  ex.annotation.long_index = 9;
  CHECK_THROWS_AS(preprocess_example(ex, v, fixtures::labeling_config()), FormatError);
  ex.annotation.long_index = 1;
  ex.annotation.short_spans = {{5, 500}};
  CHECK_THROWS_AS(preprocess_example(ex, v, fixtures::labeling_config()), FormatError);
}

TEST_CASE("downsampling null instances") {
  const Vocab v = fixtures::labeling_vocab();
  std::vector<TrainingInstance> all;
  for (int d = 0; d < 30; ++d) {
    RawExample ex = fixtures::labeling_document();
    ex.id = "doc" + std::to_string(d);
    ex.annotation.long_index = 1;
    ex.annotation.short_spans = {fixtures::words(ex, 1, 1, 2)};
    auto pre = preprocess_example(ex, v, fixtures::labeling_config());
    all.insert(all.end(), pre.instances.begin(), pre.instances.end());
  }
  std::size_t positives = 0;
  for (const auto& i : all) positives += i.type != AnswerType::kNoAnswer;

  CHECK(downsample_null(all, 1.0, 5) == all);
  auto none = downsample_null(all, 0.0, 5);
  CHECK(none.size() == positives);
  for (const auto& i : none) CHECK(i.type != AnswerType::kNoAnswer);

  auto a = downsample_null(all, 0.4, 17);
  auto b = downsample_null(all, 0.4, 17);
  CHECK(a == b);
  CHECK(a.size() > positives);
  CHECK(a.size() < all.size());
  // Order preserved.
  std::vector<TrainingInstance> reversed(all.rbegin(), all.rend());
  auto r = downsample_null(reversed, 0.4, 17);
  CHECK(std::vector<TrainingInstance>(r.rbegin(), r.rend()) == a);
  CHECK_THROWS_AS(downsample_null(all, 1.5, 1), ContractError);
}

TEST_CASE("JSON round trip of examples and instances") {
  const Vocab v = fixtures::labeling_vocab();
  RawExample ex = fixtures::labeling_document();
  ex.annotation.long_index = 1;
  ex.annotation.short_spans = {fixtures::words(ex, 1, 1, 2)};
  ex.candidates[2].kind = CandidateKind::kTable;
  auto back = raw_example_from_json(json::parse(to_json(ex).dump()));
  CHECK(to_json(back) == to_json(ex));

  auto pre = preprocess_example(ex, v, fixtures::labeling_config());
  for (const auto& inst : pre.instances) CHECK(instance_from_json(json::parse(to_json(inst).dump())) == inst);
  auto g = gold_from_json(to_json(pre.gold));
  CHECK(g.long_candidate == pre.gold.long_candidate);
  CHECK(g.short_span == pre.gold.short_span);

  CHECK_THROWS_AS(raw_example_from_json(json::parse(R"({"example_id":"x","question":"q","candidates":[{"kind":"figure","text":"a"}]})")),
                  FormatError);
}
