#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "mgrc/fixtures.hpp"
#include "mgrc/gradcheck.hpp"
#include "mgrc/heads.hpp"

using namespace mgrc;
using fixtures::layout_instance;

namespace {

EncoderConfig micro(std::size_t layers = 1) {
  EncoderConfig c;
  c.d_model = 8;
  c.heads = 2;
  c.n_layers = layers;
  c.d_ff = 16;
  c.dropout = 0.0;
  c.vocab_size = 30;
  c.max_position = 32;
  c.init_std = 0.5;
  return c;
}

void zero_heads(ParamStore<double>& p) {
  for (auto& [name, t] : p)
    if (name.rfind("head.", 0) == 0)
      for (double& v : t.data()) v = 0.0;
}

double log_softmax_at(const std::vector<double>& x, std::size_t k) {
  double mx = -INFINITY;
  for (double v : x) mx = std::max(mx, v);
  double z = 0;
  for (double v : x)
    if (std::isfinite(v)) z += std::exp(v - mx);
  return x[k] - mx - std::log(z);
}

// Single-candidate fragment: [CLS] q [SEP] content... with hand-set logits.
ScoreSet table(std::size_t fragment, std::size_t doc_offset, std::vector<TokenSpan> cands, std::vector<int> ids,
               std::vector<double> long_logits, std::vector<double> type_logits, std::size_t L = 12) {
  ScoreSet s;
  s.example_id = "doc";
  s.fragment = fragment;
  s.doc_offset = doc_offset;
  s.content_begin = 2;
  s.start.assign(L, 0.0);
  s.end.assign(L, 0.0);
  s.start[1] = s.end[1] = -INFINITY;
  s.candidates = std::move(cands);
  s.candidate_ids = std::move(ids);
  s.long_logits = std::move(long_logits);
  s.type_logits = std::move(type_logits);
  return s;
}

ScoreSet random_table(std::mt19937_64& rng, std::size_t fragment) {
  const std::size_t L = 16;
  std::vector<TokenSpan> cands{{0, 0}};
  std::vector<int> ids{-1};
  std::size_t pos = 2;
  int id = static_cast<int>(fragment);
  while (pos + 2 < L) {
    const std::size_t len = static_cast<std::size_t>(uniform_int(rng, 1, 4));
    cands.push_back({pos, std::min(pos + len - 1, L - 2)});
    ids.push_back(id++);
    pos += len;
  }
  std::vector<double> ll(cands.size()), tl(5);
  for (double& v : ll) v = std::round(standard_normal(rng) * 4) / 4;
  for (double& v : tl) v = std::round(standard_normal(rng) * 4) / 4;
  ScoreSet s = table(fragment, fragment * 3, cands, ids, ll, tl, L);
  for (std::size_t i = 2; i < L; ++i) {
    s.start[i] = standard_normal(rng);
    s.end[i] = standard_normal(rng);
  }
  s.start[L - 1] = s.end[L - 1] = -INFINITY;
  return s;
}

}  // namespace

TEST_CASE("score_nodes shapes and masking") {
  const EncoderConfig c = micro();
  auto p = init_model_params<double>(c, 1);
  const auto inst = layout_instance(3, {{2, 2}, {3}}, 20, 30);
  const HierGraph g = build_graph(inst);

  SECTION("zero head weights give zero logits") {
    zero_heads(p);
    Tape<double> tape;
    Bound<double> b(tape, p);
    const auto s = forward(b, c, inst);
    CHECK(s.start.shape() == Shape{1, 20});
    CHECK(s.long_logits.value().size() == inst.candidates.size());
    CHECK(s.type_logits.value().size() == 5);
    for (auto v : {s.start, s.end, s.long_logits, s.type_logits})
      for (double x : v.value().data()) CHECK(x == 0.0);
  }

  SECTION("question, separator and padding positions are masked") {
    const Mask m = span_mask(inst, g);
    CHECK(m[0] == 1);
    for (std::size_t i = 1; i <= 4; ++i) CHECK(m[i] == 0);
    for (std::size_t i = 5; i < 12; ++i) CHECK(m[i] == 1);
    for (std::size_t i = 12; i < 20; ++i) CHECK(m[i] == 0);
    const ScoreSet s = predict_scores(p, c, inst);
    for (std::size_t i = 0; i < 20; ++i) CHECK(std::isfinite(s.start[i]) == static_cast<bool>(m[i]));
    const auto arg = std::max_element(s.start.begin(), s.start.end()) - s.start.begin();
    CHECK(m[static_cast<std::size_t>(arg)] == 1);
  }
}

TEST_CASE("joint loss closed forms") {
  const EncoderConfig c = micro();
  auto p = init_model_params<double>(c, 1);
  zero_heads(p);
  auto inst = layout_instance(0, {{3}});
  REQUIRE(inst.candidates.size() == 2);
  inst.long_target = 1;
  inst.start = 2;
  inst.end = 3;

  Tape<double> tape;
  Bound<double> b(tape, p);
  const auto s = forward(b, c, inst);
  inst.type = AnswerType::kShort;
  CHECK(joint_loss(s, inst).value().item() ==
        Catch::Approx(std::log(4.0) + std::log(4.0) + std::log(2.0) + std::log(5.0)).epsilon(1e-12));
  inst.type = AnswerType::kLong;
  CHECK(joint_loss(s, inst).value().item() == Catch::Approx(std::log(2.0) + std::log(5.0)).epsilon(1e-12));

  inst.start = 1;
  CHECK_THROWS_AS(joint_loss(s, inst), ContractError);
}

TEST_CASE("joint loss vanishes for confident correct logits") {
  Tape<double> tape;
  ScoreVars<double> s{tape.constant(Tensor<double>(Shape{1, 4}, std::vector<double>{0, 0, 200, 0})),
                      tape.constant(Tensor<double>(Shape{1, 4}, std::vector<double>{0, 0, 0, 200})),
                      tape.constant(Tensor<double>(Shape{1, 2}, std::vector<double>{0, 200})),
                      tape.constant(Tensor<double>(Shape{1, 5}, std::vector<double>{0, 0, 0, 0, 200})),
                      Mask{1, 0, 1, 1}};
  TrainingInstance inst;
  inst.long_target = 1;
  inst.start = 2;
  inst.end = 3;
  inst.type = AnswerType::kShort;
  CHECK(joint_loss(s, inst).value().item() < 1e-12);
}

TEST_CASE("joint loss equals summed cross-entropies") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const EncoderConfig c = micro();
    const auto p = init_model_params<double>(c, trial);
    auto inst = layout_instance(2, {{2, 3}, {2}}, 18, 30);
    inst.type = static_cast<AnswerType>(trial % 5);
    inst.long_target = static_cast<std::size_t>(trial % 3);
    inst.start = 5 + trial % 4;
    inst.end = inst.start + 1;
    Tape<double> tape;
    Bound<double> b(tape, p);
    const auto s = forward(b, c, inst);
    const double loss = joint_loss(s, inst).value().item();
    const ScoreSet ex = export_scores(s, inst);
    double expect = -log_softmax_at(ex.type_logits, static_cast<std::size_t>(inst.type)) -
                    log_softmax_at(ex.long_logits, inst.long_target);
    if (inst.type != AnswerType::kLong)
      expect += -log_softmax_at(ex.start, inst.start) - log_softmax_at(ex.end, inst.end);
    CHECK(loss >= 0.0);
    CHECK(std::abs(loss - expect) < 1e-6);
  }
}

TEST_CASE("inference scores") {
  ScoreSet s = table(0, 0, {{0, 0}, {2, 6}}, {-1, 0}, {1.5, 1.5}, {0, 0, 0, 0, 0});
  CHECK(fragment_score(s, TypeAggregation::kLogSumExp) == Catch::Approx(std::log(4.0)));
  CHECK(fragment_score(s, TypeAggregation::kMax) == 0.0);
  CHECK(long_score(s, 1) == 0.0);

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    ScoreSet r = random_table(rng, 0);
    ScoreSet shifted = r;
    const double c = standard_normal(rng) * 10;
    for (double& v : shifted.start) v += c;
    for (double& v : shifted.end) v -= 2 * c;
    for (double& v : shifted.long_logits) v += c;
    for (std::size_t e = 1; e < r.candidates.size(); ++e) {
      CHECK(long_score(shifted, e) == Catch::Approx(long_score(r, e)).margin(1e-9));
      const auto a = short_spans(r, e, 30), b2 = short_spans(shifted, e, 30);
      REQUIRE(a.size() == b2.size());
      for (std::size_t k = 0; k < a.size(); ++k) CHECK(a[k].score == Catch::Approx(b2[k].score).margin(1e-9));
      const auto ba = best_short_span(r, e, 30), bb = best_short_span(shifted, e, 30);
      CHECK(ba->start == bb->start);
      CHECK(ba->end == bb->end);
    }
  }
}

TEST_CASE("short spans respect order, length and candidate bounds") {
  ScoreSet s = table(0, 0, {{0, 0}, {2, 11}}, {-1, 0}, {0, 0}, {0, 0, 0, 0, 0});
  for (const auto& sp : short_spans(s, 1, 3)) {
    CHECK(sp.start <= sp.end);
    CHECK(sp.end - sp.start < 3);
    CHECK(sp.start >= 2);
    CHECK(sp.end <= 11);
  }
  CHECK(short_spans(s, 1, 3).size() == 10 + 9 + 8);
  CHECK(short_spans(s, 0, 3).empty());
}

TEST_CASE("select_answers") {
  SECTION("single candidate is chosen whatever its score") {
    ScoreSet s = table(0, 0, {{0, 0}, {2, 6}}, {-1, 0}, {5.0, -3.0}, {4, 0, 0, 0, 0});
    const auto pred = select_answers({s});
    REQUIRE(pred.long_candidate);
    CHECK(*pred.long_candidate == 0);
    CHECK(pred.long_score < 0);
    CHECK(pred.long_span == TokenSpan{0, 4});
  }

  SECTION("fragment bias can outweigh a larger long score") {
    // A: g_long = 3, g_frag = ln4 - 10; B: g_long = 1, g_frag = ln4.
    ScoreSet a = table(0, 0, {{0, 0}, {2, 6}}, {-1, 0}, {0, 3}, {10, 0, 0, 0, 0});
    ScoreSet b = table(1, 5, {{0, 0}, {2, 6}}, {-1, 1}, {0, 1}, {0, 0, 0, 0, 0});
    const auto pred = select_answers({a, b});
    CHECK(*pred.long_candidate == 1);
    CHECK(pred.fragment == 1);
    CHECK(pred.long_score == Catch::Approx(1 + std::log(4.0)));
    CHECK(pred.long_span == TokenSpan{5, 9});
  }

  SECTION("ties go to the earliest document candidate") {
    ScoreSet a = table(0, 0, {{0, 0}, {2, 4}, {5, 8}}, {-1, 0, 1}, {0, 2, 2}, {0, 0, 0, 0, 0});
    ScoreSet b = table(1, 3, {{0, 0}, {2, 5}}, {-1, 1}, {0, 2}, {0, 0, 0, 0, 0});
    CHECK(*select_answers({b, a}).long_candidate == 0);
    a.long_logits[1] = 1;
    const auto pred = select_answers({b, a});
    CHECK(*pred.long_candidate == 1);
    CHECK(pred.fragment == 0);
  }

  SECTION("yes and no verdicts replace the span") {
    ScoreSet s = table(0, 0, {{0, 0}, {2, 6}}, {-1, 0}, {0, 1}, {0, 0, 3, 0, 0});
    const auto pred = select_answers({s});
    CHECK(pred.short_kind == ShortKind::kNo);
    CHECK(pred.short_score == pred.long_score);
  }

  SECTION("short span lies inside the long answer and order does not matter") {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<ScoreSet> frags;
      const int n = static_cast<int>(uniform_int(rng, 1, 4));
      for (int f = 0; f < n; ++f) frags.push_back(random_table(rng, static_cast<std::size_t>(f)));
      const auto pred = select_answers(frags);
      std::vector<ScoreSet> shuffled = frags;
      seeded_shuffle(shuffled, rng);
      const auto again = select_answers(shuffled);
      CHECK(to_json(pred) == to_json(again));
      REQUIRE(pred.long_candidate);
      if (pred.short_kind == ShortKind::kSpan) {
        CHECK(pred.long_span.start <= pred.short_span.start);
        CHECK(pred.short_span.end <= pred.long_span.end);
      }
      for (const auto& f : frags)
        for (std::size_t l = 1; l < f.long_logits.size(); ++l)
          CHECK(long_score(f, l) + fragment_score(f, TypeAggregation::kLogSumExp) <= pred.long_score + 1e-12);
    }
  }
}

TEST_CASE("prediction JSON round trip") {
  DocumentPrediction p;
  p.example_id = "x";
  p.long_candidate = 3;
  p.long_span = {10, 20};
  p.long_score = 1.25;
  p.short_kind = ShortKind::kSpan;
  p.short_span = {12, 13};
  p.short_score = -0.5;
  p.type = AnswerType::kShort;
  const auto j = to_json(p);
  CHECK(j["short"]["start"] == 12);
  CHECK(to_json(prediction_from_json(j)) == j);
  p.short_kind = ShortKind::kYes;
  CHECK(to_json(prediction_from_json(to_json(p))) == to_json(p));
  p.long_candidate.reset();
  p.short_kind = ShortKind::kNone;
  const auto empty = to_json(p);
  CHECK(empty["long"].is_null());
  CHECK(empty["short"].is_null());
  CHECK(to_json(prediction_from_json(empty)) == empty);
}

TEST_CASE("joint loss gradients through the whole model") {
  const EncoderConfig c = micro();
  auto inst = layout_instance(3, {{3, 3}, {4, 2}}, 20, 30);
  inst.type = AnswerType::kShort;
  inst.long_target = 2;
  inst.start = 12;
  inst.end = 13;
  const HierGraph g = build_graph(inst);
  const auto gs = build_structures(g);
  // Small eps: truncation error stays far below the tolerance even for
  // coordinates whose gradient is tiny.
  const auto report = finite_diff_check(
      [&](Bound<long double>& b) { return joint_loss(forward(b, c, inst, g, gs), inst); },
      init_model_params<long double>(c, 7), 1e-5);
  INFO(report.worst_param << "[" << report.worst_index << "] analytic " << report.analytic << " numeric " << report.numeric);
  CHECK(report.max_rel_error < 1e-4);
}
