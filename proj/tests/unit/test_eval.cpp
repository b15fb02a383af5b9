#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <sstream>

#include "mgrc/eval.hpp"

using namespace mgrc;

namespace {

GoldAnswer gold(const std::string& id, std::optional<std::size_t> cand, std::optional<TokenSpan> span = {},
                YesNo yn = YesNo::kNone) {
  GoldAnswer g;
  g.example_id = id;
  g.long_candidate = cand;
  if (cand) g.long_span = TokenSpan{*cand * 10, *cand * 10 + 9};
  g.short_span = span;
  g.yes_no = yn;
  return g;
}

DocumentPrediction pred(const std::string& id, int cand, double score) {
  DocumentPrediction p;
  p.example_id = id;
  p.long_candidate = cand;
  p.long_span = {static_cast<std::size_t>(cand) * 10, static_cast<std::size_t>(cand) * 10 + 9};
  p.long_score = score;
  return p;
}

Judgement J(bool has, double score, bool correct) { return {has, true, score, correct}; }

// The (1,1,1,1,1) fixture: one example per case at tau = 0.5.
std::vector<Judgement> five_cases() {
  return {J(true, 0.9, true), J(false, 0.1, false), J(true, 0.8, false), J(true, 0.2, true), J(false, 0.7, false)};
}

// Brute force over a fine grid between the extreme scores.
double grid_best_f1(const std::vector<Judgement>& js) {
  double lo = 0, hi = 0;
  for (const auto& j : js) {
    lo = std::min(lo, j.score);
    hi = std::max(hi, j.score);
  }
  double best = 0;
  for (double t = lo - 1.5e-4; t <= hi + 1.5e-4; t += 1e-4) best = std::max(best, f1_at_threshold(js, t).f1);
  return best;
}

}  // namespace

TEST_CASE("f1 at a threshold") {
  SECTION("hand counted example") {
    const std::vector<Judgement> js{J(true, 0.9, true), J(true, 0.8, false), J(false, 0.5, false)};
    const auto r = f1_at_threshold(js, 0.6);
    CHECK(r.tp == 1);
    CHECK(r.fp == 1);
    CHECK(r.fn == 1);
    CHECK(r.precision == 0.5);
    CHECK(r.recall == 0.5);
    CHECK(r.f1 == 0.5);
  }
  SECTION("all correct") {
    const std::vector<Judgement> js{J(true, 0.9, true), J(true, 0.3, true)};
    const auto r = f1_at_threshold(js, 0.0);
    CHECK(r.f1 == 1.0);
  }
  SECTION("infinite threshold emits nothing") {
    const auto r = f1_at_threshold(five_cases(), std::numeric_limits<double>::infinity());
    CHECK(r.precision == 0.0);
    CHECK(r.recall == 0.0);
    CHECK(r.f1 == 0.0);
  }
  SECTION("order does not matter") {
    std::mt19937_64 rng(1);
    auto js = five_cases();
    const auto r = f1_at_threshold(js, 0.5);
    for (int k = 0; k < 10; ++k) {
      seeded_shuffle(js, rng);
      CHECK(f1_at_threshold(js, 0.5).f1 == r.f1);
    }
  }
}

TEST_CASE("judging predictions against gold") {
  const std::vector<GoldAnswer> g{gold("a", 2, TokenSpan{21, 22}), gold("b", std::nullopt), gold("c", 1, {}, YesNo::kYes),
                                  gold("d", 0)};
  std::vector<DocumentPrediction> p{pred("a", 2, 1.0), pred("b", 0, 0.5), pred("c", 1, 2.0)};
  p[0].short_kind = ShortKind::kSpan;
  p[0].short_span = {21, 22};
  p[0].short_score = 3.0;
  p[2].short_kind = ShortKind::kYes;
  p[2].short_score = 2.0;

  const auto lj = judge(p, g, Grain::kLong);
  REQUIRE(lj.size() == 4);
  CHECK(lj[0].correct);
  CHECK_FALSE(lj[1].gold_has_answer);
  CHECK(lj[2].correct);
  CHECK_FALSE(lj[3].predicted);
  const auto sj = judge(p, g, Grain::kShort);
  CHECK(sj[0].correct);
  CHECK(sj[0].score == 3.0);
  CHECK_FALSE(sj[1].predicted);
  CHECK(sj[2].correct);
  CHECK_FALSE(sj[3].gold_has_answer);

  p[2].short_kind = ShortKind::kNo;
  CHECK_FALSE(judge(p, g, Grain::kShort)[2].correct);

  p.push_back(pred("a", 1, 0.0));
  CHECK_THROWS_AS(judge(p, g, Grain::kLong), ContractError);
  p.back().example_id = "zzz";
  CHECK_THROWS_AS(judge(p, g, Grain::kLong), ContractError);
}

TEST_CASE("threshold sweep") {
  SECTION("single correct prediction") {
    const auto s = threshold_sweep({J(true, 0.7, true)});
    CHECK(s.best.f1 == 1.0);
    CHECK(s.best.threshold < 0.7);
    CHECK(s.best.threshold == -std::numeric_limits<double>::infinity());
  }
  SECTION("all-correct prefix in score order") {
    const std::vector<Judgement> js{J(true, 0.9, true), J(true, 0.8, true), J(true, 0.7, true), J(true, 0.6, false),
                                    J(true, 0.5, false), J(false, 0.4, false)};
    const auto s = threshold_sweep(js);
    CHECK(s.best.threshold == 0.6);
    CHECK(s.best.tp == 3);
    CHECK(s.best.fp == 0);
  }
  SECTION("matches a dense grid and dominates fixed thresholds") {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<Judgement> js;
      const auto n = uniform_int(rng, 1, 30);
      for (int i = 0; i < n; ++i) {
        Judgement j;
        j.gold_has_answer = unit_uniform(rng) < 0.6;
        j.predicted = unit_uniform(rng) < 0.95;
        j.score = std::round((unit_uniform(rng) * 4 - 2) * 1000) / 1000;
        j.correct = j.predicted && j.gold_has_answer && unit_uniform(rng) < 0.7;
        js.push_back(j);
      }
      const auto s = threshold_sweep(js);
      CHECK(s.best.f1 == Catch::Approx(grid_best_f1(js)).margin(1e-12));
      for (const auto& j : js) CHECK(s.best.f1 >= f1_at_threshold(js, j.score - 1e-9).f1);
    }
  }
  SECTION("ties prefer the larger threshold") {
    const std::vector<Judgement> js{J(true, 0.9, true), J(false, 0.1, false)};
    const auto s = threshold_sweep(js);
    CHECK(s.best.threshold == 0.1);
  }
}

TEST_CASE("five-case breakdown") {
  CHECK(five_case_breakdown(five_cases(), 0.5) == std::array<std::size_t, 5>{1, 1, 1, 1, 1});
  const auto all_out = five_case_breakdown(five_cases(), std::numeric_limits<double>::infinity());
  CHECK(all_out == std::array<std::size_t, 5>{0, 2, 0, 3, 0});
  const std::vector<Judgement> perfect{J(true, 0.9, true), J(false, 0.1, false), J(true, 0.8, true)};
  CHECK(five_case_breakdown(perfect, 0.5) == std::array<std::size_t, 5>{2, 1, 0, 0, 0});

  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Judgement> js;
    const auto n = uniform_int(rng, 0, 20);
    for (int i = 0; i < n; ++i) {
      Judgement j{unit_uniform(rng) < 0.5, unit_uniform(rng) < 0.9, standard_normal(rng), false};
      j.correct = j.predicted && j.gold_has_answer && unit_uniform(rng) < 0.5;
      js.push_back(j);
    }
    const auto c = five_case_breakdown(js, standard_normal(rng));
    CHECK(c[0] + c[1] + c[2] + c[3] + c[4] == js.size());
  }
}

TEST_CASE("report JSON and table") {
  const std::vector<GoldAnswer> g{gold("a", 2), gold("b", std::nullopt), gold("c", 1)};
  const std::vector<DocumentPrediction> p{pred("a", 2, 1.0), pred("b", 0, -1.0), pred("c", 0, 0.5)};
  const auto r = evaluate(p, g);
  CHECK(r.examples == 3);
  const auto j = to_json(r);
  CHECK(j["long"]["best"]["f1"].get<double>() == Catch::Approx(r.long_answer.sweep.best.f1));
  CHECK(j["long"]["cases"].size() == 5);
  CHECK(j["short"]["best"]["threshold"] == "inf");
  std::ostringstream os;
  print_table(os, r);
  CHECK(os.str().find("Long Answer") != std::string::npos);
  CHECK(os.str().find("case 5") != std::string::npos);
}
