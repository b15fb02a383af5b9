#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mgrc/fixtures.hpp"
#include "mgrc/train.hpp"

using namespace mgrc;
using fixtures::layout_instance;
namespace fs = std::filesystem;

namespace {

EncoderConfig small() {
  EncoderConfig c;
  c.d_model = 8;
  c.heads = 2;
  c.n_layers = 1;
  c.d_ff = 16;
  c.dropout = 0.1;
  c.vocab_size = 30;
  c.max_position = 32;
  return c;
}

std::vector<TrainingInstance> toy_data() {
  std::vector<TrainingInstance> out;
  for (int k = 0; k < 5; ++k) {
    auto inst = layout_instance(2 + k % 2, {{2, 3}, {3}}, 20, 30);
    inst.example_id = "toy" + std::to_string(k);
    inst.type = static_cast<AnswerType>(k % 5);
    inst.long_target = k % 3;
    inst.start = inst.type == AnswerType::kShort ? inst.content_begin() + 1 : 0;
    inst.end = inst.start;
    out.push_back(inst);
  }
  return out;
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mgrc_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("lr_schedule") {
  CHECK(lr_schedule(0, 1000, 2e-5, 0.1) == 0.0);
  CHECK(lr_schedule(100, 1000, 2e-5, 0.1) == Catch::Approx(2e-5));
  CHECK(lr_schedule(550, 1000, 2e-5, 0.1) == Catch::Approx(1e-5));
  CHECK(lr_schedule(1000, 1000, 2e-5, 0.1) == 0.0);
  CHECK(lr_schedule(5, 10, 1.0, 0.0) == Catch::Approx(0.5));
  double prev = -1;
  for (std::uint64_t s = 0; s <= 100; ++s) {
    const double lr = lr_schedule(s, 1000, 1.0, 0.1);
    CHECK(lr >= prev);
    prev = lr;
  }
  for (std::uint64_t s = 100; s < 1000; ++s) CHECK(lr_schedule(s + 1, 1000, 1.0, 0.1) <= lr_schedule(s, 1000, 1.0, 0.1));
  CHECK_THROWS_AS(lr_schedule(1001, 1000, 1.0, 0.1), ContractError);
}

TEST_CASE("adam_step") {
  ParamStore<double> p;
  p.add("w", Tensor<double>(Shape{3}, std::vector<double>{1, 2, 3}));
  auto st = AdamState<double>::zeros_like(p);

  SECTION("one step on a unit gradient moves by about lr") {
    GradMap<double> g;
    g.emplace("w", Tensor<double>(Shape{3}, 1.0));
    adam_step(p, g, st, 0.1);
    CHECK(p.at("w")[0] == Catch::Approx(1 - 0.1 / (1 + 1e-8)).epsilon(1e-12));
    CHECK(st.step == 1);
    CHECK(st.m.at("w")[0] == Catch::Approx(0.1));
    CHECK(st.v.at("w")[0] == Catch::Approx(0.001));
  }

  SECTION("zero gradients leave parameters and decay moments") {
    GradMap<double> g;
    g.emplace("w", Tensor<double>(Shape{3}, 1.0));
    adam_step(p, g, st, 0.0);
    const auto before = p.at("w");
    const double m = st.m.at("w")[1], v = st.v.at("w")[1];
    g.at("w") = Tensor<double>(Shape{3}, 0.0);
    adam_step(p, g, st, 0.0);
    CHECK(p.at("w") == before);
    CHECK(st.m.at("w")[1] == Catch::Approx(0.9 * m));
    CHECK(st.v.at("w")[1] == Catch::Approx(0.999 * v));
  }

  SECTION("constant gradient gives updates of size lr") {
    GradMap<double> g;
    g.emplace("w", Tensor<double>(Shape{3}, -0.37));
    for (int i = 0; i < 200; ++i) {
      const double before = p.at("w")[2];
      adam_step(p, g, st, 0.01);
      CHECK(p.at("w")[2] - before == Catch::Approx(0.01).epsilon(1e-6));
    }
  }

  SECTION("non-finite gradient names the parameter and changes nothing") {
    GradMap<double> g;
    g.emplace("w", Tensor<double>(Shape{3}, 1.0));
    g.at("w")[1] = std::numeric_limits<double>::quiet_NaN();
    const auto before = p;
    try {
      adam_step(p, g, st, 0.1);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("w") != std::string::npos);
    }
    CHECK(p == before);
    CHECK(st.step == 0);
  }
}

TEST_CASE("training overfits a single instance") {
  EncoderConfig c = small();
  c.dropout = 0.0;
  c.init_std = 0.1;
  auto data = toy_data();
  data.resize(1);
  data[0].type = AnswerType::kShort;
  data[0].long_target = 1;
  data[0].start = data[0].content_begin() + 1;
  data[0].end = data[0].start + 1;
  const auto prepared = prepare_instances(data, c.graph);
  auto state = fresh_state(init_model_params<float>(c, 3));
  const double initial = evaluate_loss(state.params, c, prepared);
  TrainConfig tc;
  tc.batch_size = 1;
  tc.max_steps = 150;
  tc.lr = 1e-2;
  train_loop(prepared, c, state, tc);
  const double final_loss = evaluate_loss(state.params, c, prepared);
  INFO("initial " << initial << " final " << final_loss);
  CHECK(final_loss < 0.1 * initial);
}

TEST_CASE("training is deterministic and thread-count independent") {
  const EncoderConfig c = small();
  const auto data = toy_data();
  const auto prepared = prepare_instances(data, c.graph);
  TrainConfig tc;
  tc.batch_size = 2;
  tc.epochs = 3;
  tc.lr = 1e-3;
  auto a = fresh_state(init_model_params<float>(c, 1));
  auto b = fresh_state(init_model_params<float>(c, 1));
  train_loop(prepared, c, a, tc);
  tc.threads = 3;
  train_loop(prepared, c, b, tc);
  REQUIRE(a.trace.size() == 9);
  CHECK(a.trace == b.trace);
  CHECK(a.params == b.params);
}

TEST_CASE("resuming from a checkpoint continues the same trace") {
  const EncoderConfig c = small();
  const auto data = toy_data();
  const auto prepared = prepare_instances(data, c.graph);
  TrainConfig tc;
  tc.batch_size = 2;
  tc.epochs = 4;
  tc.lr = 1e-3;
  tc.checkpoint_every = 5;
  const auto dir = temp_dir("resume");

  auto full = fresh_state(init_model_params<float>(c, 2));
  int saved = 0;
  train_loop<float>(prepared, c, full, tc, [&](const TrainState<float>& s) {
    if (s.adam.step == 5) {
      save_checkpoint<float>((dir / "step5.ckpt").string(), {c, s.params, s.adam, {}});
      ++saved;
    }
  });
  REQUIRE(saved == 1);

  auto ck = load_checkpoint<float>((dir / "step5.ckpt").string());
  REQUIRE(ck.adam);
  CHECK(ck.adam->step == 5);
  TrainState<float> resumed{ck.params, *ck.adam, {}};
  train_loop(prepared, c, resumed, tc);
  REQUIRE(resumed.trace.size() == full.trace.size() - 5);
  for (std::size_t i = 0; i < resumed.trace.size(); ++i) CHECK(resumed.trace[i] == full.trace[i + 5]);
  CHECK(resumed.params == full.params);
}

TEST_CASE("loss trace CSV") {
  const auto dir = temp_dir("trace");
  write_trace_csv((dir / "t.csv").string(), {{1, 0.5, 2.25}, {2, 0.25, 1.5}});
  std::ifstream in(dir / "t.csv");
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() == "step,lr,loss\n1,0.5,2.25\n2,0.25,1.5\n");
}

TEST_CASE("checkpoint round trip and validation") {
  EncoderConfig c = small();
  c.dropout = 0.0;
  const auto dir = temp_dir("ckpt");
  const auto params = init_model_params<float>(c, 9);
  const auto path = (dir / "m.ckpt").string();
  save_checkpoint<float>(path, {c, params, std::nullopt, {{"note", "x"}}});
  const auto ck = load_checkpoint<float>(path);
  CHECK(ck.params == params);
  CHECK_FALSE(ck.adam);
  CHECK(ck.extra["note"] == "x");
  CHECK(to_json(ck.config) == to_json(c));

  const auto data = toy_data();
  for (const auto& inst : data) {
    const auto a = predict_scores(params, c, inst);
    const auto b = predict_scores(ck.params, ck.config, inst);
    CHECK(a.start == b.start);
    CHECK(a.long_logits == b.long_logits);
    CHECK(a.type_logits == b.type_logits);
  }

  SECTION("wrong magic") {
    std::ofstream(dir / "bad.ckpt") << "not a checkpoint";
    CHECK_THROWS_AS(load_checkpoint<float>((dir / "bad.ckpt").string()), FormatError);
  }
  SECTION("wrong dtype") { CHECK_THROWS_AS(load_checkpoint<double>(path), FormatError); }
  SECTION("shape mismatch against the config") {
    ParamStore<float> wrong = params;
    wrong.at("head.type.w") = Tensor<float>(Shape{8, 4});
    save_checkpoint<float>((dir / "wrong.ckpt").string(), {c, wrong, std::nullopt, {}});
    CHECK_THROWS_AS(load_checkpoint<float>((dir / "wrong.ckpt").string()), FormatError);
  }
  SECTION("truncated data") {
    const auto size = fs::file_size(path);
    fs::copy_file(path, dir / "short.ckpt");
    fs::resize_file(dir / "short.ckpt", size - 4);
    CHECK_THROWS_AS(load_checkpoint<float>((dir / "short.ckpt").string()), FormatError);
  }
}
