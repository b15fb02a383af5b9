// mgrc: synthetic corpus -> preprocessing -> training -> prediction -> evaluation.
// Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include <CLI11.hpp>

#include "mgrc/config.hpp"
#include "mgrc/selftest.hpp"

namespace fs = std::filesystem;
using namespace mgrc;

namespace {

struct Globals {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
};

RunConfig load_config(const Globals& g) {
  RunConfig rc;
  if (!g.config_path.empty()) rc.merge_file(g.config_path);
  for (const auto& o : g.overrides) rc.set(o);
  if (g.seed) rc.set("seed=" + std::to_string(*g.seed));
  if (g.threads) rc.set("threads=" + std::to_string(*g.threads));
  return rc;
}

void ensure_parent(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

int cmd_synth(const RunConfig& rc, const std::string& out_dir) {
  const Corpus c = generate_corpus(rc.corpus());
  fs::create_directories(out_dir);
  write_jsonl((fs::path(out_dir) / "raw.jsonl").string(), c.examples);
  write_jsonl((fs::path(out_dir) / "gold.jsonl").string(), c.gold);
  c.vocab.save((fs::path(out_dir) / "vocab.txt").string());
  std::size_t answerable = 0;
  for (const auto& g : c.gold) answerable += g.has_long();
  std::cout << "wrote " << c.examples.size() << " documents (" << answerable << " answerable) to " << out_dir << "\n";
  return 0;
}

int cmd_preprocess(const RunConfig& rc, const std::string& raw, const std::string& vocab_path, const std::string& out,
                   const std::string& gold_out) {
  const Vocab vocab = Vocab::load(vocab_path);
  const PreprocessConfig pc = rc.preprocess();
  const auto examples = read_jsonl<RawExample>(raw, raw_example_from_json);
  std::vector<TrainingInstance> instances;
  std::vector<GoldAnswer> gold;
  for (const auto& ex : examples) {
    auto pre = preprocess_example(ex, vocab, pc);
    gold.push_back(pre.gold);
    for (auto& inst : downsample_null(std::move(pre.instances), pc.keep_prob, rc.get<std::uint64_t>("seed")))
      instances.push_back(std::move(inst));
  }
  ensure_parent(out);
  write_jsonl(out, instances);
  if (!gold_out.empty()) {
    ensure_parent(gold_out);
    write_jsonl(gold_out, gold);
  }
  std::cout << "wrote " << instances.size() << " instances from " << examples.size() << " documents to " << out << "\n";
  return 0;
}

nlohmann::json trace_json(const std::vector<TraceRow>& trace) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : trace) j.push_back({r.step, r.lr, r.loss});
  return j;
}

std::vector<TraceRow> trace_from_json(const nlohmann::json& j) {
  std::vector<TraceRow> out;
  for (const auto& r : j) out.push_back({r.at(0).get<std::uint64_t>(), r.at(1).get<double>(), r.at(2).get<double>()});
  return out;
}

int cmd_train(const RunConfig& rc, const std::string& instances_path, const std::string& vocab_path,
              const std::string& ckpt_path, const std::string& trace_path, const std::string& resume) {
  const TrainConfig tc = rc.train();
  const auto data = read_jsonl<TrainingInstance>(instances_path, instance_from_json);
  if (data.empty()) throw UsageError(instances_path + " holds no instances");

  Checkpoint<float> ck;
  TrainState<float> state;
  if (!resume.empty()) {
    ck = load_checkpoint<float>(resume);
    if (!ck.adam) throw UsageError(resume + " has no optimizer state to resume from");
    state.params = std::move(ck.params);
    state.adam = std::move(*ck.adam);
    state.trace = trace_from_json(ck.extra.value("trace", nlohmann::json::array()));
  } else {
    ck.config = rc.encoder(Vocab::load(vocab_path).size());
    state = fresh_state(init_model_params<float>(ck.config, tc.seed));
  }
  const EncoderConfig& ec = ck.config;
  for (const auto& inst : data)
    for (TokenId t : inst.tokens)
      if (t < 0 || static_cast<std::size_t>(t) >= ec.vocab_size)
        throw FormatError(inst.example_id + ": token id " + std::to_string(t) + " outside the vocabulary");

  auto save = [&](const TrainState<float>& s) {
    Checkpoint<float> out;
    out.config = ec;
    out.params = s.params;
    out.adam = s.adam;
    out.extra = {{"run_config", rc.values()}, {"train", to_json(tc)}, {"trace", trace_json(s.trace)}};
    ensure_parent(ckpt_path);
    save_checkpoint(ckpt_path, out);
  };
  const auto prepared = prepare_instances(data, ec.graph);
  const std::size_t total = tc.total_steps(data.size());
  train_loop<float>(prepared, ec, state, tc, save, [&](const TraceRow& r) {
    if (r.step % 50 == 0 || r.step == total) std::cerr << "step " << r.step << "/" << total << " lr " << r.lr << " loss " << r.loss << "\n";
  });
  save(state);
  if (!trace_path.empty()) {
    ensure_parent(trace_path);
    write_trace_csv(trace_path, state.trace);
  }
  std::cout << "trained " << state.adam.step << " steps on " << data.size() << " instances; checkpoint " << ckpt_path << "\n";
  return 0;
}

int cmd_predict(const RunConfig& rc, const std::string& ckpt_path, const std::string& instances_path, const std::string& out) {
  const HeadConfig hc = rc.head();
  const auto ck = load_checkpoint<float>(ckpt_path);
  const auto data = read_jsonl<TrainingInstance>(instances_path, instance_from_json);
  std::vector<std::string> order;
  std::map<std::string, std::vector<ScoreSet>> by_doc;
  for (const auto& inst : data) {
    auto [it, fresh] = by_doc.try_emplace(inst.example_id);
    if (fresh) order.push_back(inst.example_id);
    it->second.push_back(predict_scores(ck.params, ck.config, inst));
  }
  std::vector<DocumentPrediction> preds;
  for (const auto& id : order) preds.push_back(select_answers(by_doc.at(id), hc));
  ensure_parent(out);
  write_jsonl(out, preds);
  std::cout << "wrote " << preds.size() << " predictions to " << out << "\n";
  return 0;
}

int cmd_eval(const std::string& preds_path, const std::string& gold_path, const std::string& out) {
  const auto preds = read_jsonl<DocumentPrediction>(preds_path, prediction_from_json);
  const auto gold = read_jsonl<GoldAnswer>(gold_path, gold_from_json);
  const EvalReport report = evaluate(preds, gold);
  print_table(std::cout, report);
  if (!out.empty()) {
    ensure_parent(out);
    std::ofstream f(out, std::ios::binary);
    if (!f) throw FormatError("cannot write " + out);
    f << to_json(report).dump(2) << '\n';
  }
  return 0;
}

int cmd_gradcheck(double eps, double tol, std::uint64_t seed) {
  if (!(eps > 0)) throw UsageError("--eps must be positive");
  const auto rep = selftest::micro_gradcheck(eps, seed);
  std::cout << "micro-model gradient check (eps " << eps << ", " << rep.coordinates << " coordinates)\n"
            << "max relative error " << rep.max_rel_error << " at " << rep.worst_param << "[" << rep.worst_index
            << "] analytic " << rep.analytic << " numeric " << rep.numeric << "\n";
  return rep.max_rel_error < tol ? 0 : 1;
}

int cmd_selftest(double eps, bool full, std::size_t threads) {
  bool ok = true;
  auto show = [&](const selftest::Result& r) {
    std::cout << selftest::format_line(r) << std::endl;
    ok = ok && r.passed;
  };
  selftest::quick_suites(eps, show);
  if (full) {
    selftest::EndToEndConfig e;
    e.threads = threads;
    show(selftest::end_to_end_learning(e, [](const std::string& s) { std::cout << s << std::endl; }));
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Graph-based QA reader: synth, preprocess, train, predict, eval, gradcheck, selftest"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "Flat JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--set", g.overrides, "Override a config key: key=value (repeatable)");
  app.add_option("--seed", g.seed, "Seed for corpus generation, downsampling and training");
  app.add_option("--threads", g.threads, "Worker thread cap")->check(CLI::PositiveNumber);

  std::function<int(const RunConfig&)> action;

  std::string out_dir;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus (raw.jsonl, gold.jsonl, vocab.txt)");
  synth->add_option("--out-dir", out_dir, "Output directory")->required();
  synth->callback([&] { action = [&](const RunConfig& rc) { return cmd_synth(rc, out_dir); }; });

  std::string raw, vocab, instances_out, gold_out;
  auto* pre = app.add_subcommand("preprocess", "Raw example JSONL -> instance JSONL");
  pre->add_option("--raw", raw, "Raw example JSONL")->required()->check(CLI::ExistingFile);
  pre->add_option("--vocab", vocab, "Wordpiece vocabulary, one piece per line")->required()->check(CLI::ExistingFile);
  pre->add_option("--out", instances_out, "Instance JSONL to write")->required();
  pre->add_option("--gold-out", gold_out, "Also write document-level gold JSONL");
  pre->callback([&] { action = [&](const RunConfig& rc) { return cmd_preprocess(rc, raw, vocab, instances_out, gold_out); }; });

  std::string instances, checkpoint, trace, resume;
  auto* train = app.add_subcommand("train", "Train from instance JSONL");
  train->add_option("--instances", instances, "Instance JSONL")->required()->check(CLI::ExistingFile);
  train->add_option("--vocab", vocab, "Vocabulary (sets the embedding size)")->check(CLI::ExistingFile);
  train->add_option("--checkpoint", checkpoint, "Checkpoint to write")->required();
  train->add_option("--trace", trace, "Loss trace CSV to write");
  train->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  train->callback([&] {
    if (vocab.empty() && resume.empty()) throw CLI::ValidationError("--vocab", "required unless --resume is given");
    action = [&](const RunConfig& rc) { return cmd_train(rc, instances, vocab, checkpoint, trace, resume); };
  });

  std::string predictions_out;
  auto* predict = app.add_subcommand("predict", "Checkpoint + instances -> prediction JSONL");
  predict->add_option("--checkpoint", checkpoint, "Trained checkpoint")->required()->check(CLI::ExistingFile);
  predict->add_option("--instances", instances, "Instance JSONL")->required()->check(CLI::ExistingFile);
  predict->add_option("--out", predictions_out, "Prediction JSONL to write")->required();
  predict->callback([&] { action = [&](const RunConfig& rc) { return cmd_predict(rc, checkpoint, instances, predictions_out); }; });

  std::string preds, gold, report_out;
  auto* ev = app.add_subcommand("eval", "Predictions + gold -> P/R/F1 report");
  ev->add_option("--predictions", preds, "Prediction JSONL")->required()->check(CLI::ExistingFile);
  ev->add_option("--gold", gold, "Gold JSONL")->required()->check(CLI::ExistingFile);
  ev->add_option("--out", report_out, "Report JSON to write");
  ev->callback([&] { action = [&](const RunConfig&) { return cmd_eval(preds, gold, report_out); }; });

  double eps = 1e-5, tol = 1e-4;
  std::uint64_t model_seed = 13;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every micro-model parameter");
  gc->add_option("--eps", eps, "Central-difference step")->capture_default_str();
  gc->add_option("--tol", tol, "Pass when the max relative error is below this")->capture_default_str();
  gc->add_option("--model-seed", model_seed, "Parameter initialisation seed")->capture_default_str();
  gc->callback([&] { action = [&](const RunConfig&) { return cmd_gradcheck(eps, tol, model_seed); }; });

  bool full = false;
  auto* st = app.add_subcommand("selftest", "Run the property suites");
  st->add_option("--gradcheck-eps", eps, "Central-difference step for the gradient suite")->capture_default_str();
  st->add_flag("--full", full, "Include the end-to-end training run (minutes)");
  st->callback([&] {
    action = [&](const RunConfig& rc) { return cmd_selftest(eps, full, rc.get<std::size_t>("threads")); };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    const RunConfig rc = load_config(g);
    return action(rc);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
