#pragma once

// Flat JSON run configuration shared by every CLI subcommand. Keys are fixed
// by defaults(); a config file or `key=value` override may only change
// existing keys, and only with a value of a compatible JSON type.

#include <fstream>
#include <string>

#include <json.hpp>

#include "mgrc/heads.hpp"
#include "mgrc/preprocess.hpp"
#include "mgrc/synthgen.hpp"
#include "mgrc/train.hpp"

namespace mgrc {

/// Bad configuration or command line; the CLI maps it to exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

class RunConfig {
 public:
  static nlohmann::json defaults() {
    const EncoderConfig e;
    const TrainConfig t;
    const PreprocessConfig p;
    const CorpusSpec c;
    const HeadConfig h;
    nlohmann::json j = to_json(e);
    j.erase("vocab_size");
    const nlohmann::json tj = to_json(t);
    for (const auto& [k, v] : tj.items()) j[k] = v;
    j["threads"] = t.threads;
    j["max_length"] = p.max_length;
    j["stride"] = p.stride;
    j["keep_prob"] = p.keep_prob;
    j["n_docs"] = c.n_docs;
    j["paragraphs"] = {c.paragraphs.lo, c.paragraphs.hi};
    j["sentences"] = {c.sentences.lo, c.sentences.hi};
    j["tokens"] = {c.tokens.lo, c.tokens.hi};
    j["answerable_fraction"] = c.answerable_fraction;
    j["yes_no_fraction"] = c.yes_no_fraction;
    j["synth_vocab_size"] = c.vocab_size;
    j["max_answer_tokens"] = h.max_answer_tokens;
    j["aggregation"] = "logsumexp";
    return j;
  }

  RunConfig() : values_(defaults()) {}

  const nlohmann::json& values() const noexcept { return values_; }

  void merge(const nlohmann::json& j, const std::string& source) {
    if (!j.is_object()) throw UsageError(source + ": config must be a flat JSON object");
    for (const auto& [key, value] : j.items()) assign(key, value, source);
  }

  void merge_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file " + path);
    try {
      merge(nlohmann::json::parse(in), path);
    } catch (const nlohmann::json::exception& e) {
      throw UsageError(path + ": " + e.what());
    }
  }

  /// `key=value`; the value is read as JSON, falling back to a plain string.
  void set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
    nlohmann::json v = nlohmann::json::parse(raw, nullptr, false);
    if (v.is_discarded()) v = raw;
    assign(key, v, "--set");
  }

  template <class V>
  V get(const std::string& key) const {
    return values_.at(key).get<V>();
  }

  EncoderConfig encoder(std::size_t vocab_size) const {
    nlohmann::json j = values_;
    j["vocab_size"] = vocab_size;
    EncoderConfig e = encoder_config_from_json(j);
    checked([&] { e.validate(); });
    return e;
  }

  TrainConfig train() const {
    TrainConfig t;
    t.batch_size = get<std::size_t>("batch_size");
    t.epochs = get<std::size_t>("epochs");
    t.max_steps = get<std::size_t>("max_steps");
    t.lr = get<double>("lr");
    t.warmup = get<double>("warmup");
    t.seed = get<std::uint64_t>("seed");
    t.checkpoint_every = get<std::size_t>("checkpoint_every");
    t.threads = get<std::size_t>("threads");
    t.max_grad_norm = get<double>("max_grad_norm");
    checked([&] { t.validate(); });
    return t;
  }

  PreprocessConfig preprocess() const {
    PreprocessConfig p;
    p.max_length = get<std::size_t>("max_length");
    p.stride = get<std::size_t>("stride");
    p.keep_prob = get<double>("keep_prob");
    if (p.stride == 0) throw UsageError("stride must be positive");
    if (!(p.keep_prob >= 0 && p.keep_prob <= 1)) throw UsageError("keep_prob must lie in [0, 1]");
    return p;
  }

  CorpusSpec corpus() const {
    CorpusSpec c;
    c.seed = get<std::uint64_t>("seed");
    c.n_docs = get<std::size_t>("n_docs");
    auto range = [&](const char* key) {
      const auto& r = values_.at(key);
      if (!r.is_array() || r.size() != 2) throw UsageError(std::string(key) + " must be [lo, hi]");
      return IntRange{r[0].get<std::size_t>(), r[1].get<std::size_t>()};
    };
    c.paragraphs = range("paragraphs");
    c.sentences = range("sentences");
    c.tokens = range("tokens");
    c.answerable_fraction = get<double>("answerable_fraction");
    c.yes_no_fraction = get<double>("yes_no_fraction");
    c.vocab_size = get<std::size_t>("synth_vocab_size");
    checked([&] { c.validate(); });
    return c;
  }

  HeadConfig head() const {
    HeadConfig h;
    h.max_answer_tokens = get<std::size_t>("max_answer_tokens");
    const auto agg = get<std::string>("aggregation");
    if (agg == "logsumexp") {
      h.aggregation = TypeAggregation::kLogSumExp;
    } else if (agg == "max") {
      h.aggregation = TypeAggregation::kMax;
    } else {
      throw UsageError("aggregation must be logsumexp or max");
    }
    return h;
  }

 private:
  static bool compatible(const nlohmann::json& old, const nlohmann::json& v) {
    if (old.is_number_unsigned()) return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
    if (old.is_number_integer()) return v.is_number_integer();
    if (old.is_number()) return v.is_number();
    return old.type() == v.type();
  }

  void assign(const std::string& key, const nlohmann::json& value, const std::string& source) {
    auto it = values_.find(key);
    if (it == values_.end()) throw UsageError(source + ": unknown config key '" + key + "'");
    if (!compatible(*it, value)) throw UsageError(source + ": wrong type for '" + key + "' (expected like " + it->dump() + ")");
    *it = it->is_number_float() ? nlohmann::json(value.get<double>()) : value;
  }

  template <class F>
  static void checked(F&& f) {
    try {
      f();
    } catch (const ContractError& e) {
      throw UsageError(e.what());
    }
  }

  nlohmann::json values_;
};

}  // namespace mgrc
