#pragma once

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "mgrc/checkpoint.hpp"
#include "mgrc/heads.hpp"
#include "mgrc/optimizer.hpp"

namespace mgrc {

struct TrainConfig {
  std::size_t batch_size = 8;
  std::size_t epochs = 2;
  /// Overrides epochs when non-zero.
  std::size_t max_steps = 0;
  double lr = 2e-5;
  double warmup = 0.1;
  std::uint64_t seed = 13;
  std::size_t checkpoint_every = 0;
  std::size_t threads = 1;
  /// Global gradient-norm clip; 0 disables it.
  double max_grad_norm = 0.0;
  AdamConfig adam;

  void validate() const {
    if (batch_size == 0) throw ContractError("batch_size must be >= 1");
    if (!(warmup >= 0.0 && warmup < 1.0)) throw ContractError("warmup proportion must lie in [0, 1)");
    if (!(lr >= 0.0)) throw ContractError("learning rate must be non-negative");
    if (threads == 0) throw ContractError("threads must be >= 1");
    if (max_steps == 0 && epochs == 0) throw ContractError("either epochs or max_steps must be positive");
  }

  std::size_t batches_per_epoch(std::size_t n) const { return (n + batch_size - 1) / batch_size; }
  std::size_t total_steps(std::size_t n) const { return max_steps ? max_steps : epochs * batches_per_epoch(n); }
};

struct TraceRow {
  std::uint64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;

  friend bool operator==(const TraceRow&, const TraceRow&) = default;
};

template <class T>
struct TrainState {
  ParamStore<T> params;
  AdamState<T> adam;
  std::vector<TraceRow> trace;
};

template <class T>
TrainState<T> fresh_state(ParamStore<T> params) {
  TrainState<T> s;
  s.adam = AdamState<T>::zeros_like(params);
  s.params = std::move(params);
  return s;
}

/// Graph and attention structures built once per instance.
struct PreparedInstance {
  const TrainingInstance* instance = nullptr;
  HierGraph graph;
  GraphStructures structures;
};

inline std::vector<PreparedInstance> prepare_instances(const std::vector<TrainingInstance>& data, const GraphConfig& gc) {
  std::vector<PreparedInstance> out(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    out[i].instance = &data[i];
    out[i].graph = build_graph(data[i], gc);
    out[i].structures = build_structures(out[i].graph);
  }
  return out;
}

/// Instance order for one epoch.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, 0x5eed0000 + epoch));
  seeded_shuffle(order, rng);
  return order;
}

template <class T>
struct InstanceResult {
  double loss = 0.0;
  GradMap<T> grads;
};

/// Loss and parameter gradients of one instance.
template <class T>
InstanceResult<T> instance_gradient(const ParamStore<T>& params, const EncoderConfig& cfg, const PreparedInstance& pi,
                                    bool training, std::uint64_t dropout_seed) {
  Tape<T> tape(training, dropout_seed);
  Bound<T> p(tape, params);
  Var<T> loss = joint_loss(forward(p, cfg, *pi.instance, pi.graph, pi.structures), *pi.instance);
  tape.backward(loss);
  return {static_cast<double>(loss.value().item()), gradient_map(tape, params)};
}

/// Mean joint loss over `data` in inference mode.
template <class T>
double evaluate_loss(const ParamStore<T>& params, const EncoderConfig& cfg, const std::vector<PreparedInstance>& data) {
  double total = 0.0;
  for (const auto& pi : data) {
    Tape<T> tape(false, 0);
    Bound<T> p(tape, params);
    total += static_cast<double>(joint_loss(forward(p, cfg, *pi.instance, pi.graph, pi.structures), *pi.instance).value().item());
  }
  return data.empty() ? 0.0 : total / static_cast<double>(data.size());
}

/// Runs optimizer steps from `state.adam.step` up to the schedule's total.
/// Per-instance work may run on several threads; gradients are summed in
/// batch order so the result does not depend on the thread count.
/// `on_checkpoint` fires every `checkpoint_every` steps.
template <class T>
void train_loop(const std::vector<PreparedInstance>& data, const EncoderConfig& cfg, TrainState<T>& state,
                const TrainConfig& tc, const std::function<void(const TrainState<T>&)>& on_checkpoint = {},
                const std::function<void(const TraceRow&)>& on_step = {}) {
  tc.validate();
  if (data.empty()) throw ContractError("train_loop needs at least one instance");
  const std::size_t per_epoch = tc.batches_per_epoch(data.size());
  const std::size_t total = tc.total_steps(data.size());
  std::vector<std::size_t> order;
  std::size_t order_epoch = static_cast<std::size_t>(-1);

  for (std::uint64_t step = state.adam.step; step < total; ++step) {
    const std::size_t epoch = step / per_epoch, b = step % per_epoch;
    if (epoch != order_epoch) {
      order = epoch_order(data.size(), tc.seed, epoch);
      order_epoch = epoch;
    }
    const std::size_t lo = b * tc.batch_size, hi = std::min(data.size(), lo + tc.batch_size);
    const std::size_t n = hi - lo;
    std::vector<InstanceResult<T>> results(n);
    auto work = [&](std::size_t k) {
      const std::uint64_t dseed = derive_seed(derive_seed(tc.seed, step), k);
      results[k] = instance_gradient(state.params, cfg, data[order[lo + k]], true, dseed);
    };
    const std::size_t threads = std::min(tc.threads, n);
    if (threads <= 1) {
      for (std::size_t k = 0; k < n; ++k) work(k);
    } else {
      std::vector<std::thread> pool;
      std::vector<std::exception_ptr> errors(threads);
      for (std::size_t w = 0; w < threads; ++w)
        pool.emplace_back([&, w] {
          try {
            for (std::size_t k = w; k < n; k += threads) work(k);
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      for (auto& t : pool) t.join();
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    }

    GradMap<T> grads = std::move(results[0].grads);
    double loss = results[0].loss;
    for (std::size_t k = 1; k < n; ++k) {
      accumulate_grads(grads, results[k].grads);
      loss += results[k].loss;
    }
    const T inv = T{1} / static_cast<T>(n);
    for (auto& [_, g] : grads) g *= inv;
    loss /= static_cast<double>(n);
    if (!std::isfinite(loss)) throw NumericError("non-finite training loss at step " + std::to_string(step + 1));
    if (tc.max_grad_norm > 0.0) {
      const double norm = grad_norm(grads);
      if (norm > tc.max_grad_norm)
        for (auto& [_, g] : grads) g *= static_cast<T>(tc.max_grad_norm / norm);
    }

    const double lr = lr_schedule(step + 1, total, tc.lr, tc.warmup);
    adam_step(state.params, grads, state.adam, lr, tc.adam);
    state.trace.push_back({step + 1, lr, loss});
    if (on_step) on_step(state.trace.back());
    if (tc.checkpoint_every && on_checkpoint && state.adam.step % tc.checkpoint_every == 0) on_checkpoint(state);
  }
}

inline void write_trace_csv(const std::string& path, const std::vector<TraceRow>& trace) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path);
  out << "step,lr,loss\n";
  out.precision(9);
  for (const auto& r : trace) out << r.step << ',' << r.lr << ',' << r.loss << '\n';
}

inline nlohmann::json to_json(const TrainConfig& t) {
  return {{"batch_size", t.batch_size}, {"epochs", t.epochs}, {"max_steps", t.max_steps}, {"lr", t.lr},
          {"warmup", t.warmup},         {"seed", t.seed},     {"checkpoint_every", t.checkpoint_every},
          {"max_grad_norm", t.max_grad_norm}};
}

}  // namespace mgrc
