#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "mgrc/params.hpp"

namespace mgrc {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moments per parameter plus the number of updates applied.
template <class T>
struct AdamState {
  ParamStore<T> m;
  ParamStore<T> v;
  std::uint64_t step = 0;

  static AdamState zeros_like(const ParamStore<T>& params) {
    AdamState s;
    for (const auto& [name, t] : params) {
      s.m.add(name, Tensor<T>(t.shape()));
      s.v.add(name, Tensor<T>(t.shape()));
    }
    return s;
  }

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// Linear warmup from 0 to `peak` over the first warmup_prop * total steps,
/// then linear decay to 0 at `total`.
inline double lr_schedule(std::uint64_t step, std::uint64_t total, double peak, double warmup_prop) {
  if (total == 0) return 0.0;
  if (step > total) throw ContractError("lr_schedule: step beyond the schedule");
  const double s = static_cast<double>(step), n = static_cast<double>(total);
  const double warm = warmup_prop * n;
  if (s < warm) return peak * s / warm;
  if (n <= warm) return peak;
  return peak * (n - s) / (n - warm);
}

/// Global L2 norm over all gradients.
template <class T>
double grad_norm(const GradMap<T>& grads) {
  double s = 0.0;
  for (const auto& [_, g] : grads)
    for (T v : g.data()) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

/// One bias-corrected Adam update. Throws NumericError naming the first
/// parameter with a non-finite gradient, before touching any state.
template <class T>
void adam_step(ParamStore<T>& params, const GradMap<T>& grads, AdamState<T>& state, double lr,
               const AdamConfig& cfg = {}) {
  for (const auto& [name, value] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw ContractError("adam_step: no gradient for " + name);
    if (it->second.shape() != value.shape())
      throw ShapeError("adam_step: gradient of " + name + " has shape " + shape_string(it->second.shape()));
    if (!it->second.all_finite()) throw NumericError("adam_step: non-finite gradient for " + name);
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, value] : params) {
    const Tensor<T>& g = grads.at(name);
    Tensor<T>& m = state.m.at(name);
    Tensor<T>& v = state.v.at(name);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.epsilon);
      value[i] = static_cast<T>(static_cast<double>(value[i]) - update);
    }
  }
}

}  // namespace mgrc
