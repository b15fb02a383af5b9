#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "mgrc/params.hpp"

namespace mgrc {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b));
}

/// Compares reverse-mode gradients of `loss_fn` with central differences,
/// one coordinate at a time. `loss_fn(Bound<T>&)` must build a scalar loss
/// on the bound tape and must not depend on mutable state (dropout off).
/// Use T = long double for extended precision.
template <class T, class LossFn>
GradCheckReport finite_diff_check(LossFn&& loss_fn, ParamStore<T> params, double eps) {
  if (!(eps > 0.0)) throw ContractError("finite_diff_check: eps must be positive");
  auto evaluate = [&](const ParamStore<T>& p) {
    Tape<T> tape;
    Bound<T> bound(tape, p);
    const T v = loss_fn(bound).value().item();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: loss is not finite");
    return v;
  };

  GradMap<T> analytic;
  {
    Tape<T> tape;
    Bound<T> bound(tape, params);
    Var<T> loss = loss_fn(bound);
    if (!std::isfinite(loss.value().item())) throw NumericError("finite_diff_check: loss is not finite");
    tape.backward(loss);
    analytic = gradient_map(tape, params);
  }

  GradCheckReport report;
  for (auto& [name, tensor] : params) {
    const Tensor<T>& g = analytic.at(name);
    const T h = static_cast<T>(eps);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const T saved = tensor[i];
      tensor[i] = saved + h;
      const T up = evaluate(params);
      tensor[i] = saved - h;
      const T down = evaluate(params);
      tensor[i] = saved;
      const T numeric_t = (up - down) / (2 * h);
      const double numeric = static_cast<double>(numeric_t);
      const double err = static_cast<double>(std::abs(g[i] - numeric_t) / std::max<T>(T(1e-8), std::abs(g[i]) + std::abs(numeric_t)));
      ++report.coordinates;
      if (err > report.max_rel_error || report.worst_param.empty()) {
        if (err >= report.max_rel_error) {
          report.max_rel_error = err;
          report.worst_param = name;
          report.worst_index = i;
          report.analytic = static_cast<double>(g[i]);
          report.numeric = numeric;
        }
      }
    }
  }
  return report;
}

}  // namespace mgrc
