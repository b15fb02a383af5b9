#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mgrc/autodiff.hpp"
#include "mgrc/rng.hpp"

namespace mgrc {

template <class T>
using GradMap = std::map<std::string, Tensor<T>>;

/// Named parameter tensors, iterated in name order.
template <class T>
class ParamStore {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  void add(std::string name, Tensor<T> value) {
    auto [it, inserted] = tensors_.emplace(std::move(name), std::move(value));
    if (!inserted) throw ContractError("duplicate parameter " + it->first);
  }

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ContractError("unknown parameter " + name);
    return it->second;
  }

  Tensor<T>& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ContractError("unknown parameter " + name);
    return it->second;
  }

  std::size_t size() const noexcept { return tensors_.size(); }
  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.size();
    return n;
  }

  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, t] : tensors_) out.add(name, t.template cast<U>());
    return out;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) { return a.tensors_ == b.tensors_; }

 private:
  Map tensors_;
};

enum class InitKind { kNormal, kZero, kOne };

/// Declared shape and initializer of one named parameter.
struct ParamSpec {
  std::string name;
  Shape shape;
  InitKind init = InitKind::kNormal;
};

/// Creates every parameter in `specs`. Normal entries draw N(0, std^2) from
/// a stream seeded by (seed, name), so values do not depend on spec order.
template <class T>
void init_params(ParamStore<T>& store, const std::vector<ParamSpec>& specs, double std, std::uint64_t seed) {
  for (const ParamSpec& spec : specs) {
    Tensor<T> t(spec.shape);
    if (spec.init == InitKind::kOne) {
      for (T& v : t.data()) v = T{1};
    } else if (spec.init == InitKind::kNormal) {
      std::mt19937_64 rng(derive_seed(seed, hash_string(spec.name)));
      for (T& v : t.data()) v = static_cast<T>(std * standard_normal(rng));
    }
    store.add(spec.name, std::move(t));
  }
}

/// Throws FormatError unless `store` holds exactly the parameters of `specs` with matching shapes.
template <class T>
void check_params(const ParamStore<T>& store, const std::vector<ParamSpec>& specs) {
  for (const ParamSpec& spec : specs) {
    if (!store.contains(spec.name)) throw FormatError("missing parameter " + spec.name);
    if (store.at(spec.name).shape() != spec.shape)
      throw FormatError("parameter " + spec.name + " has shape " + shape_string(store.at(spec.name).shape()) +
                        ", expected " + shape_string(spec.shape));
  }
  if (store.size() != specs.size()) {
    for (const auto& [name, _] : store) {
      bool known = false;
      for (const ParamSpec& spec : specs) known = known || spec.name == name;
      if (!known) throw FormatError("unexpected parameter " + name);
    }
  }
}

/// Lazily places parameters on a tape the first time a forward pass asks
/// for them, so unused parameters never appear on it.
template <class T>
class Bound {
 public:
  Bound(Tape<T>& tape, const ParamStore<T>& store) : tape_(&tape), store_(&store) {}

  Var<T> operator()(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    Var<T> v = tape_->parameter(name, store_->at(name));
    vars_.emplace(name, v);
    return v;
  }

  Tape<T>& tape() const noexcept { return *tape_; }
  const ParamStore<T>& store() const noexcept { return *store_; }

 private:
  Tape<T>* tape_;
  const ParamStore<T>* store_;
  std::map<std::string, Var<T>> vars_;
};

/// Gradient for every parameter in `store`; parameters absent from the tape get zeros.
template <class T>
GradMap<T> gradient_map(const Tape<T>& tape, const ParamStore<T>& store) {
  GradMap<T> on_tape = tape.parameter_grads();
  GradMap<T> out;
  for (const auto& [name, value] : store) {
    auto it = on_tape.find(name);
    out.emplace(name, it != on_tape.end() ? std::move(it->second) : Tensor<T>(value.shape()));
  }
  return out;
}

/// Adds `src` into `dst` entrywise; both must cover the same names.
template <class T>
void accumulate_grads(GradMap<T>& dst, const GradMap<T>& src) {
  for (const auto& [name, g] : src) {
    auto it = dst.find(name);
    if (it == dst.end()) {
      dst.emplace(name, g);
    } else {
      it->second += g;
    }
  }
}

}  // namespace mgrc
