#pragma once

// Reverse-mode differentiation over dense tensors. A Tape records every op in
// execution order; backward() replays it in reverse, so node ids double as a
// topological order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mgrc/rng.hpp"
#include "mgrc/tensor.hpp"

namespace mgrc {

/// Per-entry on/off flags; 1 means the entry participates.
using Mask = std::vector<std::uint8_t>;
using Index = std::vector<std::size_t>;

template <class T>
class Tape;

/// Handle to a node on a tape. Cheap to copy.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>&)>;

  Tape() = default;
  /// `training` enables dropout; `seed` drives the dropout masks.
  Tape(bool training, std::uint64_t seed) : training_(training), seed_(seed) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool training() const noexcept { return training_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var<T> constant(Tensor<T> value) { return push("constant", std::move(value), false, {}, {}); }

  Var<T> parameter(std::string name, Tensor<T> value) {
    Var<T> v = push("parameter", std::move(value), true, {}, {});
    nodes_[v.id].name = std::move(name);
    return v;
  }

  /// Appends an op result. The node requires grad iff any input does.
  Var<T> record(const char* op, Tensor<T> value, std::span<const Var<T>> inputs, Backward backward) {
    bool needs = false;
    for (const Var<T>& in : inputs) needs = needs || nodes_[in.id].requires_grad;
    return push(op, std::move(value), needs, std::move(backward), inputs);
  }

  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward) {
    return record(op, std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()), std::move(backward));
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }

  /// Gradient accumulator for `v`, zero-initialized on first use.
  Tensor<T>& grad_buffer(Var<T> v) {
    Node& n = nodes_[v.id];
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Null when nothing flowed into `v`.
  const Tensor<T>* grad(Var<T> v) const {
    const Node& n = nodes_.at(v.id);
    return n.has_grad ? &n.grad : nullptr;
  }

  void backward(Var<T> loss) {
    if (nodes_.at(loss.id).value.size() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " +
                          shape_string(nodes_[loss.id].value.shape()));
    }
    grad_buffer(loss)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, n.grad);
    }
  }

  /// Gradients of every named parameter on this tape. Parameters that were
  /// recorded but received no flow get zeros.
  std::map<std::string, Tensor<T>> parameter_grads() const {
    std::map<std::string, Tensor<T>> out;
    for (const Node& n : nodes_) {
      if (n.name.empty()) continue;
      out.emplace(n.name, n.has_grad ? n.grad : Tensor<T>(n.value.shape()));
    }
    return out;
  }

  /// Fresh seed for the next dropout op.
  std::uint64_t next_dropout_seed() { return derive_seed(seed_, dropout_calls_++); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Backward backward;
    std::string name;
    const char* op = "";
    bool requires_grad = false;
    bool has_grad = false;
  };

  Var<T> push(const char* op, Tensor<T> value, bool requires_grad, Backward backward,
              std::span<const Var<T>> inputs) {
    for (const Var<T>& in : inputs)
      if (in.tape != this) throw ContractError(std::string(op) + ": input from a different tape");
    if (!value.all_finite()) throw NumericError(std::string(op) + " produced a non-finite value");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    n.op = op;
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool training_ = false;
  std::uint64_t seed_ = 0;
  std::uint64_t dropout_calls_ = 0;
};

namespace detail {

template <class T>
void require_rank2(const char* op, const Tensor<T>& t) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + " expects a matrix, got " + shape_string(t.shape()));
}

template <class T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
}

template <class T>
Tensor<T> plain_matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor<T> out = Tensor<T>::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    T* o = out.row_ptr(i);
    const T* ar = a.row_ptr(i);
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ar[p];
      if (av == T{0}) continue;
      const T* br = b.row_ptr(p);
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

inline void check_mask(const char* op, std::size_t n, const Mask& mask) {
  if (mask.size() != n)
    throw ShapeError(std::string(op) + ": mask length " + std::to_string(mask.size()) + " vs " + std::to_string(n));
}

}  // namespace detail

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  detail::require_rank2("matmul", av);
  detail::require_rank2("matmul", bv);
  if (av.cols() != bv.rows())
    throw ShapeError("matmul: inner extents differ between " + shape_string(av.shape()) + " and " +
                     shape_string(bv.shape()));
  return a.tape->record("matmul", detail::plain_matmul(av, bv), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& A = t.value(a);
    const Tensor<T>& B = t.value(b);
    const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
    if (t.requires_grad(a)) {
      Tensor<T>& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T s{0};
          const T* gr = g.row_ptr(i);
          const T* br = B.row_ptr(p);
          for (std::size_t j = 0; j < n; ++j) s += gr[j] * br[j];
          ga(i, p) += s;
        }
    }
    if (t.requires_grad(b)) {
      Tensor<T>& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < m; ++i) {
        const T* gr = g.row_ptr(i);
        for (std::size_t p = 0; p < k; ++p) {
          const T av = A(i, p);
          if (av == T{0}) continue;
          T* gbr = gb.row_ptr(p);
          for (std::size_t j = 0; j < n; ++j) gbr[j] += av * gr[j];
        }
      }
    }
  });
}

template <class T>
Var<T> transpose(Var<T> a) {
  const Tensor<T>& av = a.value();
  detail::require_rank2("transpose", av);
  Tensor<T> out = Tensor<T>::matrix(av.cols(), av.rows());
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < av.cols(); ++j) out(j, i) = av(i, j);
  return a.tape->record("transpose", std::move(out), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    if (!t.requires_grad(a)) return;
    Tensor<T>& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < ga.rows(); ++i)
      for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) += g(j, i);
  });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape("add", a.value(), b.value());
  Tensor<T> out = a.value();
  out += b.value();
  return a.tape->record("add", std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(a)) t.grad_buffer(a) += g;
    if (t.requires_grad(b)) t.grad_buffer(b) += g;
  });
}

/// Adds a length-d vector to every row of an n×d matrix.
template <class T>
Var<T> add_row(Var<T> a, Var<T> bias) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = bias.value();
  if (bv.size() != av.cols())
    throw ShapeError("add_row: bias " + shape_string(bv.shape()) + " vs rows of " + shape_string(av.shape()));
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += bv[j];
  return a.tape->record("add_row", std::move(out), {a, bias}, [a, bias](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(a)) t.grad_buffer(a) += g;
    if (t.requires_grad(bias)) {
      Tensor<T>& gb = t.grad_buffer(bias);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gb[j] += g(i, j);
    }
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape("mul", a.value(), b.value());
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record("mul", std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& A = t.value(a);
    const Tensor<T>& B = t.value(b);
    if (t.requires_grad(a)) {
      Tensor<T>& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    }
    if (t.requires_grad(b)) {
      Tensor<T>& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T c) {
  Tensor<T> out = a.value();
  out *= c;
  return a.tape->record("scale", std::move(out), {a}, [a, c](Tape<T>& t, const Tensor<T>& g) {
    if (!t.requires_grad(a)) return;
    Tensor<T>& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

/// Column-wise concatenation of matrices with equal row counts.
template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t rows = parts[0].value().rows();
  std::size_t total = 0;
  for (const Var<T>& p : parts) {
    detail::require_rank2("concat_cols", p.value());
    if (p.value().rows() != rows)
      throw ShapeError("concat_cols: row mismatch " + shape_string(parts[0].shape()) + " vs " +
                       shape_string(p.shape()));
    total += p.value().cols();
  }
  Tensor<T> out = Tensor<T>::matrix(rows, total);
  std::size_t off = 0;
  for (const Var<T>& p : parts) {
    const Tensor<T>& pv = p.value();
    for (std::size_t i = 0; i < rows; ++i) std::copy(pv.row_ptr(i), pv.row_ptr(i) + pv.cols(), out.row_ptr(i) + off);
    off += pv.cols();
  }
  return parts[0].tape->record("concat_cols", std::move(out), std::span<const Var<T>>(parts),
                               [parts, rows](Tape<T>& t, const Tensor<T>& g) {
                                 std::size_t o = 0;
                                 for (const Var<T>& p : parts) {
                                   const std::size_t c = t.value(p).cols();
                                   if (t.requires_grad(p)) {
                                     Tensor<T>& gp = t.grad_buffer(p);
                                     for (std::size_t i = 0; i < rows; ++i)
                                       for (std::size_t j = 0; j < c; ++j) gp(i, j) += g(i, o + j);
                                   }
                                   o += c;
                                 }
                               });
}

/// Row-wise concatenation of matrices with equal column counts.
template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t cols = parts[0].value().cols();
  std::size_t total = 0;
  for (const Var<T>& p : parts) {
    detail::require_rank2("concat_rows", p.value());
    if (p.value().cols() != cols)
      throw ShapeError("concat_rows: column mismatch " + shape_string(parts[0].shape()) + " vs " +
                       shape_string(p.shape()));
    total += p.value().rows();
  }
  Tensor<T> out = Tensor<T>::matrix(total, cols);
  std::size_t off = 0;
  for (const Var<T>& p : parts) {
    const Tensor<T>& pv = p.value();
    std::copy(pv.data().begin(), pv.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off * cols));
    off += pv.rows();
  }
  return parts[0].tape->record("concat_rows", std::move(out), std::span<const Var<T>>(parts),
                               [parts, cols](Tape<T>& t, const Tensor<T>& g) {
                                 std::size_t o = 0;
                                 for (const Var<T>& p : parts) {
                                   const std::size_t n = t.value(p).size();
                                   if (t.requires_grad(p)) {
                                     Tensor<T>& gp = t.grad_buffer(p);
                                     for (std::size_t k = 0; k < n; ++k) gp[k] += g[o + k];
                                   }
                                   o += n;
                                 }
                               });
}

/// out[k] = a[idx[k]] row-wise.
template <class T>
Var<T> gather_rows(Var<T> a, Index idx) {
  const Tensor<T>& av = a.value();
  detail::require_rank2("gather_rows", av);
  if (idx.empty()) throw ShapeError("gather_rows: empty index");
  Tensor<T> out = Tensor<T>::matrix(idx.size(), av.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= av.rows())
      throw ShapeError("gather_rows: index " + std::to_string(idx[k]) + " outside " + shape_string(av.shape()));
    std::copy(av.row_ptr(idx[k]), av.row_ptr(idx[k]) + av.cols(), out.row_ptr(k));
  }
  return a.tape->record("gather_rows", std::move(out), {a}, [a, idx = std::move(idx)](Tape<T>& t, const Tensor<T>& g) {
    if (!t.requires_grad(a)) return;
    Tensor<T>& ga = t.grad_buffer(a);
    const std::size_t c = ga.cols();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      T* dst = ga.row_ptr(idx[k]);
      const T* src = g.row_ptr(k);
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

/// Copy of `base` with rows idx[k] replaced by rows[k]. Indices must be distinct.
template <class T>
Var<T> scatter_rows(Var<T> base, Var<T> rows, Index idx) {
  const Tensor<T>& bv = base.value();
  const Tensor<T>& rv = rows.value();
  detail::require_rank2("scatter_rows", bv);
  detail::require_rank2("scatter_rows", rv);
  if (rv.rows() != idx.size() || rv.cols() != bv.cols())
    throw ShapeError("scatter_rows: rows " + shape_string(rv.shape()) + " into " + shape_string(bv.shape()));
  Tensor<T> out = bv;
  std::vector<std::uint8_t> seen(bv.rows(), 0);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= bv.rows()) throw ShapeError("scatter_rows: index out of range");
    if (seen[idx[k]]) throw ContractError("scatter_rows: duplicate index " + std::to_string(idx[k]));
    seen[idx[k]] = 1;
    std::copy(rv.row_ptr(k), rv.row_ptr(k) + rv.cols(), out.row_ptr(idx[k]));
  }
  return base.tape->record(
      "scatter_rows", std::move(out), {base, rows},
      [base, rows, idx = std::move(idx), seen = std::move(seen)](Tape<T>& t, const Tensor<T>& g) {
        const std::size_t c = g.cols();
        if (t.requires_grad(base)) {
          Tensor<T>& gb = t.grad_buffer(base);
          for (std::size_t i = 0; i < g.rows(); ++i) {
            if (seen[i]) continue;
            for (std::size_t j = 0; j < c; ++j) gb(i, j) += g(i, j);
          }
        }
        if (t.requires_grad(rows)) {
          Tensor<T>& gr = t.grad_buffer(rows);
          for (std::size_t k = 0; k < idx.size(); ++k)
            for (std::size_t j = 0; j < c; ++j) gr(k, j) += g(idx[k], j);
        }
      });
}

/// out[i][j] = a[i][bucket[i][j]] where mask[i][j] is set, else 0.
/// `a` is n×B, `bucket` and `mask` are n×m row-major.
template <class T>
Var<T> gather_buckets(Var<T> a, std::shared_ptr<const Index> bucket, std::shared_ptr<const Mask> mask,
                      std::size_t m) {
  const Tensor<T>& av = a.value();
  detail::require_rank2("gather_buckets", av);
  const std::size_t n = av.rows(), nb = av.cols();
  if (bucket->size() != n * m) throw ShapeError("gather_buckets: bucket table size mismatch");
  detail::check_mask("gather_buckets", n * m, *mask);
  Tensor<T> out = Tensor<T>::matrix(n, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const std::size_t k = i * m + j;
      if (!(*mask)[k]) continue;
      if ((*bucket)[k] >= nb) throw ShapeError("gather_buckets: bucket " + std::to_string((*bucket)[k]) + " >= " + std::to_string(nb));
      out[k] = av(i, (*bucket)[k]);
    }
  return a.tape->record("gather_buckets", std::move(out), {a}, [a, bucket, mask, m](Tape<T>& t, const Tensor<T>& g) {
    if (!t.requires_grad(a)) return;
    Tensor<T>& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < ga.rows(); ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const std::size_t k = i * m + j;
        if ((*mask)[k]) ga(i, (*bucket)[k]) += g[k];
      }
  });
}

/// Adjoint of gather_buckets: out[i][b] = sum of p[i][j] over unmasked j with bucket[i][j] == b.
template <class T>
Var<T> bucket_sum(Var<T> p, std::shared_ptr<const Index> bucket, std::shared_ptr<const Mask> mask,
                  std::size_t num_buckets) {
  const Tensor<T>& pv = p.value();
  detail::require_rank2("bucket_sum", pv);
  const std::size_t n = pv.rows(), m = pv.cols();
  if (bucket->size() != n * m) throw ShapeError("bucket_sum: bucket table size mismatch");
  detail::check_mask("bucket_sum", n * m, *mask);
  Tensor<T> out = Tensor<T>::matrix(n, num_buckets);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const std::size_t k = i * m + j;
      if (!(*mask)[k]) continue;
      if ((*bucket)[k] >= num_buckets) throw ShapeError("bucket_sum: bucket out of range");
      out(i, (*bucket)[k]) += pv[k];
    }
  return p.tape->record("bucket_sum", std::move(out), {p}, [p, bucket, mask](Tape<T>& t, const Tensor<T>& g) {
    if (!t.requires_grad(p)) return;
    Tensor<T>& gp = t.grad_buffer(p);
    const std::size_t m = gp.cols();
    for (std::size_t i = 0; i < gp.rows(); ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const std::size_t k = i * m + j;
        if ((*mask)[k]) gp[k] += g(i, (*bucket)[k]);
      }
  });
}

namespace detail {

// Row-wise softmax over unmasked entries; masked entries are exactly 0.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x, const Mask& mask, const char* op) {
  const std::size_t n = x.rows(), m = x.cols();
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < m; ++j)
      if (mask[i * m + j]) mx = std::max(mx, x[i * m + j]);
    if (mx == -std::numeric_limits<T>::infinity())
      throw ContractError(std::string(op) + ": row " + std::to_string(i) + " has every position masked");
    T z{0};
    for (std::size_t j = 0; j < m; ++j) {
      const std::size_t k = i * m + j;
      if (!mask[k]) continue;
      out[k] = std::exp(x[k] - mx);
      z += out[k];
    }
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= z;
  }
  return out;
}

}  // namespace detail

/// Row-wise softmax restricted to unmasked entries (a rank-1 input is one row).
template <class T>
Var<T> masked_softmax(Var<T> x, Mask mask) {
  detail::check_mask("masked_softmax", x.value().size(), mask);
  Tensor<T> out = detail::softmax_rows(x.value(), mask, "masked_softmax");
  Tensor<T> saved = out;
  return x.tape->record("masked_softmax", std::move(out), {x}, [x, saved = std::move(saved)](Tape<T>& t, const Tensor<T>& g) {
    if (!t.requires_grad(x)) return;
    Tensor<T>& gx = t.grad_buffer(x);
    const std::size_t n = saved.rows(), m = saved.cols();
    for (std::size_t i = 0; i < n; ++i) {
      T dot{0};
      for (std::size_t j = 0; j < m; ++j) dot += g[i * m + j] * saved[i * m + j];
      for (std::size_t j = 0; j < m; ++j) {
        const std::size_t k = i * m + j;
        gx[k] += saved[k] * (g[k] - dot);
      }
    }
  });
}

/// Row-wise log-softmax over unmasked entries; masked outputs are 0.
template <class T>
Var<T> masked_log_softmax(Var<T> x, Mask mask) {
  detail::check_mask("masked_log_softmax", x.value().size(), mask);
  Tensor<T> probs = detail::softmax_rows(x.value(), mask, "masked_log_softmax");
  const Tensor<T>& xv = x.value();
  const std::size_t n = xv.rows(), m = xv.cols();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < n; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < m; ++j)
      if (mask[i * m + j]) mx = std::max(mx, xv[i * m + j]);
    T z{0};
    for (std::size_t j = 0; j < m; ++j)
      if (mask[i * m + j]) z += std::exp(xv[i * m + j] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t j = 0; j < m; ++j)
      if (mask[i * m + j]) out[i * m + j] = xv[i * m + j] - lse;
  }
  return x.tape->record("masked_log_softmax", std::move(out), {x},
                        [x, probs = std::move(probs), mask = std::move(mask)](Tape<T>& t, const Tensor<T>& g) {
                          if (!t.requires_grad(x)) return;
                          Tensor<T>& gx = t.grad_buffer(x);
                          const std::size_t n = probs.rows(), m = probs.cols();
                          for (std::size_t i = 0; i < n; ++i) {
                            T s{0};
                            for (std::size_t j = 0; j < m; ++j)
                              if (mask[i * m + j]) s += g[i * m + j];
                            for (std::size_t j = 0; j < m; ++j) {
                              const std::size_t k = i * m + j;
                              if (mask[k]) gx[k] += g[k] - probs[k] * s;
                            }
                          }
                        });
}

/// Scalar holding x[flat_index].
template <class T>
Var<T> pick(Var<T> x, std::size_t flat_index) {
  if (flat_index >= x.value().size())
    throw ShapeError("pick: index " + std::to_string(flat_index) + " outside " + shape_string(x.shape()));
  return x.tape->record("pick", Tensor<T>::scalar(x.value()[flat_index]), {x},
                        [x, flat_index](Tape<T>& t, const Tensor<T>& g) {
                          if (t.requires_grad(x)) t.grad_buffer(x)[flat_index] += g[0];
                        });
}

template <class T>
Var<T> sum(Var<T> x) {
  T s{0};
  for (T v : x.value().data()) s += v;
  return x.tape->record("sum", Tensor<T>::scalar(s), {x}, [x](Tape<T>& t, const Tensor<T>& g) {
    if (!t.requires_grad(x)) return;
    Tensor<T>& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
  });
}

template <class T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

/// Exact-erf GELU: x * Phi(x).
template <class T>
Var<T> gelu(Var<T> x) {
  const T inv_sqrt2 = T{1} / std::numbers::sqrt2_v<T>;
  Tensor<T> out = x.value();
  for (T& v : out.data()) v = v * T{0.5} * (T{1} + std::erf(v * inv_sqrt2));
  return x.tape->record("gelu", std::move(out), {x}, [x, inv_sqrt2](Tape<T>& t, const Tensor<T>& g) {
    if (!t.requires_grad(x)) return;
    const T inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
    const Tensor<T>& xv = t.value(x);
    Tensor<T>& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const T v = xv[i];
      const T cdf = T{0.5} * (T{1} + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T{-0.5} * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

inline constexpr double kLayerNormEpsilon = 1e-12;

/// Per-row normalization to zero mean / unit variance, then gain and bias.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias) {
  const Tensor<T>& xv = x.value();
  const std::size_t n = xv.rows(), d = xv.cols();
  if (d < 2) throw ShapeError("layer_norm needs at least 2 features, got " + shape_string(xv.shape()));
  if (gain.value().size() != d || bias.value().size() != d)
    throw ShapeError("layer_norm: gain/bias length vs " + shape_string(xv.shape()));
  Tensor<T> xhat(xv.shape());
  std::vector<T> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* r = xv.row_ptr(i);
    T mu{0};
    for (std::size_t j = 0; j < d; ++j) mu += r[j];
    mu /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (r[j] - mu) * (r[j] - mu);
    var /= static_cast<T>(d);
    inv_std[i] = T{1} / std::sqrt(var + static_cast<T>(kLayerNormEpsilon));
    for (std::size_t j = 0; j < d; ++j) xhat(i, j) = (r[j] - mu) * inv_std[i];
  }
  Tensor<T> out = xhat;
  const Tensor<T>& gv = gain.value();
  const Tensor<T>& bv = bias.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out(i, j) = out(i, j) * gv[j] + bv[j];
  return x.tape->record(
      "layer_norm", std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, const Tensor<T>& g) {
        const std::size_t n = xhat.rows(), d = xhat.cols();
        const Tensor<T>& gv = t.value(gain);
        if (t.requires_grad(gain)) {
          Tensor<T>& gg = t.grad_buffer(gain);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g(i, j) * xhat(i, j);
        }
        if (t.requires_grad(bias)) {
          Tensor<T>& gb = t.grad_buffer(bias);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g(i, j);
        }
        if (t.requires_grad(x)) {
          Tensor<T>& gx = t.grad_buffer(x);
          std::vector<T> dxhat(d);
          for (std::size_t i = 0; i < n; ++i) {
            T s1{0}, s2{0};
            for (std::size_t j = 0; j < d; ++j) {
              dxhat[j] = g(i, j) * gv[j];
              s1 += dxhat[j];
              s2 += dxhat[j] * xhat(i, j);
            }
            const T inv_d = T{1} / static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j)
              gx(i, j) += inv_std[i] * (dxhat[j] - inv_d * s1 - xhat(i, j) * inv_d * s2);
          }
        }
      });
}

/// Inverted dropout. Identity unless the tape is in training mode and rate > 0.
template <class T>
Var<T> dropout(Var<T> x, double rate) {
  Tape<T>& tape = *x.tape;
  if (!tape.training() || rate <= 0.0) return x;
  if (rate >= 1.0) throw ContractError("dropout rate must be < 1");
  std::mt19937_64 rng(tape.next_dropout_seed());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  Tensor<T> keep(x.shape());
  for (T& k : keep.data()) k = unit_uniform(rng) >= rate ? keep_scale : T{0};
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= keep[i];
  return tape.record("dropout", std::move(out), {x}, [x, keep = std::move(keep)](Tape<T>& t, const Tensor<T>& g) {
    if (!t.requires_grad(x)) return;
    Tensor<T>& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * keep[i];
  });
}

}  // namespace mgrc
