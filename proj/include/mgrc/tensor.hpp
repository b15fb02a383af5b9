#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mgrc {

/// Base class for every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand extents do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf appeared where only finite values are allowed.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file or record.
class FormatError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major array. Rank 1 and rank 2 are the only ranks the model
/// stack uses; a scalar is shape {1}.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    validate_extents();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_extents();
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }
  static Tensor matrix(std::size_t r, std::size_t c, T fill = T{0}) { return Tensor(Shape{r, c}, fill); }
  static Tensor vector(std::size_t n, T fill = T{0}) { return Tensor(Shape{n}, fill); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Rank-1 tensors are treated as a single row.
  std::size_t rows() const noexcept { return shape_.size() >= 2 ? shape_[0] : 1; }
  std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

  std::vector<T>& data() noexcept { return data_; }
  const std::vector<T>& data() const noexcept { return data_; }
  T* row_ptr(std::size_t r) noexcept { return data_.data() + r * cols(); }
  const T* row_ptr(std::size_t r) const noexcept { return data_.data() + r * cols(); }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_string(shape_));
    return data_[0];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const noexcept {
    for (const T& v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  Tensor& operator+=(const Tensor& o) {
    if (o.shape_ != shape_) throw ShapeError("+= between " + shape_string(shape_) + " and " + shape_string(o.shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Tensor& operator*=(T s) {
    for (T& v : data_) v *= s;
    return *this;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  void validate_extents() const {
    if (shape_.empty()) throw ShapeError("tensor needs at least one extent");
    for (std::size_t e : shape_)
      if (e == 0) throw ShapeError("zero extent in shape " + shape_string(shape_));
  }

  Shape shape_;
  std::vector<T> data_;
};

}  // namespace mgrc
