#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "bsatnp/errors.hpp"
#include "bsatnp/memory.hpp"

namespace bsatnp {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

// Dense row-major array. The library runs in float by default; double is
// used for gradient checks and the exact-GP oracle.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::span<const T> values) : shape_(std::move(shape)), data_(values.begin(), values.end()) {
    if (data_.size() != shape_size(shape_)) {
      throw DimensionError("tensor of shape " + shape_string(shape_) + " cannot hold " +
                           std::to_string(values.size()) + " values");
    }
  }

  Tensor(Shape shape, std::initializer_list<T> values)
      : Tensor(std::move(shape), std::span<const T>(values.begin(), values.size())) {}

  static Tensor scalar(T value) { return Tensor(Shape{}, value); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
      throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_string(shape_));
    }
    return shape_[axis];
  }

  // Views a tensor as a matrix: last axis is columns, the rest are rows.
  std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const noexcept {
    if (shape_.empty()) return 1;
    const std::size_t c = shape_.back();
    return c == 0 ? shape_size(Shape(shape_.begin(), shape_.end() - 1)) : data_.size() / c;
  }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return {data_.data(), data_.size()}; }
  std::span<const T> values() const noexcept { return {data_.data(), data_.size()}; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

  T* row(std::size_t r) noexcept { return data_.data() + r * cols(); }
  const T* row(std::size_t r) const noexcept { return data_.data() + r * cols(); }

  T item() const {
    if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && std::equal(a.data_.begin(), a.data_.end(), b.data_.begin(), b.data_.end());
  }

 private:
  Shape shape_;
  Buffer<T> data_;
};

// Throws DimensionError naming `what` unless the shapes agree.
void require_shape(const Shape& actual, const Shape& expected, const std::string& what);

template <typename T>
void require_matrix(const Tensor<T>& t, const std::string& what) {
  if (t.rank() != 2) throw DimensionError(what + ": expected a matrix, got shape " + shape_string(t.shape()));
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_shape(a.shape(), b.shape(), "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace bsatnp
