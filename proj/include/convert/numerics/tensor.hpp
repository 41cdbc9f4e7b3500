#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "convert/error.hpp"

namespace convert::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

// Dense row-major tensor. A rank-0 tensor is a scalar.
template <class T = float>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_dims();
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (shape_size(shape_) != data_.size()) {
      fail(ErrorCode::dimension, "tensor data length " + std::to_string(data_.size()) +
                                     " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) fail(ErrorCode::dimension, "ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(data));
  }

  static Tensor vector(std::initializer_list<T> values) {
    return Tensor(Shape{values.size()}, std::vector<T>(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool is_scalar() const noexcept { return shape_.empty(); }

  std::size_t rows() const {
    require(rank() == 2, ErrorCode::dimension, "rows() requires a matrix");
    return shape_[0];
  }
  std::size_t cols() const {
    require(rank() == 2, ErrorCode::dimension, "cols() requires a matrix");
    return shape_[1];
  }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * shape_[1], shape_[1]}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * shape_[1], shape_[1]}; }

  T item() const {
    require(size() == 1, ErrorCode::contract, "item() requires a single-element tensor");
    return data_[0];
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    for (std::size_t d : shape_) {
      if (d == 0) fail(ErrorCode::dimension, "tensor dimensions must be positive");
    }
  }

  Shape shape_;
  std::vector<T> data_ = std::vector<T>(1, T{0});
};

template <class T>
void require_finite(const Tensor<T>& t, const char* what) {
  if (!t.all_finite()) fail(ErrorCode::numeric, std::string("non-finite value produced by ") + what);
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    fail(ErrorCode::dimension, std::string(what) + ": shape " + shape_string(a.shape()) +
                                   " vs " + shape_string(b.shape()));
  }
}

}  // namespace convert::nn
