#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "convert/numerics/tensor.hpp"

// Dense kernels. Every kernel iterates in a fixed order, and each output row
// of a matrix product depends only on the matching input row, so results are
// bit-identical regardless of how many other rows share the call.
namespace convert::nn {

namespace detail {

// c[m x n] += a[m x k] * b[k x n], all row-major with explicit leading dims.
template <class T>
void gemm_accumulate(std::size_t m, std::size_t k, std::size_t n, const T* a, std::size_t lda,
                     const T* b, std::size_t ldb, T* c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    T* c_row = c + i * ldc;
    const T* a_row = a + i * lda;
    for (std::size_t p = 0; p < k; ++p) {
      const T scale = a_row[p];
      const T* b_row = b + p * ldb;
      for (std::size_t j = 0; j < n; ++j) c_row[j] += scale * b_row[j];
    }
  }
}

template <class T>
void transpose_into(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
  }
}

}  // namespace detail

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  Tensor<T> out(Shape{a.cols(), a.rows()});
  detail::transpose_into(a.rows(), a.cols(), a.data(), out.data());
  return out;
}

// a[m x k] * b[k x n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    fail(ErrorCode::dimension,
         "matmul " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor<T> out(Shape{a.rows(), b.cols()});
  detail::gemm_accumulate(a.rows(), a.cols(), b.cols(), a.data(), a.cols(), b.data(), b.cols(),
                          out.data(), out.cols());
  return out;
}

// a[m x k] * b[n x k]^T
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
    fail(ErrorCode::dimension,
         "matmul_nt " + shape_string(a.shape()) + " x " + shape_string(b.shape()) + "^T");
  }
  return matmul(a, transpose(b));
}

// a[k x m]^T * b[k x n]
template <class T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows()) {
    fail(ErrorCode::dimension,
         "matmul_tn " + shape_string(a.shape()) + "^T x " + shape_string(b.shape()));
  }
  return matmul(transpose(a), b);
}

// Sequential dot product. Retrieval scores in evaluation and serving both go
// through this function so that they agree bit for bit.
template <class T>
T dot(std::span<const T> a, std::span<const T> b) {
  require(a.size() == b.size(), ErrorCode::dimension, "dot: length mismatch");
  T acc{0};
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <class T>
void softmax_inplace(std::span<T> row) {
  if (row.empty()) return;
  const T peak = *std::max_element(row.begin(), row.end());
  T total{0};
  for (T& v : row) {
    v = std::exp(v - peak);
    total += v;
  }
  for (T& v : row) v /= total;
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  require(x.rank() == 2, ErrorCode::dimension, "softmax_rows expects a matrix");
  require_finite(x, "softmax_rows input");
  Tensor<T> out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r));
  return out;
}

// log(sum(exp(row))) with max subtraction.
template <class T>
T log_sum_exp(std::span<const T> row) {
  const T peak = *std::max_element(row.begin(), row.end());
  T total{0};
  for (T v : row) total += std::exp(v - peak);
  return peak + std::log(total);
}

// Exact (erf) GELU and its derivative.
template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

}  // namespace convert::nn
