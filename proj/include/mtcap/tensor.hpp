// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "mtcap/error.hpp"

namespace mtcap {

// Dense row-major matrix. Vectors are stored as 1 x n.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<T> values)
      : rows_(rows), cols_(cols), data_(std::move(values)) {
    require(data_.size() == rows_ * cols_, ErrorCode::kDimension,
            "tensor buffer of length " + std::to_string(data_.size()) + " does not match shape " +
                std::to_string(rows) + "x" + std::to_string(cols));
  }

  static Tensor from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Tensor out(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      require(row.size() == c, ErrorCode::kDimension, "ragged initializer rows");
      std::size_t j = 0;
      for (T v : row) {
        out(i, j++) = v;
      }
      ++i;
    }
    return out;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::vector<std::size_t> shape() const { return {rows_, cols_}; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) {
      out[i] = static_cast<U>(data_[i]);
    }
    return out;
  }

  bool operator==(const Tensor& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

template <typename T>
std::string shape_string(const Tensor<T>& t) {
  return "[" + std::to_string(t.rows()) + "x" + std::to_string(t.cols()) + "]";
}

// Kernels. Every output element accumulates over the inner index in ascending
// order with the same code path regardless of its row, so row permutations of
// an operand permute the result bit-exactly.

// c (+)= a * b
template <typename T>
void gemm_nn(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c, bool accumulate) {
  const std::size_t m = a.rows();
  const std::size_t k = a.cols();
  const std::size_t n = b.cols();
  if (!accumulate) {
    c.fill(T(0));
  }
  const T* __restrict pa = a.data();
  const T* __restrict pb = b.data();
  T* __restrict pc = c.data();
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    T* __restrict c0 = pc + i * n;
    T* __restrict c1 = c0 + n;
    T* __restrict c2 = c1 + n;
    T* __restrict c3 = c2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const T a0 = pa[i * k + p];
      const T a1 = pa[(i + 1) * k + p];
      const T a2 = pa[(i + 2) * k + p];
      const T a3 = pa[(i + 3) * k + p];
      const T* __restrict brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T bv = brow[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    T* __restrict crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = pa[i * k + p];
      const T* __restrict brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
}

template <typename T>
Tensor<T> transposed(const Tensor<T>& a) {
  Tensor<T> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      out(j, i) = a(i, j);
    }
  }
  return out;
}

// c (+)= a * b^T
template <typename T>
void gemm_nt(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c, bool accumulate) {
  gemm_nn(a, transposed(b), c, accumulate);
}

// c (+)= a^T * b
template <typename T>
void gemm_tn(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c, bool accumulate) {
  gemm_nn(transposed(a), b, c, accumulate);
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  T* __restrict d = dst.data();
  const T* __restrict s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    d[i] += s[i];
  }
}

}  // namespace mtcap
