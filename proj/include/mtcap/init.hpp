// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>

#include "mtcap/rng.hpp"
#include "mtcap/tensor.hpp"

namespace mtcap {

// Uniform in +-sqrt(6 / (fan_in + fan_out)).
template <typename T>
Tensor<T> xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<T> w(fan_in, fan_out);
  for (auto& v : w.values()) {
    v = static_cast<T>(rng.uniform(-limit, limit));
  }
  return w;
}

template <typename T>
Tensor<T> normal_init(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Tensor<T> w(rows, cols);
  for (auto& v : w.values()) {
    v = static_cast<T>(rng.normal(0.0, stddev));
  }
  return w;
}

}  // namespace mtcap
