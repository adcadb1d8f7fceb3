// Copyright 2026 The adhoc-fusion Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string_view>
#include <vector>

#include "adhoc_fusion/errors.hpp"
#include "adhoc_fusion/matrix.hpp"

namespace adhoc_fusion {

enum class NormMode { kSoftmax, kSparsemax };

inline std::string_view to_string(NormMode m) {
  return m == NormMode::kSoftmax ? "softmax" : "sparsemax";
}

inline NormMode parse_norm_mode(std::string_view s) {
  if (s == "softmax") return NormMode::kSoftmax;
  if (s == "sparsemax") return NormMode::kSparsemax;
  throw ConfigError("unknown normalization mode '" + std::string(s) +
                    "' (expected softmax|sparsemax)");
}

/// Softmax of z written to out. Entries are floored at the smallest positive
/// double so that finite scores never produce an exact zero, even when exp()
/// underflows; the floor perturbs the row sum by at most K * 5e-324.
inline void softmax(std::span<const double> z, std::span<double> out) {
  const double zmax = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = std::exp(z[i] - zmax);
    sum += out[i];
  }
  constexpr double kFloor = std::numeric_limits<double>::denorm_min();
  for (auto& v : out) v = std::max(v / sum, kFloor);
}

/// Soft threshold tau(z) of the sparsemax closed form together with the
/// support size k(z).
struct SparsemaxThreshold {
  double tau;
  std::size_t support;
};

inline SparsemaxThreshold sparsemax_threshold(std::span<const double> z) {
  std::vector<double> sorted(z.begin(), z.end());
  // Stable descending order; ties keep input order.
  std::stable_sort(sorted.begin(), sorted.end(), std::greater<>());
  double cumsum = 0.0;
  double support_sum = 0.0;
  std::size_t k = 0;
  for (std::size_t j = 0; j < sorted.size(); ++j) {
    cumsum += sorted[j];
    if (1.0 + static_cast<double>(j + 1) * sorted[j] > cumsum) {
      k = j + 1;
      support_sum = cumsum;
    }
  }
  return {(support_sum - 1.0) / static_cast<double>(k), k};
}

/// Euclidean projection of z onto the probability simplex.
inline void sparsemax(std::span<const double> z, std::span<double> out) {
  const auto [tau, k] = sparsemax_threshold(z);
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = std::max(z[i] - tau, 0.0);
  // z - (z - 1) need not round to exactly 1.
  if (k == 1)
    for (auto& v : out) v = v > 0.0 ? 1.0 : 0.0;
}

inline std::vector<double> sparsemax(std::span<const double> z) {
  std::vector<double> out(z.size());
  sparsemax(z, out);
  return out;
}

inline std::vector<double> softmax(std::span<const double> z) {
  std::vector<double> out(z.size());
  softmax(z, out);
  return out;
}

// Vector-Jacobian products given the forward output p and upstream g.
inline void softmax_vjp(std::span<const double> p, std::span<const double> g,
                        std::span<double> out) {
  double inner = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) inner += p[i] * g[i];
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = p[i] * (g[i] - inner);
}

// Support is taken from the forward output (p_i > 0).
inline void sparsemax_vjp(std::span<const double> p, std::span<const double> g,
                          std::span<double> out) {
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) {
      sum += g[i];
      ++count;
    }
  }
  const double mean = count ? sum / static_cast<double>(count) : 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = p[i] > 0.0 ? g[i] - mean : 0.0;
}

/// Normalizes each row of scores onto the probability simplex.
inline Matrix row_normalize(const Matrix& scores, NormMode mode) {
  require_finite(scores, "row_normalize");
  Matrix out(scores.rows(), scores.cols());
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    if (mode == NormMode::kSoftmax) {
      softmax(scores.row_span(r), out.row_span(r));
    } else {
      sparsemax(scores.row_span(r), out.row_span(r));
    }
  }
  return out;
}

inline Matrix row_normalize_vjp(const Matrix& probs, const Matrix& grad, NormMode mode) {
  Matrix out(probs.rows(), probs.cols());
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    if (mode == NormMode::kSoftmax) {
      softmax_vjp(probs.row_span(r), grad.row_span(r), out.row_span(r));
    } else {
      sparsemax_vjp(probs.row_span(r), grad.row_span(r), out.row_span(r));
    }
  }
  return out;
}

}  // namespace adhoc_fusion
