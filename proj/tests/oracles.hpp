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

// Independent reference implementations used only by the test suites. None
// of these call into the code paths they check.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <set>
#include <vector>

#include "adhoc_fusion/matrix.hpp"
#include "adhoc_fusion/rng.hpp"

namespace adhoc_fusion::testing {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, SplitMix64& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (auto& v : m.data()) v = rng.normal() * scale;
  return m;
}

inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  return out;
}

/// Euclidean projection onto the simplex by enumerating every support set:
/// on a fixed support S the minimizer is z_S - (sum(z_S) - 1) / |S|; the
/// answer is the feasible candidate closest to z.
inline std::vector<double> simplex_projection_bruteforce(const std::vector<double>& z) {
  const std::size_t k = z.size();
  std::vector<double> best;
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::uint32_t mask = 1; mask < (1u << k); ++mask) {
    double sum = 0.0;
    int count = 0;
    for (std::size_t i = 0; i < k; ++i)
      if (mask & (1u << i)) {
        sum += z[i];
        ++count;
      }
    const double shift = (sum - 1.0) / count;
    std::vector<double> p(k, 0.0);
    bool feasible = true;
    for (std::size_t i = 0; i < k; ++i)
      if (mask & (1u << i)) {
        p[i] = z[i] - shift;
        if (p[i] < -1e-12) feasible = false;
      }
    if (!feasible) continue;
    double dist = 0.0;
    for (std::size_t i = 0; i < k; ++i) dist += (p[i] - z[i]) * (p[i] - z[i]);
    if (dist < best_dist) {
      best_dist = dist;
      best = p;
    }
  }
  for (auto& v : best) v = std::max(v, 0.0);
  return best;
}

inline std::vector<double> softmax_reference(const std::vector<double>& z) {
  std::vector<double> out(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += std::exp(z[i]);
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = std::exp(z[i]) / s;
  return out;
}

/// Equal error rate by brute force: for each candidate threshold (every
/// distinct score, then +inf) count rejections and acceptances directly, and
/// interpolate linearly on the first segment where FRR overtakes FAR.
inline double eer_sweep_oracle(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  std::set<double> distinct(scores.begin(), scores.end());
  std::vector<double> thresholds(distinct.begin(), distinct.end());
  thresholds.push_back(std::numeric_limits<double>::infinity());
  double n_pos = 0, n_neg = 0;
  for (auto l : labels) (l ? n_pos : n_neg) += 1;
  std::vector<double> far, frr;
  for (double t : thresholds) {
    double fa = 0, fr = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const bool accept = scores[i] >= t;
      if (labels[i] && !accept) fr += 1;
      if (!labels[i] && accept) fa += 1;
    }
    far.push_back(fa / n_neg);
    frr.push_back(fr / n_pos);
  }
  for (std::size_t k = 0; k < thresholds.size(); ++k) {
    const double gap = far[k] - frr[k];
    if (gap > 0) continue;
    if (gap == 0 || k == 0) return far[k];
    const double prev = far[k - 1] - frr[k - 1];
    const double alpha = prev / (prev - gap);
    return far[k - 1] + alpha * (far[k] - far[k - 1]);
  }
  return far.back();
}

/// Central differences of f around x, entry by entry.
inline Matrix finite_difference(Matrix& x, const std::function<double()>& f, double step = 1e-5) {
  Matrix g(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double up = f();
    x[i] = orig - step;
    const double down = f();
    x[i] = orig;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

// Relative error with a floor so that near-zero entries are judged on an
// absolute 1e-10 scale.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline std::vector<std::size_t> random_permutation(std::size_t n, SplitMix64& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  shuffle(p.begin(), p.end(), rng);
  return p;
}

inline Matrix random_orthogonal(std::size_t n, SplitMix64& rng) {
  // Gram-Schmidt on a Gaussian matrix, row by row.
  Matrix q = random_matrix(n, n, rng);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < n; ++k) d += q(i, k) * q(j, k);
      for (std::size_t k = 0; k < n; ++k) q(i, k) -= d * q(j, k);
    }
    double nn = 0.0;
    for (std::size_t k = 0; k < n; ++k) nn += q(i, k) * q(i, k);
    nn = std::sqrt(nn);
    for (std::size_t k = 0; k < n; ++k) q(i, k) /= nn;
  }
  return q;
}

}  // namespace adhoc_fusion::testing
