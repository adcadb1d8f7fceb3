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

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "adhoc_fusion/errors.hpp"
#include "adhoc_fusion/matrix.hpp"
#include "adhoc_fusion/normalize.hpp"

namespace adhoc_fusion {

class GradTape;

/// Handle to a node on a GradTape. Cheap to copy; only valid while the tape
/// that produced it is alive and has not been cleared.
class Var {
 public:
  Var() = default;

  GradTape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  friend class GradTape;
  Var(GradTape* tape, std::size_t id) : tape_(tape), id_(id) {}

  GradTape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records primitive operations in evaluation order so their adjoints can be
/// replayed in reverse. Single-writer: one tape per worker.
class GradTape {
 public:
  // Receives the node's own value and its accumulated gradient, and pushes
  // contributions into its parents through accumulate().
  using Adjoint = std::function<void(GradTape&, const Matrix& value, const Matrix& grad)>;

  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  Var constant(Matrix value) { return push(std::move(value), false, {}); }
  Var parameter(Matrix value) { return push(std::move(value), true, {}); }

  /// Records a derived node. The node needs a gradient iff any parent does.
  Var record(Matrix value, std::initializer_list<Var> parents, Adjoint adjoint) {
    return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                  std::move(adjoint));
  }
  Var record(Matrix value, std::span<const Var> parents, Adjoint adjoint) {
    bool needs = false;
    for (const Var& p : parents) {
      check_owned(p);
      needs = needs || nodes_[p.id()].needs_grad;
    }
    return push(std::move(value), needs, needs ? std::move(adjoint) : Adjoint{});
  }

  const Matrix& value(Var v) const {
    check_owned(v);
    return nodes_[v.id()].value;
  }

  bool needs_grad(Var v) const {
    check_owned(v);
    return nodes_[v.id()].needs_grad;
  }

  /// Accumulated gradient; a zero matrix of the value's shape if none.
  Matrix grad(Var v) const {
    check_owned(v);
    const Node& n = nodes_[v.id()];
    return n.grad.empty() ? Matrix(n.value.rows(), n.value.cols()) : n.grad;
  }

  void accumulate(Var v, const Matrix& g) {
    check_owned(v);
    Node& n = nodes_[v.id()];
    if (!n.needs_grad) return;
    if (!g.same_shape(n.value)) {
      throw ContractViolation("accumulate: gradient " + g.shape_string() + " for value " +
                              n.value.shape_string());
    }
    if (n.grad.empty()) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Reverse sweep from a 1x1 loss.
  void backward(Var loss) {
    if (!loss.valid()) throw UsageError("backward: variable is not attached to a tape");
    const Matrix& v = value(loss);
    if (v.rows() != 1 || v.cols() != 1) {
      throw UsageError("backward: loss must be 1x1, got " + v.shape_string());
    }
    backward(loss, Matrix::scalar(1.0));
  }

  /// Reverse sweep seeded with an arbitrary upstream gradient for `out`.
  void backward(Var out, const Matrix& seed) {
    if (!out.valid()) throw UsageError("backward: variable is not attached to a tape");
    check_owned(out);
    accumulate(out, seed);
    for (std::size_t i = out.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.adjoint || n.grad.empty()) continue;
      n.adjoint(*this, n.value, n.grad);
    }
  }

  void zero_grad() {
    for (auto& n : nodes_) n.grad = Matrix();
  }

  // Invalidates every Var issued by this tape.
  void clear() { nodes_.clear(); }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Adjoint adjoint;
    bool needs_grad = false;
  };

  Var push(Matrix value, bool needs_grad, Adjoint adjoint) {
    if (!value.all_finite()) throw NumericError("GradTape: non-finite value recorded");
    nodes_.push_back(Node{std::move(value), Matrix(), std::move(adjoint), needs_grad});
    return Var(this, nodes_.size() - 1);
  }

  void check_owned(Var v) const {
    if (v.tape() != this) throw UsageError("GradTape: variable belongs to another tape");
    if (v.id() >= nodes_.size()) throw UsageError("GradTape: stale variable (tape cleared?)");
  }

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const {
  if (!tape_) throw UsageError("Var: not attached to a tape");
  return tape_->value(*this);
}

namespace detail {
inline GradTape& common_tape(Var a, Var b) {
  if (!a.valid() || a.tape() != b.tape()) throw UsageError("operands live on different tapes");
  return *a.tape();
}
}  // namespace detail

// Differentiable counterparts of the Matrix operations. Each records one node.

inline Var matmul(Var a, Var b) {
  GradTape& t = detail::common_tape(a, b);
  return t.record(matmul(a.value(), b.value()), {a, b}, [a, b](GradTape& t, const Matrix&, const Matrix& g) {
    if (t.needs_grad(a)) t.accumulate(a, matmul_nt(g, t.value(b)));
    if (t.needs_grad(b)) t.accumulate(b, matmul_tn(t.value(a), g));
  });
}

// a * b^T
inline Var matmul_nt(Var a, Var b) {
  GradTape& t = detail::common_tape(a, b);
  return t.record(matmul_nt(a.value(), b.value()), {a, b}, [a, b](GradTape& t, const Matrix&, const Matrix& g) {
    if (t.needs_grad(a)) t.accumulate(a, matmul(g, t.value(b)));
    if (t.needs_grad(b)) t.accumulate(b, matmul_tn(g, t.value(a)));
  });
}

inline Var add(Var a, Var b) {
  GradTape& t = detail::common_tape(a, b);
  return t.record(a.value() + b.value(), {a, b}, [a, b](GradTape& t, const Matrix&, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var add_row(Var x, Var bias) {
  GradTape& t = detail::common_tape(x, bias);
  return t.record(add_row(x.value(), bias.value()), {x, bias},
                  [x, bias](GradTape& t, const Matrix&, const Matrix& g) {
                    t.accumulate(x, g);
                    if (t.needs_grad(bias)) {
                      Matrix gb(1, g.cols());
                      for (std::size_t i = 0; i < g.rows(); ++i)
                        for (std::size_t j = 0; j < g.cols(); ++j) gb[j] += g(i, j);
                      t.accumulate(bias, gb);
                    }
                  });
}

inline Var scale(Var x, double s) {
  return x.tape()->record(x.value() * s, {x},
                          [x, s](GradTape& t, const Matrix&, const Matrix& g) { t.accumulate(x, g * s); });
}

inline Var transpose(Var x) {
  return x.tape()->record(transpose(x.value()), {x}, [x](GradTape& t, const Matrix&, const Matrix& g) {
    t.accumulate(x, transpose(g));
  });
}

// Subgradient at exactly zero is zero.
inline Var relu(Var x) {
  return x.tape()->record(relu(x.value()), {x}, [x](GradTape& t, const Matrix&, const Matrix& g) {
    const Matrix& in = t.value(x);
    Matrix gx = g;
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (!(in[i] > 0.0)) gx[i] = 0.0;
    t.accumulate(x, gx);
  });
}

inline Var mean_rows(Var x) {
  return x.tape()->record(mean_rows(x.value()), {x}, [x](GradTape& t, const Matrix&, const Matrix& g) {
    const std::size_t rows = t.value(x).rows();
    Matrix gx(rows, g.cols());
    const double w = 1.0 / static_cast<double>(rows);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) gx(i, j) = g[j] * w;
    t.accumulate(x, gx);
  });
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape()->record(Matrix::scalar(s), {x}, [x](GradTape& t, const Matrix&, const Matrix& g) {
    const Matrix& in = t.value(x);
    t.accumulate(x, Matrix(in.rows(), in.cols(), g[0]));
  });
}

inline Var row_normalize(Var scores, NormMode mode) {
  return scores.tape()->record(row_normalize(scores.value(), mode), {scores},
                               [scores, mode](GradTape& t, const Matrix& p, const Matrix& g) {
                                 t.accumulate(scores, row_normalize_vjp(p, g, mode));
                               });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractViolation("concat_cols: no inputs");
  std::vector<Matrix> values;
  values.reserve(parts.size());
  for (const Var& p : parts) {
    detail::common_tape(parts.front(), p);
    values.push_back(p.value());
  }
  std::vector<Var> captured(parts.begin(), parts.end());
  return parts.front().tape()->record(
      concat_cols(values), parts, [captured](GradTape& t, const Matrix&, const Matrix& g) {
        std::size_t offset = 0;
        for (const Var& p : captured) {
          const std::size_t w = t.value(p).cols();
          if (t.needs_grad(p)) {
            Matrix gp(g.rows(), w);
            for (std::size_t i = 0; i < g.rows(); ++i)
              for (std::size_t j = 0; j < w; ++j) gp(i, j) = g(i, offset + j);
            t.accumulate(p, gp);
          }
          offset += w;
        }
      });
}

// Stacks 1 x n row vectors into an N x n matrix.
inline Var stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw ContractViolation("stack_rows: no inputs");
  const std::size_t n = rows.front().cols();
  Matrix out(rows.size(), n);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    detail::common_tape(rows.front(), rows[i]);
    const Matrix& r = rows[i].value();
    if (r.rows() != 1 || r.cols() != n) throw ContractViolation("stack_rows: expects 1 x n rows");
    std::copy(r.data().begin(), r.data().end(), out.row_span(i).begin());
  }
  std::vector<Var> captured(rows.begin(), rows.end());
  return rows.front().tape()->record(
      std::move(out), rows, [captured](GradTape& t, const Matrix&, const Matrix& g) {
        for (std::size_t i = 0; i < captured.size(); ++i) {
          if (!t.needs_grad(captured[i])) continue;
          Matrix gi(1, g.cols());
          std::copy(g.row_span(i).begin(), g.row_span(i).end(), gi.data().begin());
          t.accumulate(captured[i], gi);
        }
      });
}

// Scales each row to unit Euclidean norm. Zero rows raise NumericError.
inline Var l2_normalize_rows(Var x) {
  const Matrix& in = x.value();
  Matrix out = in;
  Matrix norms(in.rows(), 1);
  for (std::size_t i = 0; i < in.rows(); ++i) {
    const double n = norm(in.row_span(i));
    if (!(n > 0.0)) throw NumericError("l2_normalize_rows: zero-norm embedding");
    norms[i] = n;
    for (auto& v : out.row_span(i)) v /= n;
  }
  return x.tape()->record(std::move(out), {x},
                          [x, norms](GradTape& t, const Matrix& y, const Matrix& g) {
                            Matrix gx(y.rows(), y.cols());
                            for (std::size_t i = 0; i < y.rows(); ++i) {
                              const double proj = dot(y.row_span(i), g.row_span(i));
                              for (std::size_t j = 0; j < y.cols(); ++j)
                                gx(i, j) = (g(i, j) - proj * y(i, j)) / norms[i];
                            }
                            t.accumulate(x, gx);
                          });
}

// x * s for a 1x1 variable s.
inline Var mul_scalar(Var x, Var s) {
  GradTape& tape = detail::common_tape(x, s);
  if (s.value().size() != 1) throw ContractViolation("mul_scalar: scale must be 1x1");
  return tape.record(x.value() * s.value()[0], {x, s},
                     [x, s](GradTape& t, const Matrix&, const Matrix& g) {
                       if (t.needs_grad(x)) t.accumulate(x, g * t.value(s)[0]);
                       if (t.needs_grad(s)) {
                         double acc = 0.0;
                         const Matrix& xv = t.value(x);
                         for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
                         t.accumulate(s, Matrix::scalar(acc));
                       }
                     });
}

// x + s for a 1x1 variable s.
inline Var add_scalar(Var x, Var s) {
  GradTape& tape = detail::common_tape(x, s);
  if (s.value().size() != 1) throw ContractViolation("add_scalar: offset must be 1x1");
  Matrix out = x.value();
  for (auto& v : out.data()) v += s.value()[0];
  return tape.record(std::move(out), {x, s}, [x, s](GradTape& t, const Matrix&, const Matrix& g) {
    t.accumulate(x, g);
    if (t.needs_grad(s)) {
      double acc = 0.0;
      for (double v : g.data()) acc += v;
      t.accumulate(s, Matrix::scalar(acc));
    }
  });
}

/// Mean softmax cross-entropy of a square logit matrix whose target for row j
/// is column j.
inline Var diagonal_cross_entropy(Var logits) {
  const Matrix& s = logits.value();
  if (s.rows() != s.cols() || s.rows() == 0) {
    throw ContractViolation("diagonal_cross_entropy: expects a non-empty square matrix");
  }
  const std::size_t n = s.rows();
  Matrix probs(n, n);
  double loss = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const auto row = s.row_span(j);
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - m);
    const double log_z = m + std::log(z);
    loss += log_z - row[j];
    for (std::size_t k = 0; k < n; ++k) probs(j, k) = std::exp(row[k] - log_z);
  }
  loss /= static_cast<double>(n);
  return logits.tape()->record(Matrix::scalar(loss), {logits},
                               [logits, probs](GradTape& t, const Matrix&, const Matrix& g) {
                                 const std::size_t n = probs.rows();
                                 Matrix gl = probs;
                                 for (std::size_t j = 0; j < n; ++j) gl(j, j) -= 1.0;
                                 gl *= g[0] / static_cast<double>(n);
                                 t.accumulate(logits, gl);
                               });
}

}  // namespace adhoc_fusion
