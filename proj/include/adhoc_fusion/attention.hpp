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
#include <string>
#include <string_view>
#include <vector>

#include "adhoc_fusion/errors.hpp"
#include "adhoc_fusion/matrix.hpp"
#include "adhoc_fusion/normalize.hpp"
#include "adhoc_fusion/tape.hpp"

namespace adhoc_fusion {

// Which axis of the C x C score matrix forms one simplex.
enum class NormAxis {
  kQueryRows,   // each query row is normalized over keys
  kKeyColumns,  // each key column is normalized over queries
};

inline std::string_view to_string(NormAxis a) {
  return a == NormAxis::kQueryRows ? "query-rows" : "key-columns";
}

inline NormAxis parse_norm_axis(std::string_view s) {
  if (s == "query-rows") return NormAxis::kQueryRows;
  if (s == "key-columns") return NormAxis::kKeyColumns;
  throw ConfigError("unknown normalization axis '" + std::string(s) +
                    "' (expected query-rows|key-columns)");
}

struct AttentionOptions {
  NormMode mode = NormMode::kSoftmax;
  NormAxis axis = NormAxis::kQueryRows;
};

// Projection weights of one head, each (input width) x d_k.
template <class T>
struct HeadParamsT {
  T w_q;
  T w_k;
  T w_v;
};

/// One cross-channel block: h heads, the E x E output projection and the
/// position-wise FFN (E -> F -> E). Biases are 1 x n rows.
template <class T>
struct LayerParamsT {
  std::vector<HeadParamsT<T>> heads;
  T w_o;
  T ffn_w1;
  T ffn_b1;
  T ffn_w2;
  T ffn_b2;
};

using HeadParams = HeadParamsT<Matrix>;
using LayerParams = LayerParamsT<Matrix>;

/// Calls f(name, tensor) for every tensor of the layer in canonical order.
/// Works for const and mutable layers of any element type.
template <class Layer, class F>
void visit_layer(Layer& layer, const std::string& prefix, F&& f) {
  for (std::size_t i = 0; i < layer.heads.size(); ++i) {
    const std::string head = prefix + "heads." + std::to_string(i) + ".";
    f(head + "w_q", layer.heads[i].w_q);
    f(head + "w_k", layer.heads[i].w_k);
    f(head + "w_v", layer.heads[i].w_v);
  }
  f(prefix + "w_o", layer.w_o);
  f(prefix + "ffn_w1", layer.ffn_w1);
  f(prefix + "ffn_b1", layer.ffn_b1);
  f(prefix + "ffn_w2", layer.ffn_w2);
  f(prefix + "ffn_b2", layer.ffn_b2);
}

inline HeadParamsT<Var> bind(GradTape& tape, const HeadParams& p, bool trainable) {
  auto leaf = [&](const Matrix& m) { return trainable ? tape.parameter(m) : tape.constant(m); };
  return {leaf(p.w_q), leaf(p.w_k), leaf(p.w_v)};
}

inline LayerParamsT<Var> bind(GradTape& tape, const LayerParams& p, bool trainable) {
  auto leaf = [&](const Matrix& m) { return trainable ? tape.parameter(m) : tape.constant(m); };
  LayerParamsT<Var> out;
  out.heads.reserve(p.heads.size());
  for (const auto& h : p.heads) out.heads.push_back(bind(tape, h, trainable));
  out.w_o = leaf(p.w_o);
  out.ffn_w1 = leaf(p.ffn_w1);
  out.ffn_b1 = leaf(p.ffn_b1);
  out.ffn_w2 = leaf(p.ffn_w2);
  out.ffn_b2 = leaf(p.ffn_b2);
  return out;
}

/// Raw (pre-normalization) score matrices, one C x C per head, carried from
/// one layer to the next as additive residual scores.
struct AttentionState {
  std::vector<Matrix> scores;

  static AttentionState zeros(std::size_t heads, std::size_t channels) {
    return {std::vector<Matrix>(heads, Matrix(channels, channels))};
  }
  std::size_t heads() const { return scores.size(); }
  std::size_t channels() const { return scores.empty() ? 0 : scores.front().rows(); }
};

// ---------------------------------------------------------------------------
// Tape-level operations.

struct HeadResult {
  Var out;      // C x d_k
  Var scores;   // C x C, raw, handed to the next layer
  Var weights;  // C x C, normalized attention
};

inline HeadResult attention_head(Var x, Var prev, const HeadParamsT<Var>& p,
                                 const AttentionOptions& opt) {
  const std::size_t channels = x.rows();
  if (x.cols() != p.w_q.rows() || x.cols() != p.w_k.rows() || x.cols() != p.w_v.rows()) {
    throw ContractViolation("attention_head: input width " + std::to_string(x.cols()) +
                            " does not match projection " + p.w_q.value().shape_string());
  }
  if (prev.rows() != channels || prev.cols() != channels) {
    throw ContractViolation("attention_head: residual scores " + prev.value().shape_string() +
                            " for " + std::to_string(channels) + " channels");
  }
  if (p.w_q.cols() != p.w_k.cols()) {
    throw ContractViolation("attention_head: query and key widths differ");
  }
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(p.w_k.cols()));
  Var q = matmul(x, p.w_q);
  Var k = matmul(x, p.w_k);
  Var v = matmul(x, p.w_v);
  Var scores = add(scale(matmul_nt(q, k), inv_sqrt_dk), prev);
  Var weights = opt.axis == NormAxis::kQueryRows
                    ? row_normalize(scores, opt.mode)
                    : transpose(row_normalize(transpose(scores), opt.mode));
  return {matmul(weights, v), scores, weights};
}

struct MultiHeadResult {
  Var z;  // C x E
  std::vector<Var> scores;
  std::vector<Var> weights;
};

inline MultiHeadResult multi_head(Var x, std::span<const Var> prev, const LayerParamsT<Var>& p,
                                  const AttentionOptions& opt) {
  if (prev.size() != p.heads.size()) {
    throw ContractViolation("multi_head: state has " + std::to_string(prev.size()) +
                            " heads, layer has " + std::to_string(p.heads.size()));
  }
  if (p.heads.empty()) throw ContractViolation("multi_head: layer has no heads");
  MultiHeadResult r;
  std::vector<Var> outs;
  for (std::size_t i = 0; i < p.heads.size(); ++i) {
    HeadResult h = attention_head(x, prev[i], p.heads[i], opt);
    outs.push_back(h.out);
    r.scores.push_back(h.scores);
    r.weights.push_back(h.weights);
  }
  r.z = matmul(outs.size() == 1 ? outs.front() : concat_cols(outs), p.w_o);
  return r;
}

struct LayerResult {
  Var y;  // C x E
  std::vector<Var> scores;
  std::vector<Var> weights;
};

/// Attention and FFN sub-blocks, each wrapped in a residual connection:
///   a = x + MultiHead(x), y = a + W2 relu(W1 a + b1) + b2.
inline LayerResult inter_channel_layer(Var x, std::span<const Var> prev,
                                       const LayerParamsT<Var>& p, const AttentionOptions& opt) {
  if (x.cols() != p.w_o.cols()) {
    throw ContractViolation("inter_channel_layer: input width " + std::to_string(x.cols()) +
                            " does not match layer width " + std::to_string(p.w_o.cols()));
  }
  MultiHeadResult mh = multi_head(x, prev, p, opt);
  Var a = add(x, mh.z);
  Var hidden = relu(add_row(matmul(a, p.ffn_w1), p.ffn_b1));
  Var y = add(a, add_row(matmul(hidden, p.ffn_w2), p.ffn_b2));
  return {y, std::move(mh.scores), std::move(mh.weights)};
}

struct FusionResult {
  Var fused;  // 1 x E
  std::vector<Var> weights;
};

/// Residual self-attention block followed by mean pooling over channels, so
/// the output width never depends on the channel count.
inline FusionResult global_fusion(Var x, std::span<const Var> prev, const LayerParamsT<Var>& p,
                                  const AttentionOptions& opt) {
  if (x.rows() == 0) throw ContractViolation("global_fusion: zero channels");
  LayerResult layer = inter_channel_layer(x, prev, p, opt);
  return {mean_rows(layer.y), std::move(layer.weights)};
}

// ---------------------------------------------------------------------------
// Value-level wrappers for inference and tests. Each runs on a private tape.

namespace detail {
inline std::vector<Var> bind_state(GradTape& tape, const AttentionState& s) {
  std::vector<Var> out;
  out.reserve(s.scores.size());
  for (const auto& m : s.scores) out.push_back(tape.constant(m));
  return out;
}
inline std::vector<Matrix> values(std::span<const Var> vars) {
  std::vector<Matrix> out;
  out.reserve(vars.size());
  for (const Var& v : vars) out.push_back(v.value());
  return out;
}
}  // namespace detail

struct HeadOutput {
  Matrix out;
  Matrix scores;
  Matrix weights;
};

inline HeadOutput attention_head(const Matrix& x, const Matrix& prev, const HeadParams& p,
                                 const AttentionOptions& opt) {
  GradTape tape;
  HeadResult r = attention_head(tape.constant(x), tape.constant(prev), bind(tape, p, false), opt);
  return {r.out.value(), r.scores.value(), r.weights.value()};
}

struct LayerOutput {
  Matrix y;
  AttentionState state;
  std::vector<Matrix> weights;
};

// y holds z = Concat(H) W_O.
inline LayerOutput multi_head(const Matrix& x, const AttentionState& state, const LayerParams& p,
                              const AttentionOptions& opt) {
  GradTape tape;
  MultiHeadResult r =
      multi_head(tape.constant(x), detail::bind_state(tape, state), bind(tape, p, false), opt);
  return {r.z.value(), {detail::values(r.scores)}, detail::values(r.weights)};
}

inline LayerOutput inter_channel_layer(const Matrix& x, const AttentionState& state,
                                       const LayerParams& p, const AttentionOptions& opt) {
  GradTape tape;
  LayerResult r = inter_channel_layer(tape.constant(x), detail::bind_state(tape, state),
                                      bind(tape, p, false), opt);
  return {r.y.value(), {detail::values(r.scores)}, detail::values(r.weights)};
}

inline Matrix global_fusion(const Matrix& x, const AttentionState& state, const LayerParams& p,
                            const AttentionOptions& opt) {
  GradTape tape;
  return global_fusion(tape.constant(x), detail::bind_state(tape, state), bind(tape, p, false),
                       opt)
      .fused.value();
}

}  // namespace adhoc_fusion
