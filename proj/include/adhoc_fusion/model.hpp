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
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adhoc_fusion/attention.hpp"
#include "adhoc_fusion/errors.hpp"
#include "adhoc_fusion/matrix.hpp"
#include "adhoc_fusion/rng.hpp"
#include "adhoc_fusion/tape.hpp"

namespace adhoc_fusion {

/// Hyperparameters of the fusion head. Defaults mirror the reference setup:
/// 512-dim front-end embeddings, four stacked layers of width 256 with four
/// heads each.
struct ModelConfig {
  std::size_t d_in = 512;
  std::size_t width = 256;  // E
  std::size_t heads = 4;
  std::size_t layers = 4;
  std::size_t ffn_hidden = 512;  // F
  NormMode mode = NormMode::kSoftmax;
  bool fusion_uses_prev = true;
  NormAxis norm_axis = NormAxis::kQueryRows;
  double init_loss_scale = 10.0;
  double init_loss_bias = -5.0;
  // Multiplies the initial W_O and second FFN matrix; values below 1 start
  // every block closer to its identity residual path.
  double residual_init_gain = 1.0;

  std::size_t head_dim() const { return width / heads; }
  AttentionOptions attention() const { return {mode, norm_axis}; }

  void validate() const {
    if (d_in == 0 || width == 0 || heads == 0 || ffn_hidden == 0) {
      throw ConfigError("model: all dimensions must be >= 1");
    }
    if (layers == 0) throw ConfigError("model: at least one inter-channel layer is required");
    if (width % heads != 0) {
      throw ConfigError("model: width " + std::to_string(width) + " is not divisible by " +
                        std::to_string(heads) + " heads");
    }
    if (!(init_loss_scale > 0.0)) throw ConfigError("model: init_loss_scale must be positive");
    if (!std::isfinite(init_loss_bias) || !std::isfinite(residual_init_gain)) {
      throw ConfigError("model: init values must be finite");
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"d_in", c.d_in},
          {"width", c.width},
          {"heads", c.heads},
          {"layers", c.layers},
          {"ffn_hidden", c.ffn_hidden},
          {"mode", std::string(to_string(c.mode))},
          {"fusion_uses_prev", c.fusion_uses_prev},
          {"norm_axis", std::string(to_string(c.norm_axis))},
          {"init_loss_scale", c.init_loss_scale},
          {"init_loss_bias", c.init_loss_bias},
          {"residual_init_gain", c.residual_init_gain}};
}

/// Reads keys present in j over the values already in c. Unknown keys are
/// rejected.
inline void update_from_json(ModelConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model: expected a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "d_in") c.d_in = v.get<std::size_t>();
      else if (key == "width") c.width = v.get<std::size_t>();
      else if (key == "heads") c.heads = v.get<std::size_t>();
      else if (key == "layers") c.layers = v.get<std::size_t>();
      else if (key == "ffn_hidden") c.ffn_hidden = v.get<std::size_t>();
      else if (key == "mode") c.mode = parse_norm_mode(v.get<std::string>());
      else if (key == "fusion_uses_prev") c.fusion_uses_prev = v.get<bool>();
      else if (key == "norm_axis") c.norm_axis = parse_norm_axis(v.get<std::string>());
      else if (key == "init_loss_scale") c.init_loss_scale = v.get<double>();
      else if (key == "init_loss_bias") c.init_loss_bias = v.get<double>();
      else if (key == "residual_init_gain") c.residual_init_gain = v.get<double>();
      else throw ConfigError("model: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("model: bad value for '" + key + "': " + e.what());
    }
  }
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  update_from_json(c, j);
  c.validate();
  return c;
}

/// Every trainable tensor of the fusion head. T is Matrix for stored
/// parameters and gradients, Var when bound to a tape.
template <class T>
struct FusionParamsT {
  T adapter;  // d_in x E
  std::vector<LayerParamsT<T>> layers;
  LayerParamsT<T> fusion;
  T loss_scale;  // 1 x 1, w of the angular prototypical loss
  T loss_bias;   // 1 x 1, b of the angular prototypical loss
};

using FusionParams = FusionParamsT<Matrix>;

template <class Params, class F>
void visit_parameters(Params& p, F&& f) {
  f(std::string("adapter"), p.adapter);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    visit_layer(p.layers[i], "layers." + std::to_string(i) + ".", f);
  }
  visit_layer(p.fusion, "fusion.", f);
  f(std::string("loss_scale"), p.loss_scale);
  f(std::string("loss_bias"), p.loss_bias);
}

struct FusionModel {
  ModelConfig config;
  FusionParams params;

  double loss_scale() const { return params.loss_scale[0]; }
  double loss_bias() const { return params.loss_bias[0]; }
};

// Zero-filled parameters with the shapes implied by config.
inline FusionParams zero_params(const ModelConfig& c) {
  c.validate();
  auto layer = [&] {
    LayerParams l;
    for (std::size_t h = 0; h < c.heads; ++h) {
      l.heads.push_back({Matrix(c.width, c.head_dim()), Matrix(c.width, c.head_dim()),
                         Matrix(c.width, c.head_dim())});
    }
    l.w_o = Matrix(c.width, c.width);
    l.ffn_w1 = Matrix(c.width, c.ffn_hidden);
    l.ffn_b1 = Matrix(1, c.ffn_hidden);
    l.ffn_w2 = Matrix(c.ffn_hidden, c.width);
    l.ffn_b2 = Matrix(1, c.width);
    return l;
  };
  FusionParams p;
  p.adapter = Matrix(c.d_in, c.width);
  for (std::size_t i = 0; i < c.layers; ++i) p.layers.push_back(layer());
  p.fusion = layer();
  p.loss_scale = Matrix::scalar(0.0);
  p.loss_bias = Matrix::scalar(0.0);
  return p;
}

inline std::size_t parameter_count(const FusionParams& p) {
  std::size_t n = 0;
  visit_parameters(p, [&](const std::string&, const Matrix& m) { n += m.size(); });
  return n;
}

inline std::size_t parameter_count(const ModelConfig& c) { return parameter_count(zero_params(c)); }

inline bool is_bias(const std::string& name) {
  return name.ends_with("_b1") || name.ends_with("_b2");
}

/// Glorot-uniform weights, zero biases, loss affine set from the config.
/// Fully determined by (config, seed).
inline FusionModel init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  FusionModel m{config, zero_params(config)};
  SplitMix64 rng(derive_seed(seed, 0x1A17));
  visit_parameters(m.params, [&](const std::string& name, Matrix& w) {
    if (name == "loss_scale") {
      w[0] = config.init_loss_scale;
    } else if (name == "loss_bias") {
      w[0] = config.init_loss_bias;
    } else if (!is_bias(name)) {
      double bound = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
      if (name.ends_with("w_o") || name.ends_with("ffn_w2")) bound *= config.residual_init_gain;
      for (auto& v : w.data()) v = rng.uniform(-bound, bound);
    }
  });
  return m;
}

inline FusionParamsT<Var> bind(GradTape& tape, const FusionParams& p, bool trainable) {
  auto leaf = [&](const Matrix& m) { return trainable ? tape.parameter(m) : tape.constant(m); };
  FusionParamsT<Var> out;
  out.adapter = leaf(p.adapter);
  for (const auto& l : p.layers) out.layers.push_back(bind(tape, l, trainable));
  out.fusion = bind(tape, p.fusion, trainable);
  out.loss_scale = leaf(p.loss_scale);
  out.loss_bias = leaf(p.loss_bias);
  return out;
}

// Collects the gradients of bound parameters into a Matrix tree.
inline FusionParams gradients(const GradTape& tape, const FusionParamsT<Var>& bound) {
  std::vector<Matrix> flat;
  visit_parameters(bound, [&](const std::string&, const Var& v) { flat.push_back(tape.grad(v)); });
  FusionParams out;
  out.layers.resize(bound.layers.size());
  for (std::size_t i = 0; i < bound.layers.size(); ++i) {
    out.layers[i].heads.resize(bound.layers[i].heads.size());
  }
  out.fusion.heads.resize(bound.fusion.heads.size());
  std::size_t k = 0;
  visit_parameters(out, [&](const std::string&, Matrix& m) { m = std::move(flat[k++]); });
  return out;
}

struct EmbeddingResult {
  Var embedding;  // 1 x E
  // Normalized attention per block (L inter-channel layers, then the fusion
  // block), per head.
  std::vector<std::vector<Var>> weights;
};

/// adapter -> L inter-channel layers threading raw scores -> global fusion.
inline EmbeddingResult forward(const ModelConfig& config, const FusionParamsT<Var>& p, Var x) {
  if (x.rows() == 0) throw ContractViolation("forward: zero channels");
  if (x.cols() != config.d_in) {
    throw ContractViolation("forward: expected " + std::to_string(config.d_in) +
                            "-dim channel embeddings, got " + std::to_string(x.cols()));
  }
  GradTape& tape = *x.tape();
  const std::size_t channels = x.rows();
  const AttentionOptions opt = config.attention();
  EmbeddingResult r;
  Var h = matmul(x, p.adapter);
  const Var zero = tape.constant(Matrix(channels, channels));
  std::vector<Var> state(config.heads, zero);
  for (const auto& layer : p.layers) {
    LayerResult out = inter_channel_layer(h, state, layer, opt);
    h = out.y;
    state = std::move(out.scores);
    r.weights.push_back(std::move(out.weights));
  }
  if (!config.fusion_uses_prev) state.assign(config.heads, zero);
  FusionResult fused = global_fusion(h, state, p.fusion, opt);
  r.embedding = fused.fused;
  r.weights.push_back(std::move(fused.weights));
  return r;
}

struct ForwardTrace {
  Matrix embedding;
  std::vector<std::vector<Matrix>> weights;  // [block][head], fusion block last
};

inline ForwardTrace forward_trace(const FusionModel& m, const Matrix& x) {
  GradTape tape;
  EmbeddingResult r = forward(m.config, bind(tape, m.params, false), tape.constant(x));
  ForwardTrace t{r.embedding.value(), {}};
  for (const auto& block : r.weights) t.weights.push_back(detail::values(block));
  return t;
}

inline Matrix forward(const FusionModel& m, const Matrix& x) {
  GradTape tape;
  return forward(m.config, bind(tape, m.params, false), tape.constant(x)).embedding.value();
}

}  // namespace adhoc_fusion
