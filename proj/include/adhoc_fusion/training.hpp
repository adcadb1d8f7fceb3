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

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adhoc_fusion/checkpoint.hpp"
#include "adhoc_fusion/errors.hpp"
#include "adhoc_fusion/log.hpp"
#include "adhoc_fusion/model.hpp"
#include "adhoc_fusion/parallel.hpp"
#include "adhoc_fusion/rng.hpp"
#include "adhoc_fusion/simulator.hpp"
#include "adhoc_fusion/tape.hpp"

namespace adhoc_fusion {

// ---------------------------------------------------------------------------
// Angular prototypical loss.

/// S(j, k) = w * cos(q_j, c_k) + b; loss = mean_j CE(S(j, :), j).
/// Queries and prototypes are 1 x E rows; w and b are 1 x 1.
inline Var angular_prototypical_loss(std::span<const Var> queries, std::span<const Var> prototypes,
                                     Var w, Var b) {
  if (queries.size() != prototypes.size() || queries.size() < 2) {
    throw ContractViolation("angular_prototypical_loss: need N >= 2 matched queries/prototypes");
  }
  Var q = l2_normalize_rows(stack_rows(queries));
  Var c = l2_normalize_rows(stack_rows(prototypes));
  Var logits = add_scalar(mul_scalar(matmul_nt(q, c), w), b);
  return diagonal_cross_entropy(logits);
}

/// Speaker groups of one batch; each group lists M utterance indices, the
/// last acting as query and the rest forming the prototype.
struct TrainBatch {
  struct Group {
    std::uint32_t speaker;
    std::vector<std::size_t> utterances;
  };
  std::vector<Group> groups;
  // Crop used for every utterance, parallel to groups[j].utterances.
  std::vector<std::vector<std::size_t>> crops;
};

struct SamplingOptions {
  std::size_t batch_speakers = 32;           // N
  std::size_t utterances_per_group = 2;      // M
  std::size_t max_utterances_per_speaker = 100;
};

struct EpochSample {
  std::vector<TrainBatch> batches;
  std::vector<std::uint32_t> skipped_speakers;
  std::map<std::uint32_t, std::size_t> sampled_per_speaker;
};

/// Draws at most max_utterances_per_speaker utterances from each speaker,
/// cuts them into groups of M, shuffles the groups and packs them greedily
/// into batches of N distinct speakers. Deterministic in seed.
template <EmbeddingSource Source>
EpochSample sample_epoch(const Source& data, const SamplingOptions& opt, std::uint64_t seed) {
  if (opt.utterances_per_group < 2 || opt.batch_speakers < 2) {
    throw ConfigError("sampling: need M >= 2 and N >= 2");
  }
  SplitMix64 rng(seed);
  std::map<std::uint32_t, std::vector<std::size_t>> by_speaker;
  for (std::size_t i = 0; i < data.size(); ++i) by_speaker[data.speaker_of(i)].push_back(i);

  EpochSample out;
  std::vector<TrainBatch::Group> pool;
  for (auto& [speaker, utts] : by_speaker) {
    if (utts.size() < opt.utterances_per_group) {
      out.skipped_speakers.push_back(speaker);
      log::warn("sampling: speaker " + std::to_string(speaker) + " has " +
                std::to_string(utts.size()) + " utterance(s), fewer than M=" +
                std::to_string(opt.utterances_per_group) + "; skipped");
      continue;
    }
    shuffle(utts.begin(), utts.end(), rng);
    if (utts.size() > opt.max_utterances_per_speaker) utts.resize(opt.max_utterances_per_speaker);
    out.sampled_per_speaker[speaker] = utts.size();
    for (std::size_t k = 0; k + opt.utterances_per_group <= utts.size(); k += opt.utterances_per_group) {
      pool.push_back({speaker, {utts.begin() + static_cast<std::ptrdiff_t>(k),
                                utts.begin() + static_cast<std::ptrdiff_t>(k + opt.utterances_per_group)}});
    }
  }
  shuffle(pool.begin(), pool.end(), rng);

  while (!pool.empty()) {
    TrainBatch batch;
    std::vector<TrainBatch::Group> rest;
    std::vector<std::uint32_t> used;
    for (auto& g : pool) {
      const bool dup = std::find(used.begin(), used.end(), g.speaker) != used.end();
      if (!dup && batch.groups.size() < opt.batch_speakers) {
        used.push_back(g.speaker);
        batch.groups.push_back(std::move(g));
      } else {
        rest.push_back(std::move(g));
      }
    }
    pool = std::move(rest);
    if (batch.groups.size() < 2) break;
    for (const auto& g : batch.groups) {
      std::vector<std::size_t> crops;
      for (std::size_t k = 0; k < g.utterances.size(); ++k) crops.push_back(rng.below(data.crop_count()));
      batch.crops.push_back(std::move(crops));
    }
    out.batches.push_back(std::move(batch));
  }
  return out;
}

namespace detail {

inline void accumulate(FusionParams& into, const FusionParams& g) {
  std::vector<const Matrix*> src;
  visit_parameters(g, [&](const std::string&, const Matrix& m) { src.push_back(&m); });
  std::size_t k = 0;
  visit_parameters(into, [&](const std::string&, Matrix& m) { m += *src[k++]; });
}

inline FusionParams zeros_like(const FusionParams& p) {
  FusionParams out = p;
  visit_parameters(out, [](const std::string&, Matrix& m) { m *= 0.0; });
  return out;
}

}  // namespace detail

struct LossAndGradient {
  double loss = 0.0;
  FusionParams grad;
};

/// Loss of one batch and its gradient with respect to every model parameter.
///
/// Utterance embeddings are computed first without keeping their tapes; the
/// loss is differentiated with respect to the embeddings, and each utterance
/// is then re-run and back-propagated with that upstream gradient. Per-
/// utterance gradients are summed in utterance order, so the result does not
/// depend on `threads`.
template <EmbeddingSource Source>
LossAndGradient loss_and_gradient(const FusionModel& model, const Source& data,
                                  const TrainBatch& batch, std::size_t threads = 1) {
  struct Item {
    std::size_t utterance;
    std::size_t crop;
  };
  std::vector<Item> items;
  for (std::size_t j = 0; j < batch.groups.size(); ++j) {
    const auto& g = batch.groups[j];
    if (g.utterances.size() < 2) throw ContractViolation("loss: every group needs M >= 2");
    for (std::size_t k = 0; k < g.utterances.size(); ++k) {
      const std::size_t crop = batch.crops.empty() ? 0 : batch.crops[j][k];
      items.push_back({g.utterances[k], crop});
    }
  }

  std::vector<Matrix> embeddings(items.size());
  parallel_for(items.size(), threads, [&](std::size_t i) {
    embeddings[i] = forward(model, data.channel_matrix(items[i].utterance, items[i].crop));
  });

  GradTape loss_tape;
  std::vector<Var> leaves;
  for (const auto& e : embeddings) leaves.push_back(loss_tape.parameter(e));
  Var w = loss_tape.parameter(model.params.loss_scale);
  Var b = loss_tape.parameter(model.params.loss_bias);
  std::vector<Var> queries, prototypes;
  std::size_t at = 0;
  for (const auto& g : batch.groups) {
    const std::size_t m = g.utterances.size();
    std::vector<Var> support(leaves.begin() + static_cast<std::ptrdiff_t>(at),
                             leaves.begin() + static_cast<std::ptrdiff_t>(at + m - 1));
    prototypes.push_back(support.size() == 1 ? support.front() : mean_rows(stack_rows(support)));
    queries.push_back(leaves[at + m - 1]);
    at += m;
  }
  Var loss = angular_prototypical_loss(queries, prototypes, w, b);
  loss_tape.backward(loss);

  LossAndGradient out{loss.value()[0], detail::zeros_like(model.params)};
  out.grad.loss_scale = loss_tape.grad(w);
  out.grad.loss_bias = loss_tape.grad(b);

  // Waves of `threads` utterances; summation stays in utterance order.
  const std::size_t wave = std::max<std::size_t>(1, threads);
  for (std::size_t start = 0; start < items.size(); start += wave) {
    const std::size_t count = std::min(wave, items.size() - start);
    std::vector<FusionParams> partial(count);
    parallel_for(count, threads, [&](std::size_t k) {
      const std::size_t i = start + k;
      GradTape tape;
      FusionParamsT<Var> bound = bind(tape, model.params, true);
      Var x = tape.constant(data.channel_matrix(items[i].utterance, items[i].crop));
      Var emb = forward(model.config, bound, x).embedding;
      tape.backward(emb, loss_tape.grad(leaves[i]));
      partial[k] = gradients(tape, bound);
    });
    for (auto& p : partial) {
      p.loss_scale *= 0.0;
      p.loss_bias *= 0.0;
      detail::accumulate(out.grad, p);
    }
  }
  return out;
}

template <EmbeddingSource Source>
double batch_loss(const FusionModel& model, const Source& data, const TrainBatch& batch,
                  std::size_t threads = 1) {
  return loss_and_gradient(model, data, batch, threads).loss;
}

// ---------------------------------------------------------------------------
// Adam with step decay.

struct AdamOptions {
  double base_lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double decay = 0.95;        // multiplicative factor ...
  int decay_every = 10;       // ... applied every this many epochs
  double min_loss_scale = 1e-6;
};

inline double learning_rate(const AdamOptions& opt, int epoch) {
  return opt.base_lr * std::pow(opt.decay, static_cast<double>(epoch / opt.decay_every));
}

inline OptimizerState make_optimizer_state(const FusionParams& params) {
  OptimizerState s;
  visit_parameters(params, [&](const std::string&, const Matrix& m) {
    s.first_moment.emplace_back(m.rows(), m.cols());
    s.second_moment.emplace_back(m.rows(), m.cols());
  });
  return s;
}

/// One Adam update at learning rate lr. A non-finite gradient aborts the step
/// before anything is modified. The loss scale is clamped to stay positive.
inline void adam_step(FusionParams& params, const FusionParams& grads, OptimizerState& state,
                      double lr, const AdamOptions& opt = {}) {
  std::vector<const Matrix*> g;
  std::vector<std::string> names;
  visit_parameters(grads, [&](const std::string& name, const Matrix& m) {
    g.push_back(&m);
    names.push_back(name);
  });
  if (state.first_moment.size() != g.size() || state.second_moment.size() != g.size()) {
    throw ContractViolation("adam_step: optimizer state does not match the parameters");
  }
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!g[i]->all_finite()) {
      throw NumericError("adam_step: non-finite gradient for '" + names[i] + "'; step aborted");
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);
  std::size_t k = 0;
  visit_parameters(params, [&](const std::string& name, Matrix& p) {
    const Matrix& gk = *g[k];
    Matrix& m = state.first_moment[k];
    Matrix& v = state.second_moment[k];
    if (!p.same_shape(gk) || !p.same_shape(m)) {
      throw ContractViolation("adam_step: shape mismatch for '" + name + "'");
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * gk[i];
      v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * gk[i] * gk[i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt.epsilon);
    }
    if (name == "loss_scale") p[0] = std::max(p[0], opt.min_loss_scale);
    ++k;
  });
}

// ---------------------------------------------------------------------------
// Training loop.

struct TrainOptions {
  std::size_t epochs = 200;
  SamplingOptions sampling;
  AdamOptions adam;
  std::uint64_t seed = 1;
  std::size_t threads = 1;
};

struct EpochLog {
  int epoch = 0;  // 1-based count of completed epochs
  double lr = 0.0;
  double mean_loss = 0.0;
  double wall_seconds = 0.0;
};

inline nlohmann::json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch}, {"lr", e.lr}, {"mean_loss", e.mean_loss}, {"wall_time", e.wall_seconds}};
}

inline nlohmann::json to_json(const TrainOptions& t) {
  return {{"epochs", t.epochs},
          {"batch_speakers", t.sampling.batch_speakers},
          {"utterances_per_group", t.sampling.utterances_per_group},
          {"max_utterances_per_speaker", t.sampling.max_utterances_per_speaker},
          {"base_lr", t.adam.base_lr},
          {"lr_decay", t.adam.decay},
          {"lr_decay_every", t.adam.decay_every},
          {"seed", t.seed}};
}

inline void update_from_json(TrainOptions& t, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train: expected a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "epochs") t.epochs = v.get<std::size_t>();
      else if (key == "batch_speakers") t.sampling.batch_speakers = v.get<std::size_t>();
      else if (key == "utterances_per_group") t.sampling.utterances_per_group = v.get<std::size_t>();
      else if (key == "max_utterances_per_speaker") t.sampling.max_utterances_per_speaker = v.get<std::size_t>();
      else if (key == "base_lr") t.adam.base_lr = v.get<double>();
      else if (key == "lr_decay") t.adam.decay = v.get<double>();
      else if (key == "lr_decay_every") t.adam.decay_every = v.get<int>();
      else if (key == "seed") t.seed = v.get<std::uint64_t>();
      else throw ConfigError("train: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("train: bad value for '" + key + "': " + e.what());
    }
  }
  if (t.adam.decay_every <= 0) throw ConfigError("train: lr_decay_every must be positive");
  if (!(t.adam.base_lr >= 0.0)) throw ConfigError("train: base_lr must be >= 0");
}

using EpochCallback = std::function<void(const EpochLog&, const FusionModel&, const OptimizerState&)>;

/// Trains the fusion head for `options.epochs` epochs starting after
/// `start_epoch` completed epochs. The embeddings from `data` are fixed
/// inputs. On a non-finite loss or gradient the model is restored to the
/// last completed epoch and DivergenceError is thrown.
template <EmbeddingSource Source>
std::vector<EpochLog> train(FusionModel& model, const Source& data, const TrainOptions& options,
                            OptimizerState& state, int start_epoch = 0,
                            const EpochCallback& on_epoch = {}) {
  if (data.size() == 0) throw ContractViolation("train: empty dataset");
  if (state.first_moment.empty()) state = make_optimizer_state(model.params);
  std::vector<EpochLog> history;
  for (std::size_t e = 0; e < options.epochs; ++e) {
    const int epoch = start_epoch + static_cast<int>(e);
    const auto t0 = std::chrono::steady_clock::now();
    const FusionModel last_good = model;
    const OptimizerState last_state = state;
    const double lr = learning_rate(options.adam, epoch);
    const EpochSample sample =
        sample_epoch(data, options.sampling, derive_seed(options.seed, static_cast<std::uint64_t>(epoch)));
    double total = 0.0;
    try {
      for (const auto& batch : sample.batches) {
        LossAndGradient lg = loss_and_gradient(model, data, batch, options.threads);
        if (!std::isfinite(lg.loss)) throw NumericError("train: non-finite loss");
        adam_step(model.params, lg.grad, state, lr, options.adam);
        total += lg.loss;
      }
    } catch (const NumericError& err) {
      model = last_good;
      state = last_state;
      throw DivergenceError(std::string("training diverged in epoch ") + std::to_string(epoch + 1) +
                                ": " + err.what(),
                            epoch);
    }
    EpochLog log_line;
    log_line.epoch = epoch + 1;
    log_line.lr = lr;
    log_line.mean_loss = sample.batches.empty() ? 0.0 : total / static_cast<double>(sample.batches.size());
    log_line.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.push_back(log_line);
    log::info("epoch " + std::to_string(log_line.epoch) + " loss " + std::to_string(log_line.mean_loss));
    if (on_epoch) on_epoch(log_line, model, state);
  }
  return history;
}

}  // namespace adhoc_fusion
