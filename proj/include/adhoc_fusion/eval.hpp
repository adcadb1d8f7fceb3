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
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adhoc_fusion/errors.hpp"
#include "adhoc_fusion/matrix.hpp"
#include "adhoc_fusion/model.hpp"
#include "adhoc_fusion/parallel.hpp"
#include "adhoc_fusion/simulator.hpp"

namespace adhoc_fusion {

/// Mean cosine similarity over every (enroll crop, test crop) pair.
inline double trial_score(std::span<const Matrix> enroll, std::span<const Matrix> test) {
  if (enroll.empty() || test.empty()) throw ContractViolation("trial_score: empty crop list");
  double acc = 0.0;
  for (const auto& a : enroll)
    for (const auto& b : test) acc += cosine(a.data(), b.data());
  return acc / static_cast<double>(enroll.size() * test.size());
}

struct EerResult {
  double eer = 0.0;
  double threshold = 0.0;
};

/// Equal error rate of a trial list (label 1 = same speaker).
///
/// A trial is accepted when score >= t. The false-accept and false-reject
/// rates are evaluated at every distinct score and at +inf; the EER is the
/// point where the piecewise-linear FAR/FRR curves cross.
inline EerResult compute_eer(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw ContractViolation("compute_eer: size mismatch");
  std::size_t n_pos = 0;
  for (auto l : labels) n_pos += l ? 1 : 0;
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw ContractViolation("compute_eer: need at least one positive and one negative trial");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Walk thresholds upwards. Below the lowest score everything is accepted.
  double far = 1.0, frr = 0.0, threshold = scores[order.front()];
  std::size_t pos_below = 0, neg_below = 0;
  std::size_t i = 0;
  while (true) {
    double next_t;
    if (i < order.size()) {
      next_t = scores[order[i]];
    } else {
      next_t = std::numeric_limits<double>::infinity();
    }
    // Rates at threshold next_t: everything strictly below it is rejected.
    const double next_far = 1.0 - static_cast<double>(neg_below) / static_cast<double>(n_neg);
    const double next_frr = static_cast<double>(pos_below) / static_cast<double>(n_pos);
    const double prev_gap = far - frr;
    const double gap = next_far - next_frr;
    if (gap <= 0.0) {
      if (gap == 0.0) return {next_far, std::isfinite(next_t) ? next_t : threshold};
      const double alpha = prev_gap / (prev_gap - gap);
      const double eer = far + alpha * (next_far - far);
      const double t = std::isfinite(next_t) ? threshold + alpha * (next_t - threshold) : threshold;
      return {eer, t};
    }
    far = next_far;
    frr = next_frr;
    threshold = next_t;
    if (i >= order.size()) break;
    // Reject every trial tied at this score when moving past it.
    const double s = scores[order[i]];
    while (i < order.size() && scores[order[i]] == s) {
      (labels[order[i]] ? pos_below : neg_below) += 1;
      ++i;
    }
  }
  return {far, threshold};  // unreachable: at +inf FAR = 0 < FRR = 1
}

struct Trial {
  std::size_t enroll;
  std::size_t test;
  bool same_speaker;
};

struct TrialCounts {
  std::size_t total = 0;
  std::size_t positive = 0;
  std::size_t negative = 0;
};

// Number of unordered pairs of n utterances.
constexpr std::uint64_t trial_count(std::uint64_t n) { return n < 2 ? 0 : n * (n - 1) / 2; }

/// Every unordered utterance pair, labelled by speaker identity.
template <EmbeddingSource Source>
std::vector<Trial> build_trials(const Source& data) {
  std::vector<Trial> trials;
  trials.reserve(trial_count(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i)
    for (std::size_t j = i + 1; j < data.size(); ++j)
      trials.push_back({i, j, data.speaker_of(i) == data.speaker_of(j)});
  return trials;
}

inline TrialCounts count_trials(std::span<const Trial> trials) {
  TrialCounts c;
  c.total = trials.size();
  for (const auto& t : trials) (t.same_speaker ? c.positive : c.negative) += 1;
  return c;
}

/// Index of the channel closest to the source; ties go to the lowest index.
inline std::size_t oracle_channel(const SyntheticUtterance& u) {
  if (u.distances.empty()) throw ContractViolation("oracle_one_best: no distance metadata");
  return static_cast<std::size_t>(std::min_element(u.distances.begin(), u.distances.end()) -
                                  u.distances.begin());
}

// Single-channel embedding of the closest channel for one crop.
inline Matrix oracle_one_best(const Dataset& data, std::size_t utterance, std::size_t crop = 0) {
  return data.channel_embedding(utterance, oracle_channel(data.utterances.at(utterance)), crop);
}

struct TrialScoreReport {
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  double eer = 0.0;
  double eer_threshold = 0.0;
  TrialCounts counts;
};

// embeddings[utterance][crop] -> 1 x E
using CropEmbeddings = std::vector<std::vector<Matrix>>;

template <EmbeddingSource Source, class Embed>
CropEmbeddings embed_all(const Source& data, Embed&& embed, std::size_t threads) {
  CropEmbeddings out(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    out[i].reserve(data.crop_count());
    for (std::size_t k = 0; k < data.crop_count(); ++k) out[i].push_back(embed(i, k));
  });
  return out;
}

inline TrialScoreReport score_trials(const CropEmbeddings& embeddings, std::span<const Trial> trials,
                                     std::size_t threads = 1) {
  TrialScoreReport r;
  r.scores.resize(trials.size());
  r.labels.resize(trials.size());
  parallel_for(trials.size(), threads, [&](std::size_t k) {
    const auto& t = trials[k];
    r.scores[k] = trial_score(embeddings.at(t.enroll), embeddings.at(t.test));
    r.labels[k] = t.same_speaker ? 1 : 0;
  });
  r.counts = count_trials(trials);
  const EerResult e = compute_eer(r.scores, r.labels);
  r.eer = e.eer;
  r.eer_threshold = e.threshold;
  return r;
}

inline TrialScoreReport evaluate_fusion(const FusionModel& model, const Dataset& data,
                                        std::size_t threads = 1) {
  const auto trials = build_trials(data);
  const auto emb = embed_all(
      data, [&](std::size_t i, std::size_t k) { return forward(model, data.channel_matrix(i, k)); },
      threads);
  return score_trials(emb, trials, threads);
}

inline TrialScoreReport evaluate_oracle(const Dataset& data, std::size_t threads = 1) {
  const auto trials = build_trials(data);
  const auto emb = embed_all(
      data, [&](std::size_t i, std::size_t k) { return oracle_one_best(data, i, k); }, threads);
  return score_trials(emb, trials, threads);
}

/// How often the final (fusion) block gives noise channels exactly zero
/// attention. A noise channel counts as dropped when, in at least one head,
/// every clean query row assigns it weight 0.0; an utterance counts as
/// selected when all of its noise channels are dropped.
struct SelectionStats {
  std::size_t utterances = 0;          // utterances with at least one noise channel
  std::size_t selected = 0;
  std::size_t zero_entries = 0;        // exact zeros anywhere in final-block attention
  std::size_t noise_channels = 0;
  std::size_t dropped_noise_channels = 0;
  double selected_fraction() const {
    return utterances ? static_cast<double>(selected) / static_cast<double>(utterances) : 0.0;
  }
};

inline SelectionStats channel_selection(const FusionModel& model, const Dataset& data,
                                        std::size_t crop = 0, std::size_t threads = 1) {
  struct PerUtt {
    bool counted = false, selected = false;
    std::size_t zeros = 0, noise = 0, dropped = 0;
  };
  std::vector<PerUtt> per(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    const auto& u = data.utterances[i];
    const ForwardTrace trace = forward_trace(model, data.channel_matrix(i, crop));
    const auto& final_block = trace.weights.back();
    PerUtt& p = per[i];
    for (const auto& a : final_block)
      for (double v : a.data()) p.zeros += v == 0.0 ? 1 : 0;
    for (std::size_t j = 0; j < u.channels(); ++j) {
      if (!u.noise_mask[j]) continue;
      ++p.noise;
      bool dropped = false;
      for (const auto& a : final_block) {
        bool all_zero = true;
        for (std::size_t q = 0; q < u.channels() && all_zero; ++q) {
          if (!u.noise_mask[q] && a(q, j) != 0.0) all_zero = false;
        }
        dropped = dropped || all_zero;
      }
      p.dropped += dropped ? 1 : 0;
    }
    p.counted = p.noise > 0;
    p.selected = p.counted && p.dropped == p.noise;
  });
  SelectionStats s;
  for (const auto& p : per) {
    s.zero_entries += p.zeros;
    s.noise_channels += p.noise;
    s.dropped_noise_channels += p.dropped;
    if (p.counted) {
      ++s.utterances;
      s.selected += p.selected ? 1 : 0;
    }
  }
  return s;
}

inline nlohmann::json to_json(const SelectionStats& s) {
  return {{"utterances_with_noise", s.utterances},
          {"selected", s.selected},
          {"selected_fraction", s.selected_fraction()},
          {"final_block_zero_entries", s.zero_entries},
          {"noise_channels", s.noise_channels},
          {"dropped_noise_channels", s.dropped_noise_channels}};
}

inline nlohmann::json to_json(const TrialScoreReport& r, bool with_scores) {
  nlohmann::json j = {{"eer", r.eer},
                      {"threshold", r.eer_threshold},
                      {"trials", {{"total", r.counts.total},
                                  {"positive", r.counts.positive},
                                  {"negative", r.counts.negative}}}};
  if (with_scores) {
    j["scores"] = r.scores;
    j["labels"] = r.labels;
  }
  return j;
}

}  // namespace adhoc_fusion
