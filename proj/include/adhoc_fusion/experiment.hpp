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

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adhoc_fusion/checkpoint.hpp"
#include "adhoc_fusion/errors.hpp"
#include "adhoc_fusion/eval.hpp"
#include "adhoc_fusion/log.hpp"
#include "adhoc_fusion/model.hpp"
#include "adhoc_fusion/simulator.hpp"
#include "adhoc_fusion/training.hpp"

namespace adhoc_fusion {

/// 64-bit FNV-1a, used to fingerprint configs in reports.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Desk-scale end-to-end run: one 20-channel training set, held-out test
/// sets at several channel counts, a softmax and a sparsemax model trained
/// from the same initialization, and the oracle one-best baseline.
struct ExperimentConfig {
  SimConfig train_data;
  nlohmann::json test_overrides;  // applied over train_data for the test sets
  std::vector<std::size_t> test_channels{20, 30, 40};
  ModelConfig model;
  TrainOptions train;
  std::uint64_t init_seed = 1;
  std::size_t threads = 1;

  ExperimentConfig() {
    train_data.d_in = 32;
    train_data.speakers = 200;
    train_data.utterances_per_speaker = 10;
    train_data.channels_min = train_data.channels_max = 20;
    train_data.crops = 5;
    train_data.noise_channel_fraction = 0.25;
    train_data.noise_bias = 1.0;
    train_data.seed = 1;
    test_overrides = {{"speakers", 50}, {"seed", 2}};
    model.d_in = 32;
    model.width = 32;
    model.heads = 4;
    model.layers = 2;
    model.ffn_hidden = 64;
    model.residual_init_gain = 0.1;
    train.epochs = 40;
  }

  SimConfig test_data(std::size_t channels) const {
    SimConfig c = train_data;
    update_from_json(c, test_overrides);
    c.channels_min = c.channels_max = channels;
    c.validate();
    return c;
  }

  void validate() const {
    train_data.validate();
    model.validate();
    if (model.d_in != train_data.d_in) {
      throw ConfigError("experiment: model.d_in " + std::to_string(model.d_in) +
                        " does not match the simulated dimension " + std::to_string(train_data.d_in));
    }
    if (test_channels.empty()) throw ConfigError("experiment: test_channels is empty");
    for (std::size_t c : test_channels) (void)test_data(c);
  }
};

inline nlohmann::json to_json(const ExperimentConfig& e) {
  return {{"sim", to_json(e.train_data)},
          {"test", e.test_overrides},
          {"test_channels", e.test_channels},
          {"model", to_json(e.model)},
          {"train", to_json(e.train)},
          {"init_seed", e.init_seed},
          {"threads", e.threads}};
}

inline void update_from_json(ExperimentConfig& e, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("experiment: expected a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "sim") update_from_json(e.train_data, v);
      else if (key == "test") {
        SimConfig probe = e.train_data;
        update_from_json(probe, v);  // reject unknown keys early
        e.test_overrides.update(v);
      } else if (key == "test_channels") e.test_channels = v.get<std::vector<std::size_t>>();
      else if (key == "model") update_from_json(e.model, v);
      else if (key == "train") update_from_json(e.train, v);
      else if (key == "init_seed") e.init_seed = v.get<std::uint64_t>();
      else if (key == "threads") e.threads = v.get<std::size_t>();
      else throw ConfigError("experiment: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception& ex) {
      throw ConfigError("experiment: bad value for '" + key + "': " + ex.what());
    }
  }
}

inline std::string config_digest(const nlohmann::json& config) {
  return "fnv1a64:" + hex64(fnv1a64(config.dump()));
}

struct SystemResult {
  std::map<std::size_t, TrialScoreReport> by_channels;
};

struct ExperimentResult {
  std::map<std::string, SystemResult> systems;  // oracle-one-best, softmax, sparsemax
  std::map<std::string, SelectionStats> selection;
  std::map<std::string, std::vector<EpochLog>> history;
  std::map<std::string, FusionModel> models;
  std::size_t selection_channels = 0;

  double eer(const std::string& system, std::size_t channels) const {
    return systems.at(system).by_channels.at(channels).eer;
  }
};

inline nlohmann::json report_json(const ExperimentConfig& config, const ExperimentResult& r) {
  const nlohmann::json cfg = to_json(config);
  nlohmann::json systems = nlohmann::json::object();
  nlohmann::json table = nlohmann::json::array();
  for (const auto& [name, sys] : r.systems) {
    nlohmann::json per = nlohmann::json::object();
    nlohmann::json row = {{"system", name}};
    for (const auto& [c, rep] : sys.by_channels) {
      per[std::to_string(c)] = to_json(rep, false);
      row[std::to_string(c) + "ch"] = rep.eer;
    }
    systems[name] = per;
    table.push_back(row);
  }
  nlohmann::json selection = nlohmann::json::object();
  for (const auto& [name, s] : r.selection) selection[name] = to_json(s);
  nlohmann::json training = nlohmann::json::object();
  for (const auto& [name, h] : r.history) {
    training[name] = {{"epochs", h.size()}, {"final_loss", h.empty() ? 0.0 : h.back().mean_loss}};
  }
  return {{"config_digest", config_digest(cfg)},
          {"config", cfg},
          {"systems", systems},
          {"table", table},
          {"selection", {{"channels", r.selection_channels}, {"models", selection}}},
          {"training", training}};
}

inline void append_line(const std::filesystem::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for appending");
  out << line << '\n';
}

/// Runs the whole pipeline. When out_dir is non-empty the datasets,
/// checkpoints, training logs and report.json are written there.
inline ExperimentResult run_experiment(const ExperimentConfig& config,
                                       const std::filesystem::path& out_dir = {}) {
  config.validate();
  const bool write = !out_dir.empty();
  if (write) {
    std::filesystem::create_directories(out_dir);
    for (const char* stale : {"train_softmax.jsonl", "train_sparsemax.jsonl"}) {
      std::filesystem::remove(out_dir / stale);
    }
  }

  log::info("experiment: generating training data");
  const Dataset train_set = generate(config.train_data);
  if (write) write_dataset(train_set, out_dir / "train.afds");
  std::map<std::size_t, Dataset> test_sets;
  for (std::size_t c : config.test_channels) {
    test_sets.emplace(c, generate(config.test_data(c)));
    if (write) write_dataset(test_sets.at(c), out_dir / ("test_" + std::to_string(c) + "ch.afds"));
  }

  ExperimentResult r;
  r.selection_channels = config.test_channels.front();
  for (const auto& [c, ds] : test_sets) r.systems["oracle-one-best"].by_channels[c] = evaluate_oracle(ds, config.threads);

  for (NormMode mode : {NormMode::kSoftmax, NormMode::kSparsemax}) {
    const std::string name(to_string(mode));
    ModelConfig mc = config.model;
    mc.mode = mode;
    FusionModel model = init(mc, config.init_seed);
    OptimizerState state;
    TrainOptions opt = config.train;
    opt.threads = config.threads;
    log::info("experiment: training " + name);
    const auto log_path = out_dir / ("train_" + name + ".jsonl");
    r.history[name] = train(model, train_set, opt, state, 0,
                            [&](const EpochLog& e, const FusionModel&, const OptimizerState&) {
                              log::info("experiment: " + name + " " + to_json(e).dump());
                              if (write) append_line(log_path, to_json(e).dump());
                            });
    if (write) {
      save_checkpoint({model, static_cast<int>(opt.epochs), state}, out_dir / ("model_" + name + ".afck"));
    }
    for (const auto& [c, ds] : test_sets) r.systems[name].by_channels[c] = evaluate_fusion(model, ds, config.threads);
    r.selection[name] = channel_selection(model, test_sets.at(r.selection_channels), 0, config.threads);
    r.models.emplace(name, std::move(model));
  }
  if (write) io::write_file(out_dir / "report.json", report_json(config, r).dump(2) + "\n");
  return r;
}

}  // namespace adhoc_fusion
