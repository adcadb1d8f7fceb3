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

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "adhoc_fusion/checkpoint.hpp"
#include "adhoc_fusion/errors.hpp"
#include "adhoc_fusion/eval.hpp"
#include "adhoc_fusion/experiment.hpp"
#include "adhoc_fusion/log.hpp"
#include "adhoc_fusion/normalize.hpp"
#include "adhoc_fusion/simulator.hpp"
#include "adhoc_fusion/training.hpp"

namespace fs = std::filesystem;
using namespace adhoc_fusion;

namespace {

constexpr int kExitError = 1;
constexpr int kExitDiverged = 3;

nlohmann::json read_json(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  try {
    return nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("'" + path + "': " + e.what());
  }
}

void require_input(const std::string& path) {
  if (!fs::is_regular_file(path)) throw UsageError("input file '" + path + "' does not exist");
}

void require_output(const fs::path& path) {
  const fs::path parent = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  if (!fs::is_directory(parent)) {
    throw UsageError("output directory '" + parent.string() + "' does not exist");
  }
}

// Write-then-rename so an interrupted run never leaves a torn checkpoint.
void save_atomically(const Checkpoint& ck, const fs::path& path) {
  fs::path tmp = path;
  tmp += ".tmp";
  save_checkpoint(ck, tmp);
  fs::rename(tmp, path);
}

std::string format_vector(const std::vector<double>& v) {
  std::string out;
  char buf[32];
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.10g", v[i]);
    if (i) out += ',';
    out += buf;
  }
  return out;
}

std::vector<double> parse_values(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    while (used < item.size() && std::isspace(static_cast<unsigned char>(item[used]))) ++used;
    if (item.empty() || used != item.size() || !std::isfinite(v)) {
      throw UsageError("cannot parse '" + item + "' as a finite number");
    }
    out.push_back(v);
  }
  if (out.empty() || text.back() == ',') throw UsageError("expected comma-separated numbers");
  return out;
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::size_t threads = 1;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool with_mode) {
  cmd->add_option("--config", c.config, "JSON configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "random seed");
  if (with_mode) cmd->add_option("--mode", c.mode, "attention normalization")->check(CLI::IsMember({"softmax", "sparsemax"}));
  cmd->add_option("--threads", c.threads, "worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--out", c.out, "output path");
}

// ---------------------------------------------------------------------------

int cmd_simulate(const Common& c, std::optional<std::size_t> channels) {
  SimConfig cfg;
  update_from_json(cfg, read_json(c.config));
  if (c.seed) cfg.seed = *c.seed;
  if (channels) cfg.channels_min = cfg.channels_max = *channels;
  cfg.validate();
  const fs::path out = c.out.empty() ? "data.afds" : c.out;
  require_output(out);
  const Dataset ds = generate(cfg);
  const std::string bytes = serialize_dataset(ds);
  io::write_file(out, bytes);
  std::cout << "wrote " << out.string() << ": speakers=" << ds.speaker_count() << " utterances=" << ds.size()
            << " channels=" << cfg.channels_min;
  if (cfg.channels_max != cfg.channels_min) std::cout << ".." << cfg.channels_max;
  std::cout << " crops=" << cfg.crops << " d_in=" << cfg.d_in << " bytes=" << bytes.size() << '\n';
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string log;
  std::string resume;
  std::optional<std::size_t> epochs;
};

int cmd_train(const Common& c, const TrainArgs& a) {
  ModelConfig model_cfg;
  TrainOptions opt;
  const nlohmann::json j = read_json(c.config);
  for (const auto& [key, v] : j.items()) {
    if (key == "model") update_from_json(model_cfg, v);
    else if (key == "train") update_from_json(opt, v);
    else throw ConfigError("train config: unknown key '" + key + "' (expected model, train)");
  }
  if (!c.mode.empty()) model_cfg.mode = parse_norm_mode(c.mode);
  if (c.seed) opt.seed = *c.seed;
  if (a.epochs) opt.epochs = *a.epochs;
  opt.threads = c.threads;

  require_input(a.data);
  if (!a.resume.empty()) require_input(a.resume);

  Checkpoint ck;
  if (!a.resume.empty()) {
    ck = load_checkpoint(a.resume);
    if (!c.mode.empty() && ck.model.config.mode != model_cfg.mode) {
      throw UsageError("--mode " + c.mode + " does not match the checkpoint's mode " +
                       std::string(to_string(ck.model.config.mode)));
    }
    if (!ck.optimizer) ck.optimizer = make_optimizer_state(ck.model.params);
  } else {
    ck.model = init(model_cfg, opt.seed);
    ck.optimizer = make_optimizer_state(ck.model.params);
  }
  const std::string mode_name(to_string(ck.model.config.mode));
  const fs::path out = c.out.empty() ? "model_" + mode_name + ".afck" : c.out;
  fs::path log_path = a.log;
  if (log_path.empty()) log_path = fs::path(out).replace_extension(".jsonl");
  require_output(out);
  require_output(log_path);

  const Dataset data = read_dataset(a.data);
  if (data.config.d_in != ck.model.config.d_in) {
    throw UsageError("dataset d_in " + std::to_string(data.config.d_in) + " does not match model d_in " +
                     std::to_string(ck.model.config.d_in));
  }
  const int start = ck.epochs_completed;
  const std::size_t target = opt.epochs;
  opt.epochs = target > static_cast<std::size_t>(start) ? target - static_cast<std::size_t>(start) : 0;
  if (a.resume.empty()) std::filesystem::remove(log_path);

  try {
    train(ck.model, data, opt, *ck.optimizer, start,
          [&](const EpochLog& e, const FusionModel& m, const OptimizerState& s) {
            append_line(log_path, to_json(e).dump());
            save_atomically({m, e.epoch, s}, out);
            std::cout << to_json(e).dump() << '\n';
          });
  } catch (const DivergenceError& e) {
    save_atomically({ck.model, e.last_good_epoch(), ck.optimizer}, out);
    std::cerr << "error: " << e.what() << "\nlast good checkpoint (epoch " << e.last_good_epoch()
              << ") kept at " << out.string() << '\n';
    return kExitDiverged;
  }
  if (opt.epochs == 0) save_atomically(ck, out);
  std::cout << "wrote " << out.string() << " (" << std::max<std::size_t>(target, start) << " epochs)\n";
  return 0;
}

int cmd_eval(const Common& c, const std::string& model_path, const std::string& data_path,
             const std::string& baseline, bool with_scores) {
  require_input(data_path);
  if (baseline == "fusion") {
    if (model_path.empty()) throw UsageError("--model is required for the fusion baseline");
    require_input(model_path);
  }
  const fs::path out = c.out.empty() ? "report.json" : c.out;
  require_output(out);
  const Dataset data = read_dataset(data_path);
  TrialScoreReport report;
  nlohmann::json j;
  if (baseline == "fusion") {
    const FusionModel model = load(model_path);
    if (model.config.d_in != data.config.d_in) {
      throw UsageError("dataset d_in " + std::to_string(data.config.d_in) + " does not match model d_in " +
                       std::to_string(model.config.d_in));
    }
    report = evaluate_fusion(model, data, c.threads);
    j = to_json(report, with_scores);
    j["model"] = to_json(model.config);
  } else {
    report = evaluate_oracle(data, c.threads);
    j = to_json(report, with_scores);
  }
  j["baseline"] = baseline;
  j["data_config"] = to_json(data.config);
  j["config_digest"] = config_digest(j.contains("model") ? nlohmann::json{j["data_config"], j["model"]}
                                                         : j["data_config"]);
  io::write_file(out, j.dump(2) + "\n");
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", report.eer);
  std::cout << "EER " << buf << " (" << report.counts.total << " trials, " << report.counts.positive
            << " positive)\n";
  return 0;
}

int cmd_sparsemax(const std::string& values) {
  std::cout << format_vector(sparsemax(parse_values(values))) << '\n';
  return 0;
}

int cmd_experiment(const Common& c) {
  ExperimentConfig cfg;
  update_from_json(cfg, read_json(c.config));
  if (c.seed) {
    cfg.train_data.seed = *c.seed;
    cfg.test_overrides["seed"] = *c.seed + 1;
    cfg.train.seed = *c.seed;
    cfg.init_seed = *c.seed;
  }
  cfg.threads = c.threads;
  cfg.validate();
  const fs::path out = c.out.empty() ? "experiment" : c.out;
  if (!out.parent_path().empty()) require_output(out);
  const ExperimentResult r = run_experiment(cfg, out);
  const nlohmann::json report = report_json(cfg, r);
  std::printf("%-16s", "system");
  for (std::size_t ch : cfg.test_channels) std::printf("%10s", (std::to_string(ch) + "-ch").c_str());
  std::printf("\n");
  for (const char* name : {"oracle-one-best", "softmax", "sparsemax"}) {
    std::printf("%-16s", name);
    for (std::size_t ch : cfg.test_channels) std::printf("%9.2f%%", 100.0 * r.eer(name, ch));
    std::printf("\n");
  }
  for (const auto& [name, s] : r.selection) {
    std::printf("%s: noise channels fully zeroed on %zu/%zu utterances (%.1f%%)\n", name.c_str(), s.selected,
                s.utterances, 100.0 * s.selected_fraction());
  }
  std::cout << "wrote " << (out / "report.json").string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-channel speaker-embedding fusion with sparse inter-channel attention"};
  app.require_subcommand(1);
  Common common;

  auto* simulate = app.add_subcommand("simulate", "generate a synthetic ad-hoc array dataset");
  add_common(simulate, common, false);
  std::optional<std::size_t> channels;
  simulate->add_option("--channels", channels, "channels per utterance (overrides the config)");

  auto* trn = app.add_subcommand("train", "train a fusion model");
  add_common(trn, common, true);
  TrainArgs train_args;
  trn->add_option("--data", train_args.data, "training dataset")->required();
  trn->add_option("--log", train_args.log, "line-delimited JSON training log");
  trn->add_option("--resume", train_args.resume, "checkpoint to continue from");
  trn->add_option("--epochs", train_args.epochs, "total epochs (including resumed ones)");

  auto* evl = app.add_subcommand("eval", "score all trials of a dataset and report the EER");
  add_common(evl, common, false);
  std::string model_path, data_path, baseline = "fusion";
  bool with_scores = false;
  evl->add_option("--model", model_path, "checkpoint");
  evl->add_option("--data", data_path, "test dataset")->required();
  evl->add_option("--baseline", baseline, "system to score")
      ->check(CLI::IsMember({"fusion", "oracle-one-best"}));
  evl->add_flag("--scores", with_scores, "include per-trial scores in the report");

  auto* spm = app.add_subcommand("sparsemax", "print the sparsemax of comma-separated values");
  std::string values;
  spm->add_option("values", values, "e.g. 3,1")->required();

  auto* exp = app.add_subcommand("experiment", "simulate, train both modes and evaluate");
  add_common(exp, common, false);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*simulate) return cmd_simulate(common, channels);
    if (*trn) return cmd_train(common, train_args);
    if (*evl) return cmd_eval(common, model_path, data_path, baseline, with_scores);
    if (*spm) return cmd_sparsemax(values);
    if (*exp) return cmd_experiment(common);
  } catch (const std::exception& e) {
    log::error(e.what());
    return kExitError;
  }
  return kExitError;
}
