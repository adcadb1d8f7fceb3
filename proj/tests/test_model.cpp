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

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "adhoc_fusion/checkpoint.hpp"
#include "adhoc_fusion/model.hpp"
#include "oracles.hpp"

namespace adhoc_fusion {
namespace {

using testing::random_matrix;

ModelConfig small_config(NormMode mode = NormMode::kSoftmax) {
  ModelConfig c;
  c.d_in = 10;
  c.width = 8;
  c.heads = 2;
  c.layers = 2;
  c.ffn_hidden = 12;
  c.mode = mode;
  return c;
}

Checkpoint wrap(const FusionModel& m) { return Checkpoint{m, 0, std::nullopt}; }

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::path(::testing::TempDir()) / name;
}

TEST(Model, TruncationAdapterWithZeroLayersCopiesPrefix) {
  ModelConfig c = small_config();
  FusionModel m{c, zero_params(c)};
  for (std::size_t i = 0; i < c.width; ++i) m.params.adapter(i, i) = 1.0;
  SplitMix64 rng(1);
  const Matrix x = random_matrix(1, c.d_in, rng);
  const Matrix e = forward(m, x);
  ASSERT_EQ(e.cols(), c.width);
  for (std::size_t i = 0; i < c.width; ++i) EXPECT_EQ(e[i], x[i]);
}

TEST(Model, PermutationInvariance) {
  SplitMix64 rng(2);
  for (NormMode mode : {NormMode::kSoftmax, NormMode::kSparsemax}) {
    for (bool uses_prev : {true, false}) {
      ModelConfig c = small_config(mode);
      c.fusion_uses_prev = uses_prev;
      const FusionModel m = init(c, 7);
      for (int trial = 0; trial < 10; ++trial) {
        const std::size_t ch = 1 + rng.below(12);
        const Matrix x = random_matrix(ch, c.d_in, rng);
        const auto perm = testing::random_permutation(ch, rng);
        EXPECT_LT(max_abs_diff(forward(m, x), forward(m, permute_rows(x, perm))), 1e-9);
      }
    }
  }
}

TEST(Model, ChannelCountSweep) {
  SplitMix64 rng(3);
  for (NormMode mode : {NormMode::kSoftmax, NormMode::kSparsemax}) {
    const FusionModel m = init(small_config(mode), 3);
    for (std::size_t ch = 1; ch <= 64; ++ch) {
      const Matrix e = forward(m, random_matrix(ch, 10, rng));
      ASSERT_EQ(e.rows(), 1u);
      ASSERT_EQ(e.cols(), 8u);
      ASSERT_TRUE(e.all_finite()) << "C=" << ch;
    }
  }
}

TEST(Model, DefaultConfigAcceptsVaryingChannelCounts) {
  const ModelConfig c;
  const FusionModel m = init(c, 1);
  SplitMix64 rng(4);
  for (std::size_t ch : {20u, 30u}) {
    const Matrix e = forward(m, random_matrix(ch, 512, rng));
    EXPECT_EQ(e.cols(), 256u);
    EXPECT_TRUE(e.all_finite());
  }
}

TEST(Model, ShapeMismatch) {
  const FusionModel m = init(small_config(), 1);
  EXPECT_THROW(forward(m, Matrix(3, 11)), ContractViolation);
  EXPECT_THROW(forward(m, Matrix(0, 10)), ContractViolation);
}

TEST(Model, ForwardTraceReportsEveryBlock) {
  const FusionModel m = init(small_config(NormMode::kSparsemax), 1);
  SplitMix64 rng(5);
  const Matrix x = random_matrix(5, 10, rng);
  const auto t = forward_trace(m, x);
  ASSERT_EQ(t.weights.size(), 3u);
  for (const auto& block : t.weights) {
    ASSERT_EQ(block.size(), 2u);
    for (const auto& w : block) EXPECT_EQ(w.rows(), 5u);
  }
  EXPECT_EQ(t.embedding, forward(m, x));
}

TEST(Init, SeedDeterminism) {
  const ModelConfig c = small_config();
  const FusionModel a = init(c, 99);
  const FusionModel b = init(c, 99);
  const FusionModel d = init(c, 100);
  EXPECT_EQ(serialize_checkpoint(wrap(a)), serialize_checkpoint(wrap(b)));
  EXPECT_NE(serialize_checkpoint(wrap(a)), serialize_checkpoint(wrap(d)));
}

TEST(Init, WeightsWithinGlorotBoundsBiasesZero) {
  ModelConfig c = small_config();
  const FusionModel m = init(c, 5);
  std::size_t checked = 0;
  visit_parameters(m.params, [&](const std::string& name, const Matrix& p) {
    if (name == "loss_scale") {
      EXPECT_EQ(p[0], 10.0);
    } else if (name == "loss_bias") {
      EXPECT_EQ(p[0], -5.0);
    } else if (is_bias(name)) {
      for (double v : p.data()) EXPECT_EQ(v, 0.0);
    } else {
      const double bound = std::sqrt(6.0 / static_cast<double>(p.rows() + p.cols()));
      for (double v : p.data()) EXPECT_LE(std::abs(v), bound) << name;
    }
    ++checked;
  });
  EXPECT_GT(checked, 0u);
}

TEST(Init, InvalidConfig) {
  ModelConfig c = small_config();
  c.heads = 3;
  EXPECT_THROW(init(c, 1), ConfigError);
  c = small_config();
  c.layers = 0;
  EXPECT_THROW(init(c, 1), ConfigError);
  c = small_config();
  c.d_in = 0;
  EXPECT_THROW(init(c, 1), ConfigError);
}

TEST(Init, ParameterCountMatchesClosedForm) {
  auto closed_form = [](const ModelConfig& c) {
    const std::size_t e = c.width, f = c.ffn_hidden, dk = c.width / c.heads;
    return c.d_in * e + (c.layers + 1) * (3 * c.heads * e * dk + e * e + 2 * e * f + f + e) + 2;
  };
  const ModelConfig def;
  EXPECT_EQ(parameter_count(def), 2756354u);
  EXPECT_EQ(parameter_count(def), closed_form(def));
  EXPECT_EQ(parameter_count(small_config()), closed_form(small_config()));
}

TEST(ModelConfigJson, RoundTripAndUnknownKey) {
  ModelConfig c = small_config(NormMode::kSparsemax);
  c.norm_axis = NormAxis::kKeyColumns;
  c.residual_init_gain = 0.25;
  EXPECT_EQ(model_config_from_json(to_json(c)), c);
  EXPECT_THROW(model_config_from_json({{"widht", 8}}), ConfigError);
  EXPECT_THROW(model_config_from_json({{"mode", "argmax"}}), ConfigError);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  const FusionModel m = init(ModelConfig{}, 11);
  const auto path = temp_path("roundtrip.afck");
  save(m, path);
  const FusionModel back = load(path);
  EXPECT_EQ(back.config, m.config);
  visit_parameters(m.params, [&, i = std::size_t{0}](const std::string& name, const Matrix& p) mutable {
    std::size_t j = 0;
    visit_parameters(back.params, [&](const std::string& other, const Matrix& q) {
      if (j++ == i) {
        EXPECT_EQ(name, other);
        EXPECT_EQ(p, q);
      }
    });
    ++i;
  });
  SplitMix64 rng(6);
  const Matrix x = random_matrix(6, 512, rng);
  EXPECT_EQ(forward(m, x), forward(back, x));
  EXPECT_EQ(serialize_checkpoint(wrap(back)), io::read_file(path));
}

TEST(Checkpoint, OptimizerStateAndEpochRoundTrip) {
  Checkpoint ck{init(small_config(), 3), 17, OptimizerState{}};
  SplitMix64 rng(7);
  ck.optimizer->step = 170;
  visit_parameters(ck.model.params, [&](const std::string&, const Matrix& p) {
    ck.optimizer->first_moment.push_back(random_matrix(p.rows(), p.cols(), rng));
    ck.optimizer->second_moment.push_back(random_matrix(p.rows(), p.cols(), rng));
  });
  const std::string bytes = serialize_checkpoint(ck);
  const Checkpoint back = deserialize_checkpoint(bytes);
  EXPECT_EQ(back.epochs_completed, 17);
  ASSERT_TRUE(back.optimizer.has_value());
  EXPECT_EQ(back.optimizer->step, 170u);
  EXPECT_EQ(back.optimizer->first_moment, ck.optimizer->first_moment);
  EXPECT_EQ(back.optimizer->second_moment, ck.optimizer->second_moment);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
}

TEST(Checkpoint, CorruptMagic) {
  std::string bytes = serialize_checkpoint(wrap(init(small_config(), 1)));
  bytes[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bytes), FormatError);
}

TEST(Checkpoint, VersionMismatch) {
  std::string bytes = serialize_checkpoint(wrap(init(small_config(), 1)));
  bytes[4] = 2;
  EXPECT_THROW(deserialize_checkpoint(bytes), FormatError);
}

TEST(Checkpoint, EveryTruncationIsRejected) {
  const std::string bytes = serialize_checkpoint(wrap(init(small_config(), 1)));
  for (std::size_t n = 0; n < bytes.size(); n += 7) {
    EXPECT_THROW(deserialize_checkpoint(std::string_view(bytes).substr(0, n)), FormatError) << n;
  }
  EXPECT_THROW(deserialize_checkpoint(bytes + "x"), FormatError);
}

TEST(Checkpoint, ManifestShapeDisagreement) {
  const FusionModel m = init(small_config(), 1);
  std::string bytes = serialize_checkpoint(wrap(m));
  // Swap a dimension in the header text; payload length stays valid.
  const std::string needle = "\"width\":8";
  const auto pos = bytes.find(needle);
  ASSERT_NE(pos, std::string::npos);
  bytes.replace(pos, needle.size(), "\"width\":4");
  EXPECT_THROW(deserialize_checkpoint(bytes), FormatError);
}

TEST(Checkpoint, HeaderCarriesConfig) {
  ModelConfig c = small_config(NormMode::kSparsemax);
  c.heads = 4;
  c.layers = 3;
  const auto path = temp_path("selfdescribing.afck");
  save(init(c, 2), path);
  EXPECT_EQ(load(path).config, c);
}

TEST(Checkpoint, MissingFile) {
  EXPECT_THROW(load(temp_path("does-not-exist.afck")), FormatError);
}

}  // namespace
}  // namespace adhoc_fusion
