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
#include <vector>

#include "adhoc_fusion/training.hpp"
#include "oracles.hpp"

namespace adhoc_fusion {
namespace {

using testing::random_matrix;

// In-memory embedding source: each utterance is a list of crops.
struct ToySource {
  std::vector<std::uint32_t> speakers;
  std::vector<std::vector<Matrix>> crops;

  std::size_t size() const { return speakers.size(); }
  std::uint32_t speaker_of(std::size_t i) const { return speakers[i]; }
  std::size_t crop_count() const { return crops.empty() ? 0 : crops[0].size(); }
  Matrix channel_matrix(std::size_t i, std::size_t crop) const { return crops[i][crop]; }
};
static_assert(EmbeddingSource<ToySource>);

// Speakers are random directions; channels are noisy copies.
ToySource toy_source(std::size_t speakers, std::size_t per_speaker, std::size_t d, SplitMix64& rng,
                     std::size_t channels = 3, std::size_t n_crops = 2) {
  ToySource s;
  for (std::uint32_t k = 0; k < speakers; ++k) {
    const Matrix proto = random_matrix(1, d, rng);
    for (std::size_t u = 0; u < per_speaker; ++u) {
      s.speakers.push_back(k);
      std::vector<Matrix> cs;
      for (std::size_t c = 0; c < n_crops; ++c) {
        Matrix x = random_matrix(channels, d, rng, 0.3);
        for (std::size_t i = 0; i < channels; ++i)
          for (std::size_t j = 0; j < d; ++j) x(i, j) += proto[j];
        cs.push_back(std::move(x));
      }
      s.crops.push_back(std::move(cs));
    }
  }
  return s;
}

ModelConfig toy_config() {
  ModelConfig c;
  c.d_in = 6;
  c.width = 4;
  c.heads = 2;
  c.layers = 1;
  c.ffn_hidden = 5;
  return c;
}

double loss_of(const std::vector<Matrix>& q, const std::vector<Matrix>& c, double w, double b) {
  GradTape t;
  std::vector<Var> qv, cv;
  for (const auto& m : q) qv.push_back(t.constant(m));
  for (const auto& m : c) cv.push_back(t.constant(m));
  return angular_prototypical_loss(qv, cv, t.constant(Matrix::scalar(w)), t.constant(Matrix::scalar(b)))
      .value()[0];
}

// Independent straight-line version of the loss.
double loss_reference(const std::vector<Matrix>& q, const std::vector<Matrix>& c, double w, double b) {
  const std::size_t n = q.size();
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> s(n);
    for (std::size_t k = 0; k < n; ++k) {
      double dot = 0.0, nq = 0.0, nc = 0.0;
      for (std::size_t t = 0; t < q[j].size(); ++t) {
        dot += q[j][t] * c[k][t];
        nq += q[j][t] * q[j][t];
        nc += c[k][t] * c[k][t];
      }
      s[k] = w * dot / std::sqrt(nq * nc) + b;
    }
    double denom = 0.0;
    for (double v : s) denom += std::exp(v);
    total -= std::log(std::exp(s[j]) / denom);
  }
  return total / static_cast<double>(n);
}

TEST(AngularPrototypicalLoss, OrthogonalPrototypes) {
  const std::vector<Matrix> c = {Matrix{{1.0, 0.0}}, Matrix{{0.0, 1.0}}};
  EXPECT_NEAR(loss_of(c, c, 1.0, 0.0), 0.31326168751822286, 1e-15);
}

TEST(AngularPrototypicalLoss, IdenticalEmbeddings) {
  const std::vector<Matrix> e(2, Matrix{{0.3, -1.2, 2.0}});
  EXPECT_NEAR(loss_of(e, e, 10.0, -5.0), std::log(2.0), 1e-15);
}

TEST(AngularPrototypicalLoss, MatchesStraightLineReference) {
  SplitMix64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Matrix> q, c;
    for (int j = 0; j < 4; ++j) {
      q.push_back(random_matrix(1, 5, rng));
      c.push_back(random_matrix(1, 5, rng));
    }
    const double w = 0.5 + 10.0 * rng.uniform(), b = rng.uniform(-5.0, 5.0);
    EXPECT_NEAR(loss_of(q, c, w, b), loss_reference(q, c, w, b), 1e-10);
  }
}

TEST(AngularPrototypicalLoss, RotationInvariance) {
  SplitMix64 rng(2);
  const Matrix r = testing::random_orthogonal(6, rng);
  std::vector<Matrix> q, c, qr, cr;
  for (int j = 0; j < 5; ++j) {
    q.push_back(random_matrix(1, 6, rng));
    c.push_back(random_matrix(1, 6, rng));
    qr.push_back(matmul(q.back(), r));
    cr.push_back(matmul(c.back(), r));
  }
  EXPECT_NEAR(loss_of(q, c, 10.0, -5.0), loss_of(qr, cr, 10.0, -5.0), 1e-9);
}

TEST(AngularPrototypicalLoss, ZeroEmbedding) {
  const std::vector<Matrix> q = {Matrix{{0.0, 0.0}}, Matrix{{1.0, 0.0}}};
  EXPECT_THROW(loss_of(q, q, 1.0, 0.0), NumericError);
}

TEST(AngularPrototypicalLoss, GradientMatchesFiniteDifferences) {
  SplitMix64 rng(3);
  std::vector<Matrix> q, c;
  for (int j = 0; j < 3; ++j) {
    q.push_back(random_matrix(1, 4, rng));
    c.push_back(random_matrix(1, 4, rng));
  }
  Matrix wb{{3.0, -1.0}};
  GradTape t;
  std::vector<Var> qv, cv;
  for (const auto& m : q) qv.push_back(t.parameter(m));
  for (const auto& m : c) cv.push_back(t.parameter(m));
  Var w = t.parameter(Matrix::scalar(wb[0]));
  Var b = t.parameter(Matrix::scalar(wb[1]));
  t.backward(angular_prototypical_loss(qv, cv, w, b));
  for (std::size_t j = 0; j < 3; ++j) {
    const Matrix fd = testing::finite_difference(q[j], [&] { return loss_of(q, c, wb[0], wb[1]); });
    for (std::size_t i = 0; i < 4; ++i) EXPECT_LT(testing::relative_error(t.grad(qv[j])[i], fd[i]), 1e-5);
  }
  const Matrix fd_wb = testing::finite_difference(wb, [&] { return loss_of(q, c, wb[0], wb[1]); });
  EXPECT_LT(testing::relative_error(t.grad(w)[0], fd_wb[0]), 1e-5);
  // A common shift of every logit cancels in the cross-entropy.
  EXPECT_NEAR(t.grad(b)[0], 0.0, 1e-15);
  EXPECT_NEAR(fd_wb[1], 0.0, 1e-9);
}

TEST(LossAndGradient, MatchesFiniteDifferencesThroughModel) {
  SplitMix64 rng(4);
  const ToySource data = toy_source(3, 3, 6, rng);
  for (NormMode mode : {NormMode::kSoftmax, NormMode::kSparsemax}) {
    ModelConfig c = toy_config();
    c.mode = mode;
    FusionModel m = init(c, 5);
    SamplingOptions so;
    so.batch_speakers = 3;
    so.utterances_per_group = 3;
    const TrainBatch batch = sample_epoch(data, so, 1).batches.at(0);
    ASSERT_EQ(batch.groups.size(), 3u);
    const auto lg = loss_and_gradient(m, data, batch);
    EXPECT_NEAR(lg.loss, batch_loss(m, data, batch), 0.0);
    auto f = [&] { return batch_loss(m, data, batch); };
    struct Probe {
      Matrix* p;
      const Matrix* g;
    };
    const Probe probes[] = {{&m.params.adapter, &lg.grad.adapter},
                            {&m.params.layers[0].heads[1].w_k, &lg.grad.layers[0].heads[1].w_k},
                            {&m.params.fusion.ffn_b2, &lg.grad.fusion.ffn_b2},
                            {&m.params.loss_scale, &lg.grad.loss_scale},
                            {&m.params.loss_bias, &lg.grad.loss_bias}};
    for (const auto& probe : probes) {
      const Matrix fd = testing::finite_difference(*probe.p, f);
      for (std::size_t i = 0; i < fd.size(); ++i) {
        EXPECT_LT(testing::relative_error((*probe.g)[i], fd[i], 1e-5), 1e-4) << i;
      }
    }
  }
}

TEST(LossAndGradient, IndependentOfThreadCount) {
  SplitMix64 rng(5);
  const ToySource data = toy_source(4, 2, 6, rng);
  const FusionModel m = init(toy_config(), 1);
  const TrainBatch batch = sample_epoch(data, {}, 9).batches.at(0);
  const auto a = loss_and_gradient(m, data, batch, 1);
  const auto b = loss_and_gradient(m, data, batch, 3);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.grad.adapter, b.grad.adapter);
  EXPECT_EQ(a.grad.fusion.w_o, b.grad.fusion.w_o);
}

FusionParams filled_like(const FusionParams& p, double v) {
  FusionParams out = p;
  visit_parameters(out, [&](const std::string&, Matrix& m) {
    for (auto& x : m.data()) x = v;
  });
  return out;
}

TEST(Adam, FirstStepMovesByLearningRate) {
  FusionModel m = init(toy_config(), 1);
  const FusionParams before = m.params;
  OptimizerState s = make_optimizer_state(m.params);
  adam_step(m.params, filled_like(m.params, 1.0), s, 1e-3);
  EXPECT_EQ(s.step, 1u);
  EXPECT_NEAR(m.params.loss_bias[0], before.loss_bias[0] - 1e-3, 1e-10);
  EXPECT_NEAR(m.params.adapter[3], before.adapter[3] - 1e-3, 1e-10);
}

TEST(Adam, ZeroGradientDecaysMoments) {
  FusionModel m = init(toy_config(), 1);
  OptimizerState s = make_optimizer_state(m.params);
  adam_step(m.params, filled_like(m.params, 2.0), s, 1e-3);
  const FusionParams after_first = m.params;
  const double m0 = s.first_moment[0][0], v0 = s.second_moment[0][0];
  EXPECT_NEAR(m0, 0.2, 1e-15);
  EXPECT_NEAR(v0, 0.004, 1e-15);
  adam_step(m.params, filled_like(m.params, 0.0), s, 0.0);
  EXPECT_EQ(m.params.adapter, after_first.adapter);
  EXPECT_NEAR(s.first_moment[0][0], 0.9 * m0, 1e-15);
  EXPECT_NEAR(s.second_moment[0][0], 0.999 * v0, 1e-15);
}

TEST(Adam, ZeroGradientFromFreshStateLeavesParameters) {
  FusionModel m = init(toy_config(), 1);
  const FusionParams before = m.params;
  OptimizerState s = make_optimizer_state(m.params);
  adam_step(m.params, filled_like(m.params, 0.0), s, 1e-3);
  EXPECT_EQ(m.params.adapter, before.adapter);
  EXPECT_EQ(m.params.fusion.w_o, before.fusion.w_o);
}

TEST(Adam, VanishingLearningRate) {
  FusionModel m = init(toy_config(), 1);
  const FusionParams before = m.params;
  OptimizerState s = make_optimizer_state(m.params);
  SplitMix64 rng(6);
  FusionParams g = m.params;
  visit_parameters(g, [&](const std::string&, Matrix& x) { x = random_matrix(x.rows(), x.cols(), rng); });
  adam_step(m.params, g, s, 1e-20);
  visit_parameters(m.params, [&, k = std::size_t{0}](const std::string&, const Matrix& p) mutable {
    std::size_t j = 0;
    visit_parameters(before, [&](const std::string&, const Matrix& q) {
      if (j++ == k) {
        EXPECT_LE(max_abs_diff(p, q), 1e-15);
      }
    });
    ++k;
  });
}

TEST(Adam, NonFiniteGradientAbortsWithoutChanges) {
  FusionModel m = init(toy_config(), 1);
  const FusionParams before = m.params;
  OptimizerState s = make_optimizer_state(m.params);
  FusionParams g = filled_like(m.params, 1.0);
  g.fusion.ffn_w1(0, 0) = std::nan("");
  EXPECT_THROW(adam_step(m.params, g, s, 1e-3), NumericError);
  EXPECT_EQ(s.step, 0u);
  EXPECT_EQ(m.params.adapter, before.adapter);
  EXPECT_EQ(s.first_moment[0], Matrix(6, 4));
}

TEST(Adam, LossScaleStaysPositive) {
  FusionModel m = init(toy_config(), 1);
  m.params.loss_scale[0] = 1e-4;
  OptimizerState s = make_optimizer_state(m.params);
  adam_step(m.params, filled_like(m.params, 1.0), s, 1.0);
  EXPECT_EQ(m.params.loss_scale[0], 1e-6);
}

TEST(LearningRate, StepDecay) {
  const AdamOptions opt;
  EXPECT_EQ(learning_rate(opt, 0), 1e-3);
  EXPECT_EQ(learning_rate(opt, 9), 1e-3);
  EXPECT_NEAR(learning_rate(opt, 10), 0.00095, 1e-18);
  EXPECT_NEAR(learning_rate(opt, 25), 1e-3 * 0.95 * 0.95, 1e-18);
}

TEST(SampleEpoch, CapsUtterancesPerSpeaker) {
  ToySource s;
  for (int i = 0; i < 150; ++i) s.speakers.push_back(0);
  for (int i = 0; i < 10; ++i) s.speakers.push_back(1);
  s.crops.assign(s.speakers.size(), {Matrix(1, 1, 1.0)});
  const EpochSample e = sample_epoch(s, {}, 3);
  EXPECT_EQ(e.sampled_per_speaker.at(0), 100u);
  EXPECT_EQ(e.sampled_per_speaker.at(1), 10u);
  std::size_t used0 = 0;
  for (const auto& b : e.batches) {
    std::vector<std::uint32_t> seen;
    for (const auto& g : b.groups) {
      EXPECT_EQ(std::count(seen.begin(), seen.end(), g.speaker), 0);
      seen.push_back(g.speaker);
      EXPECT_EQ(g.utterances.size(), 2u);
      if (g.speaker == 0) used0 += g.utterances.size();
    }
  }
  // Only 5 batches can pair speaker 0 with another speaker.
  EXPECT_EQ(used0, 10u);
}

TEST(SampleEpoch, SameSeedSameBatches) {
  SplitMix64 rng(7);
  const ToySource data = toy_source(40, 6, 2, rng);
  const EpochSample a = sample_epoch(data, {}, 11);
  const EpochSample b = sample_epoch(data, {}, 11);
  const EpochSample c = sample_epoch(data, {}, 12);
  ASSERT_EQ(a.batches.size(), b.batches.size());
  bool differs = false;
  for (std::size_t i = 0; i < a.batches.size(); ++i) {
    ASSERT_EQ(a.batches[i].groups.size(), b.batches[i].groups.size());
    EXPECT_EQ(a.batches[i].crops, b.batches[i].crops);
    for (std::size_t j = 0; j < a.batches[i].groups.size(); ++j) {
      EXPECT_EQ(a.batches[i].groups[j].utterances, b.batches[i].groups[j].utterances);
      if (i < c.batches.size() && j < c.batches[i].groups.size()) {
        differs |= a.batches[i].groups[j].utterances != c.batches[i].groups[j].utterances;
      }
    }
  }
  EXPECT_TRUE(differs);
  std::size_t total = 0;
  for (const auto& batch : a.batches) {
    EXPECT_LE(batch.groups.size(), 32u);
    total += batch.groups.size() * 2;
  }
  EXPECT_EQ(total, 240u);
}

TEST(SampleEpoch, SingleUtteranceSpeakerSkippedWithWarning) {
  ToySource s;
  s.speakers = {0, 0, 1, 1, 2};
  s.crops.assign(5, {Matrix(1, 1, 1.0)});
  ::testing::internal::CaptureStderr();
  const EpochSample e = sample_epoch(s, {}, 1);
  const std::string err = ::testing::internal::GetCapturedStderr();
  EXPECT_EQ(e.skipped_speakers, std::vector<std::uint32_t>{2});
  EXPECT_NE(err.find("speaker 2"), std::string::npos) << err;
  for (const auto& b : e.batches)
    for (const auto& g : b.groups) EXPECT_NE(g.speaker, 2u);
}

TEST(Train, OneEpochOnTwoSpeakersReducesLoss) {
  SplitMix64 rng(8);
  const ToySource data = toy_source(2, 8, 6, rng);
  FusionModel m = init(toy_config(), 3);
  TrainOptions opt;
  opt.epochs = 1;
  opt.adam.base_lr = 1e-2;
  const EpochSample sample = sample_epoch(data, opt.sampling, derive_seed(opt.seed, 0));
  double before = 0.0, after = 0.0;
  for (const auto& b : sample.batches) before += batch_loss(m, data, b);
  OptimizerState s;
  const auto history = train(m, data, opt, s);
  for (const auto& b : sample.batches) after += batch_loss(m, data, b);
  ASSERT_EQ(history.size(), 1u);
  EXPECT_EQ(history[0].epoch, 1);
  EXPECT_LT(after, before);
}

TEST(Train, ZeroEpochsLeavesModelUnchanged) {
  SplitMix64 rng(9);
  const ToySource data = toy_source(3, 4, 6, rng);
  FusionModel m = init(toy_config(), 3);
  const FusionModel before = m;
  TrainOptions opt;
  opt.epochs = 0;
  OptimizerState s;
  EXPECT_TRUE(train(m, data, opt, s).empty());
  EXPECT_EQ(m.params.adapter, before.params.adapter);
  EXPECT_EQ(m.params.fusion.w_o, before.params.fusion.w_o);
}

TEST(Train, DeterministicHistory) {
  SplitMix64 rng(10);
  const ToySource data = toy_source(6, 4, 6, rng);
  TrainOptions opt;
  opt.epochs = 3;
  opt.sampling.batch_speakers = 4;
  auto run = [&](std::size_t threads) {
    FusionModel m = init(toy_config(), 3);
    OptimizerState s;
    opt.threads = threads;
    std::vector<double> losses;
    for (const auto& e : train(m, data, opt, s)) losses.push_back(e.mean_loss);
    return std::pair{losses, m.params.adapter};
  };
  const auto a = run(1);
  const auto b = run(1);
  const auto c = run(2);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  SplitMix64 rng(11);
  const ToySource data = toy_source(6, 4, 6, rng);
  TrainOptions opt;
  opt.epochs = 4;
  opt.sampling.batch_speakers = 4;
  FusionModel full = init(toy_config(), 3);
  OptimizerState fs;
  const auto history = train(full, data, opt, fs);

  FusionModel part = init(toy_config(), 3);
  OptimizerState ps;
  opt.epochs = 2;
  train(part, data, opt, ps);
  Checkpoint ck = deserialize_checkpoint(serialize_checkpoint(Checkpoint{part, 2, ps}));
  const auto rest = train(ck.model, data, opt, *ck.optimizer, ck.epochs_completed);
  ASSERT_EQ(rest.size(), 2u);
  EXPECT_EQ(rest[0].epoch, 3);
  EXPECT_EQ(rest[1].mean_loss, history[3].mean_loss);
  EXPECT_EQ(ck.model.params.adapter, full.params.adapter);
}

TEST(Train, DivergenceRestoresLastGoodEpoch) {
  SplitMix64 rng(12);
  const ToySource data = toy_source(3, 4, 6, rng);
  FusionModel m = init(toy_config(), 3);
  TrainOptions opt;
  opt.epochs = 2;
  OptimizerState s;
  int callbacks = 0;
  FusionModel saved = m;
  train(m, data, opt, s, 0, [&](const EpochLog&, const FusionModel& model, const OptimizerState&) {
    ++callbacks;
    saved = model;
  });
  EXPECT_EQ(callbacks, 2);
  m.params.fusion.ffn_b2[0] = std::numeric_limits<double>::infinity();
  const FusionModel poisoned = m;
  try {
    train(m, data, opt, s, 2);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.last_good_epoch(), 2);
  }
  EXPECT_EQ(m.params.adapter, poisoned.params.adapter);
}

TEST(TrainOptionsJson, RoundTripAndUnknownKey) {
  TrainOptions t;
  t.epochs = 7;
  t.sampling.batch_speakers = 5;
  t.adam.base_lr = 0.01;
  t.seed = 42;
  TrainOptions back;
  update_from_json(back, to_json(t));
  EXPECT_EQ(to_json(back), to_json(t));
  EXPECT_THROW(update_from_json(back, {{"epoch", 3}}), ConfigError);
}

}  // namespace
}  // namespace adhoc_fusion
