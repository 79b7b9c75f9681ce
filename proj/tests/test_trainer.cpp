// Copyright 2026 The ConMIM Lab Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <vector>

#include "conmim/data/synth.hpp"
#include "conmim/trainer/checkpoint.hpp"
#include "conmim/trainer/pretrain.hpp"

namespace {

using namespace conmim;
using train::ScheduleKind;

vit::ViTConfig tiny() {
  vit::ViTConfig c;
  c.image_side = 8;
  c.patch_side = 2;
  c.depth = 2;
  c.dim = 16;
  c.heads = 2;
  c.mlp_ratio = 2;
  return c;
}

train::TrainConfig small_run(train::Objective o = train::Objective::conmim) {
  train::TrainConfig t;
  t.epochs = 2;
  t.batch_size = 4;
  t.seed = 5;
  t.objective = o;
  return t;
}

TEST(Schedule, Endpoints) {
  train::TrainConfig cfg;
  const train::ScheduleState s0{0, 12500, 1250}, sw{1250, 12500, 1250}, st{12500, 12500, 1250};
  EXPECT_EQ(train::schedule_value(ScheduleKind::lr, s0, cfg), 0.0);
  EXPECT_EQ(train::schedule_value(ScheduleKind::lr, sw, cfg), cfg.peak_lr);
  EXPECT_EQ(train::schedule_value(ScheduleKind::lr, st, cfg), cfg.min_lr);
  EXPECT_EQ(train::schedule_value(ScheduleKind::momentum, s0, cfg), 0.996);
  EXPECT_EQ(train::schedule_value(ScheduleKind::momentum, st, cfg), 1.0);
}

TEST(Schedule, WarmupIsLinearAndDecayMonotone) {
  train::TrainConfig cfg;
  double prev = 2.0;
  for (std::int64_t t = 0; t <= 1000; ++t) {
    const double lr = train::schedule_value(ScheduleKind::lr, {t, 1000, 100}, cfg);
    if (t <= 100) EXPECT_NEAR(lr, cfg.peak_lr * t / 100.0, 1e-15);
    else EXPECT_LE(lr, prev);
    prev = lr;
    const double a = train::schedule_value(ScheduleKind::momentum, {t, 1000, 100}, cfg);
    EXPECT_GE(a, 0.996 - 1e-15);
    EXPECT_LE(a, 1.0);
  }
}

TEST(Schedule, MomentumMidpoint) {
  train::TrainConfig cfg;
  EXPECT_NEAR(train::schedule_value(ScheduleKind::momentum, {6250, 12500, 1250}, cfg), 0.998, 1e-12);
}

TEST(Schedule, WarmupCoveringTheRunThrows) {
  train::TrainConfig cfg;
  EXPECT_THROW(train::schedule_value(ScheduleKind::lr, {0, 100, 100}, cfg), std::invalid_argument);
  EXPECT_THROW(train::schedule_value(ScheduleKind::lr, {101, 100, 10}, cfg), std::invalid_argument);
}

TEST(Schedule, DefaultWarmupIsTenPercent) {
  train::TrainConfig cfg;
  const auto s = train::make_schedule(cfg, 125);
  EXPECT_EQ(s.total_steps, 12500);
  EXPECT_EQ(s.warmup_steps, 1250);
}

TEST(Optim, DecayExemptions) {
  EXPECT_TRUE(train::decays("blocks.0.attn.qkv.weight"));
  EXPECT_TRUE(train::decays("patch_embed.weight"));
  EXPECT_FALSE(train::decays("blocks.0.attn.qkv.bias"));
  EXPECT_FALSE(train::decays("blocks.1.norm1.weight"));
  EXPECT_FALSE(train::decays("norm.weight"));
  EXPECT_FALSE(train::decays("mask_token"));
  EXPECT_FALSE(train::decays("mask_token_pixel"));
}

TEST(Optim, FirstAdamStepMatchesHandComputation) {
  vit::ParamSet<double> p, g;
  p.add("w.weight", nd::Tensor<double>(nd::Shape{2}, {1.0, -2.0}));
  p.add("w.bias", nd::Tensor<double>(nd::Shape{1}, {0.5}));
  g.add("w.weight", nd::Tensor<double>(nd::Shape{2}, {0.3, -0.4}));
  g.add("w.bias", nd::Tensor<double>(nd::Shape{1}, {2.0}));
  auto st = train::AdamState<double>::zeros_like(p);
  train::TrainConfig cfg;
  cfg.grad_clip = 0;
  const double lr = 0.01;
  train::adamw_step(p, g, st, lr, cfg);
  // Bias-corrected first step moves each coordinate by lr * sign(g) (up to eps).
  auto expect = [&](double w, double gi, bool decay) {
    const double m = 0.1 * gi / 0.1, v = 0.02 * gi * gi / 0.02;
    return w * (decay ? 1 - lr * 0.05 : 1.0) - lr * m / (std::sqrt(v) + 1e-8);
  };
  EXPECT_NEAR(p.at("w.weight")[0], expect(1.0, 0.3, true), 1e-12);
  EXPECT_NEAR(p.at("w.weight")[1], expect(-2.0, -0.4, true), 1e-12);
  EXPECT_NEAR(p.at("w.bias")[0], expect(0.5, 2.0, false), 1e-12);
}

TEST(Optim, ClippingRescalesToTheCap) {
  vit::ParamSet<double> g;
  g.add("a.weight", nd::Tensor<double>(nd::Shape{2}, {3.0, 4.0}));
  EXPECT_DOUBLE_EQ(train::global_norm(g), 5.0);
  vit::ParamSet<double> p1, p2;
  p1.add("a.weight", nd::Tensor<double>(nd::Shape{2}, {0.0, 0.0}));
  p2.add("a.weight", nd::Tensor<double>(nd::Shape{2}, {0.0, 0.0}));
  vit::ParamSet<double> g2;
  g2.add("a.weight", nd::Tensor<double>(nd::Shape{2}, {0.3, 0.4}));
  auto s1 = train::AdamState<double>::zeros_like(p1), s2 = train::AdamState<double>::zeros_like(p2);
  train::TrainConfig cfg;
  cfg.grad_clip = 0.5;
  EXPECT_DOUBLE_EQ(train::adamw_step(p1, g, s1, 0.1, cfg), 5.0);
  cfg.grad_clip = 0;
  train::adamw_step(p2, g2, s2, 0.1, cfg);
  // After clipping to 0.5 the moments are a 10x scaled copy of g2's, so the
  // first step agrees up to the eps term.
  EXPECT_NEAR(s1.m.at("a.weight")[0], 0.5 * s2.m.at("a.weight")[0] / 0.5, 1e-6);
}

TEST(Optim, NonFiniteGradientNamesTheParameterInStrictMode) {
  vit::ParamSet<double> p, g;
  p.add("x.weight", nd::Tensor<double>({1}));
  g.add("x.weight", nd::Tensor<double>(nd::Shape{1}, {std::nan("")}));
  auto st = train::AdamState<double>::zeros_like(p);
  nd::StrictScope strict;
  try {
    train::adamw_step(p, g, st, 0.1, train::TrainConfig{});
    FAIL();
  } catch (const nd::NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("x.weight"), std::string::npos);
  }
}

TEST(Optim, EmaInterpolates) {
  vit::ParamSet<double> a;
  a.add("w", nd::Tensor<double>(nd::Shape{1}, {1.0}));
  auto pair = vit::EncoderPair<double>::synced(a.clone());
  pair.theta.at("w").mutable_data()[0] = 3.0;
  train::ema_update(pair, 0.75);
  EXPECT_DOUBLE_EQ(pair.theta_tilde.at("w")[0], 1.5);
  train::ema_update(pair, 1.0);
  EXPECT_DOUBLE_EQ(pair.theta_tilde.at("w")[0], 1.5);
}

TEST(Optim, EmaEndpoints) {
  vit::ParamSet<double> a;
  a.add("w", nd::Tensor<double>(nd::Shape{3}, {0.0, 0.0, 0.0}));
  auto pair = vit::EncoderPair<double>::synced(a.clone());
  for (auto& x : pair.theta.at("w").mutable_values()) x = 1.0;
  train::ema_update(pair, 1.0);
  EXPECT_EQ(pair.theta_tilde.at("w")[0], 0.0);
  train::ema_update(pair, 0.996);
  EXPECT_NEAR(pair.theta_tilde.at("w")[1], 0.004, 1e-15);
  train::ema_update(pair, 0.0);
  EXPECT_TRUE(nd::bit_equal(pair.theta_tilde.at("w"), pair.theta.at("w")));
}

TEST(Optim, ZeroGradientWithoutDecayIsANoOp) {
  vit::ParamSet<double> p, g;
  p.add("w.weight", nd::Tensor<double>(nd::Shape{3}, {1.0, -2.0, 0.25}));
  g.add("w.weight", nd::Tensor<double>(nd::Shape{3}));
  const auto before = p.at("w.weight").clone();
  auto st = train::AdamState<double>::zeros_like(p);
  train::TrainConfig cfg;
  cfg.weight_decay = 0;
  for (int i = 0; i < 3; ++i) train::adamw_step(p, g, st, 0.01, cfg);
  EXPECT_TRUE(nd::bit_equal(p.at("w.weight"), before));
}

TEST(Optim, UnitGradientFirstStepMovesByLr) {
  vit::ParamSet<double> p, g;
  p.add("w.weight", nd::Tensor<double>(nd::Shape{1}, {0.7}));
  g.add("w.weight", nd::Tensor<double>(nd::Shape{1}, {1.0}));
  auto st = train::AdamState<double>::zeros_like(p);
  train::TrainConfig cfg;
  cfg.weight_decay = 0;
  cfg.grad_clip = 0;
  train::adamw_step(p, g, st, 0.01, cfg);
  EXPECT_NEAR(p.at("w.weight")[0], 0.7 - 0.01, 1e-9);
}

TEST(Optim, DecayAloneScalesWeights) {
  vit::ParamSet<double> p, g;
  p.add("w.weight", nd::Tensor<double>(nd::Shape{2}, {2.0, -4.0}));
  g.add("w.weight", nd::Tensor<double>(nd::Shape{2}));
  auto st = train::AdamState<double>::zeros_like(p);
  train::TrainConfig cfg;
  train::adamw_step(p, g, st, 0.1, cfg);
  const double f = 1 - 0.1 * cfg.weight_decay;
  EXPECT_DOUBLE_EQ(p.at("w.weight")[0], 2.0 * f);
  EXPECT_DOUBLE_EQ(p.at("w.weight")[1], -4.0 * f);
}

template <class T>
train::Batch<T> tiny_batch(const vit::ViTConfig& v, const train::TrainConfig& cfg, std::uint64_t seed,
                           const obj::TokenizerCodebook* cb = nullptr) {
  const auto images = data::synth_dataset(cfg.batch_size, 4, v.image_side, seed);
  const auto acfg = train::aug_config(v, cfg);
  std::vector<data::AugPair> pairs;
  for (std::size_t i = 0; i < images.size(); ++i) pairs.push_back(data::augment_pair(images[i], seed + i, acfg));
  return train::make_batch<T>(pairs, v, cb);
}

class ObjectiveTest : public ::testing::TestWithParam<train::Objective> {};

TEST_P(ObjectiveTest, AuditedStepLeavesNoGradientOnTheKeyBranch) {
  const auto v = tiny();
  auto cfg = small_run(GetParam());
  cfg.audit_stop_gradient = true;
  cfg.vocab = 8;
  auto theta = vit::init_params<double>(v, 1);
  train::add_objective_params(theta, v, cfg);
  auto pair = vit::EncoderPair<double>::synced(std::move(theta));
  auto adam = train::AdamState<double>::zeros_like(pair.theta);
  train::ScheduleState state{0, 10, 1};
  std::optional<obj::TokenizerCodebook> cb;
  if (GetParam() == train::Objective::beit)
    cb = train::fit_tokenizer<double>(data::synth_dataset(8, 4, v.image_side, 2), v, cfg);
  for (int s = 0; s < 3; ++s) {
    const auto batch = tiny_batch<double>(v, cfg, 40 + s, cb ? &*cb : nullptr);
    const auto before = pair.theta_tilde.clone();
    EXPECT_NO_THROW(train::train_step(pair, adam, batch, v, cfg, obj::LossConfig{}, state));
    EXPECT_TRUE(std::isfinite(adam.m.at("patch_embed.weight")[0]));
    // The slow twin only moves through the EMA.
    const double alpha = train::schedule_value(ScheduleKind::momentum, {s, 10, 1}, cfg);
    for (const auto& [name, t] : pair.theta_tilde)
      EXPECT_NEAR(t[0], alpha * before.at(name)[0] + (1 - alpha) * pair.theta.at(name)[0], 1e-12) << name;
  }
  EXPECT_EQ(state.step, 3);
}

INSTANTIATE_TEST_SUITE_P(Objectives, ObjectiveTest,
                         ::testing::Values(train::Objective::conmim, train::Objective::instance,
                                           train::Objective::patch_nomask, train::Objective::beit),
                         [](const auto& info) { return std::string(train::objective_name(info.param)); });

TEST(Step, FirstLossIsNearLogKAndThetaMoves) {
  const auto v = tiny();
  const auto cfg = small_run();
  auto pair = vit::EncoderPair<float>::synced(vit::init_params<float>(v, 3));
  const auto before = pair.theta.clone();
  auto adam = train::AdamState<float>::zeros_like(pair.theta);
  train::ScheduleState state{1, 10, 1};
  const auto rep = train::train_step(pair, adam, tiny_batch<float>(v, cfg, 11), v, cfg, obj::LossConfig{}, state);
  const double log_k = std::log(static_cast<double>(v.num_patches()));
  EXPECT_GE(rep.loss.value, 0.5 * log_k);
  EXPECT_LE(rep.loss.value, 1.5 * log_k);
  bool moved = false;
  for (const auto& [name, t] : pair.theta) moved = moved || !nd::bit_equal(t, before.at(name));
  EXPECT_TRUE(moved);
}

TEST(Step, MomentumSyncCopiesTheta) {
  const auto v = tiny();
  auto cfg = small_run();
  cfg.momentum_sync = true;
  auto pair = vit::EncoderPair<float>::synced(vit::init_params<float>(v, 1));
  auto adam = train::AdamState<float>::zeros_like(pair.theta);
  train::ScheduleState state{0, 10, 1};
  train::train_step(pair, adam, tiny_batch<float>(v, cfg, 9), v, cfg, obj::LossConfig{}, state);
  train::train_step(pair, adam, tiny_batch<float>(v, cfg, 10), v, cfg, obj::LossConfig{}, state);
  for (const auto& [name, t] : pair.theta) EXPECT_TRUE(nd::bit_equal(t, pair.theta_tilde.at(name))) << name;
}

TEST(Step, MomentumTwinIsTheEmaFoldOfTheTrajectory) {
  const auto v = tiny();
  const auto cfg = small_run();
  auto pair = vit::EncoderPair<float>::synced(vit::init_params<float>(v, 2));
  auto adam = train::AdamState<float>::zeros_like(pair.theta);
  train::ScheduleState state{0, 8, 1};
  // Replay in double from the captured theta after each step.
  std::map<std::string, std::vector<double>> fold;
  for (const auto& [name, t] : pair.theta) fold[name].assign(t.values().begin(), t.values().end());
  for (std::int64_t s = 0; s < 8; ++s) {
    const auto rep = train::train_step(pair, adam, tiny_batch<float>(v, cfg, 60 + s), v, cfg, obj::LossConfig{}, state);
    for (auto& [name, acc] : fold) {
      const auto theta = pair.theta.at(name).values();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = rep.alpha * acc[i] + (1 - rep.alpha) * theta[i];
    }
  }
  for (const auto& [name, acc] : fold) {
    const auto got = pair.theta_tilde.at(name).values();
    for (std::size_t i = 0; i < acc.size(); ++i)
      ASSERT_NEAR(got[i], acc[i], 1e-6 * std::max(1.0, std::abs(acc[i]))) << name << "[" << i << "]";
  }
}

TEST(Pretrain, DeterministicHistoryAndWeights) {
  const auto v = tiny();
  const auto images = data::synth_dataset(12, 4, v.image_side, 3);
  const auto a = train::pretrain<float>(images, v, small_run(), obj::LossConfig{});
  const auto b = train::pretrain<float>(images, v, small_run(), obj::LossConfig{});
  ASSERT_EQ(a.history.size(), 6u);
  for (std::size_t i = 0; i < a.history.size(); ++i) EXPECT_EQ(a.history[i].loss, b.history[i].loss);
  for (const auto& [name, t] : a.pair.theta) EXPECT_TRUE(nd::bit_equal(t, b.pair.theta.at(name))) << name;
  EXPECT_EQ(a.history.back().wall_ms, 0.0);
}

TEST(Pretrain, MaxStepsStopsEarlyOnTheFullSchedule) {
  const auto v = tiny();
  const auto images = data::synth_dataset(12, 4, v.image_side, 3);
  auto cfg = small_run();
  cfg.max_steps = 4;
  const auto r = train::pretrain<float>(images, v, cfg, obj::LossConfig{});
  EXPECT_EQ(r.history.size(), 4u);
  EXPECT_EQ(r.state.total_steps, 6);
}

TEST(Pretrain, TooFewImagesThrows) {
  const auto v = tiny();
  EXPECT_THROW(train::pretrain<float>(data::synth_dataset(3, 4, v.image_side, 3), v, small_run(), obj::LossConfig{}),
               std::invalid_argument);
}

TEST(Pretrain, EpochOrderIsAPermutation) {
  auto o = train::epoch_order(100, 1, 3);
  std::sort(o.begin(), o.end());
  for (std::size_t i = 0; i < o.size(); ++i) EXPECT_EQ(o[i], i);
  EXPECT_NE(train::epoch_order(100, 1, 3), train::epoch_order(100, 1, 4));
}

train::Checkpoint<float> trained_checkpoint() {
  const auto v = tiny();
  auto r = train::pretrain<float>(data::synth_dataset(8, 4, v.image_side, 3), v, small_run(), obj::LossConfig{});
  return {std::move(r.pair), std::move(r.adam), r.state, "[model]\ndim = 16\n"};
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto ck = trained_checkpoint();
  const auto bytes = train::serialize_checkpoint(ck);
  const auto back = train::deserialize_checkpoint<float>(bytes);
  EXPECT_EQ(train::serialize_checkpoint(back), bytes);
  EXPECT_EQ(back.state.step, ck.state.step);
  EXPECT_EQ(back.adam.t, ck.adam.t);
  EXPECT_EQ(back.config, ck.config);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "conmim_ckpt_test.cmim";
  const auto ck = trained_checkpoint();
  train::save_checkpoint(ck, path);
  const auto back = train::load_checkpoint<float>(path);
  for (const auto& [name, t] : ck.pair.theta) EXPECT_TRUE(nd::bit_equal(t, back.pair.theta.at(name)));
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptionIsClassified) {
  auto bytes = train::serialize_checkpoint(trained_checkpoint());
  auto kind_of = [](const std::vector<std::uint8_t>& b) {
    try {
      train::deserialize_checkpoint<float>(b);
    } catch (const train::CheckpointError& e) {
      return e.kind();
    }
    ADD_FAILURE() << "no error";
    return train::CheckpointError::Kind::malformed;
  };
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_EQ(kind_of(bad), train::CheckpointError::Kind::bad_magic);
  bad = bytes;
  bad[4] = 9;
  EXPECT_EQ(kind_of(bad), train::CheckpointError::Kind::version);
  bad.assign(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(bytes.size() / 2));
  EXPECT_EQ(kind_of(bad), train::CheckpointError::Kind::truncated);
}

TEST(Checkpoint, PrecisionMismatchIsRejected) {
  const auto bytes = train::serialize_checkpoint(trained_checkpoint());
  EXPECT_THROW(train::deserialize_checkpoint<double>(bytes), train::CheckpointError);
}

}  // namespace
