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
#include <vector>

#include "conmim/vit/encoder.hpp"

namespace {

using namespace conmim;
using nd::Tensor;

vit::ViTConfig tiny() {
  vit::ViTConfig c;
  c.image_side = 8;
  c.patch_side = 4;
  c.depth = 2;
  c.dim = 16;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.proj_depth = 3;
  return c;
}

Tensor<float> random_images(std::size_t n, const vit::ViTConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> t({n, c.num_patches(), c.patch_dim()});
  for (auto& v : t.mutable_values()) v = static_cast<float>(rng.uniform());
  return t;
}

TEST(Config, RejectsIndivisibleShapes) {
  vit::ViTConfig c;
  c.patch_side = 5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.heads = 5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_EQ(vit::ViTConfig{}.num_patches(), 64u);
}

TEST(Patchify, EightByEightIntoFourPatches) {
  const auto c = tiny();
  const auto p = vit::patchify(Tensor<float>({8, 8, 3}), c);
  EXPECT_EQ(p.shape(), (nd::Shape{4, 48}));
}

TEST(Patchify, ConstantImageGivesIdenticalRows) {
  const auto c = tiny();
  const auto p = vit::patchify(Tensor<float>::full({8, 8, 3}, 0.25f), c);
  for (std::size_t r = 1; r < 4; ++r)
    for (std::size_t j = 0; j < 48; ++j) EXPECT_EQ(p[r * 48 + j], p[j]);
}

TEST(Patchify, RasterOrderAndRoundTrip) {
  const auto c = tiny();
  Tensor<float> img({8, 8, 3});
  for (std::size_t i = 0; i < img.size(); ++i) img.mutable_data()[i] = static_cast<float>(i);
  const auto p = vit::patchify(img, c);
  // Patch 1 is the top-right 4x4 block; its first pixel is (0, 4).
  EXPECT_EQ(p[48], img[(0 * 8 + 4) * 3]);
  EXPECT_TRUE(nd::bit_equal(vit::unpatchify(p, c), img));
  EXPECT_THROW(vit::patchify(Tensor<float>({8, 4, 3}), c), nd::ShapeError);
}

TEST(Init, DeterministicPerSeed) {
  const auto c = tiny();
  EXPECT_TRUE(vit::bit_equal(vit::init_params<float>(c, 1), vit::init_params<float>(c, 1)));
  EXPECT_FALSE(vit::bit_equal(vit::init_params<float>(c, 1), vit::init_params<float>(c, 2)));
}

TEST(Init, BiasesZeroWeightsTruncated) {
  const auto ps = vit::init_params<float>(tiny(), 3);
  for (const auto& [name, t] : ps) {
    if (name.ends_with(".bias"))
      for (float v : t.values()) EXPECT_EQ(v, 0.f) << name;
    if (name.ends_with("qkv.weight"))
      for (float v : t.values()) EXPECT_LE(std::abs(v), 0.04f + 1e-7f) << name;
  }
}

TEST(Encode, RandomInitActivationsAreSane) {
  vit::ViTConfig c;  // desk default
  const auto ps = vit::init_params<float>(c, 4);
  const auto x = random_images(2, c, 5);
  const auto r = vit::encode(ps, x, {}, c);
  EXPECT_EQ(r.patch_features.shape(), (nd::Shape{2, 64, 96}));
  EXPECT_EQ(r.cls.shape(), (nd::Shape{2, 96}));
  EXPECT_TRUE(r.patch_features.all_finite());
  for (float v : r.patch_features.values()) EXPECT_LT(std::abs(v), 10.f);
}

TEST(Encode, NoMaskNeverUsesMaskToken) {
  const auto c = tiny();
  auto ps = vit::init_params<float>(c, 6);
  const auto x = random_images(2, c, 7);
  const auto before = vit::embed(ps, x, {}, c);
  for (auto& v : ps.at("mask_token").mutable_values()) v = 123.f;
  EXPECT_TRUE(nd::bit_equal(before, vit::embed(ps, x, {}, c)));
}

TEST(Encode, AllMaskedIsMaskTokenPlusPositions) {
  const auto c = tiny();
  const auto ps = vit::init_params<float>(c, 8);
  const auto x = random_images(1, c, 9);
  const std::vector<std::uint8_t> mask(c.num_patches(), 1);
  const auto e = vit::embed(ps, x, mask, c);
  const auto& tok = ps.at("mask_token");
  const auto& pos = ps.at("pos_embed");
  for (std::size_t k = 0; k < c.num_patches(); ++k)
    for (std::size_t d = 0; d < c.dim; ++d)
      EXPECT_EQ(e[(1 + k) * c.dim + d], tok[d] + pos[(1 + k) * c.dim + d]);
}

TEST(Encode, MaskLengthMismatchThrows) {
  const auto c = tiny();
  const auto ps = vit::init_params<float>(c, 8);
  const std::vector<std::uint8_t> mask(3, 1);
  EXPECT_THROW(vit::encode(ps, random_images(1, c, 1), mask, c), std::invalid_argument);
}

TEST(Encode, MaskedContentCannotLeak) {
  for (auto mode : {vit::MaskingMode::embedding, vit::MaskingMode::pixel}) {
    auto c = tiny();
    c.masking = mode;
    const auto ps = vit::init_params<float>(c, 10);
    const auto a = random_images(2, c, 11);
    auto b = a.clone();
    const std::vector<std::uint8_t> mask = {1, 0, 0, 1, 0, 1, 1, 0};
    Rng rng(12);
    for (std::size_t r = 0; r < mask.size(); ++r)
      if (mask[r])
        for (std::size_t j = 0; j < c.patch_dim(); ++j) b.mutable_data()[r * c.patch_dim() + j] = static_cast<float>(rng.uniform());
    const auto ra = vit::encode(ps, a, mask, c), rb = vit::encode(ps, b, mask, c);
    EXPECT_TRUE(nd::bit_equal(ra.patch_features, rb.patch_features));
    EXPECT_TRUE(nd::bit_equal(ra.cls, rb.cls));
  }
}

TEST(Encode, AttentionRowsSumToOne) {
  const auto c = tiny();
  const auto ps = vit::init_params<float>(c, 13);
  const auto r = vit::encode(ps, random_images(3, c, 14), {}, c, true);
  ASSERT_EQ(r.attention.size(), c.depth);
  const std::size_t t = c.num_tokens();
  for (const auto& a : r.attention) {
    EXPECT_EQ(a.shape(), (nd::Shape{3, c.heads, t, t}));
    for (std::size_t row = 0; row < a.size() / t; ++row) {
      double s = 0;
      for (std::size_t j = 0; j < t; ++j) s += a[row * t + j];
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
  }
  EXPECT_TRUE(vit::encode(ps, random_images(1, c, 14), {}, c).attention.empty());
}

TEST(Head, IdentityLayerIsIdentity) {
  auto c = tiny();
  c.proj_depth = 1;
  auto ps = vit::init_params<float>(c, 15);
  auto& w = ps.at("head.0.weight");
  for (std::size_t i = 0; i < w.size(); ++i) w.mutable_data()[i] = (i / c.dim == i % c.dim) ? 1.f : 0.f;
  const auto x = random_images(1, c, 16).view_as({4, 3, 16}).clone();
  const auto y = vit::project_head(ps, x, c);
  EXPECT_TRUE(nd::bit_equal(x, y));
  c.proj_depth = 0;
  EXPECT_THROW(vit::project_head(ps, x, c), std::invalid_argument);
}

TEST(Head, PreservesLeadingAxes) {
  const auto c = tiny();
  const auto ps = vit::init_params<float>(c, 17);
  EXPECT_EQ(vit::project_head(ps, Tensor<float>({2, 5, 16}), c).shape(), (nd::Shape{2, 5, 16}));
}

TEST(Head, GradientReachesHeadOnQueryBranchOnly) {
  const auto c = tiny();
  const auto pair = vit::EncoderPair<float>::synced(vit::init_params<float>(c, 18));
  const auto x = random_images(2, c, 19);
  nd::Tape<float> tape;
  Tensor<float> keys;
  {
    nd::NoTapeScope<float> off;
    keys = vit::project_head(pair.theta_tilde, vit::encode(pair.theta_tilde, x, {}, c).patch_features, c);
  }
  nd::TapeScope<float> scope(tape);
  const auto fast = pair.theta.bind(tape);
  const auto q = vit::project_head(fast, vit::encode(fast, x, {}, c).patch_features, c);
  tape.backward(nd::sum(nd::mul(q, keys)));
  double head_norm = 0;
  for (float g : tape.grad(fast.at("head.2.weight")).values()) head_norm += std::abs(g);
  EXPECT_GT(head_norm, 0.0);
  for (const auto& [name, t] : pair.theta_tilde) EXPECT_FALSE(tape.references_storage(t.data())) << name;
}

TEST(Pair, CongruentAndSyncedCopies) {
  auto pair = vit::EncoderPair<float>::synced(vit::init_params<float>(tiny(), 20));
  EXPECT_TRUE(pair.congruent());
  EXPECT_TRUE(vit::bit_equal(pair.theta, pair.theta_tilde));
  EXPECT_FALSE(pair.theta.at("pos_embed").same_storage(pair.theta_tilde.at("pos_embed")));
}

}  // namespace
