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

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "conmim/data/augment.hpp"
#include "conmim/data/mask.hpp"
#include "conmim/data/ppm.hpp"
#include "conmim/data/synth.hpp"

namespace {

using namespace conmim;
using data::ImageRecord;

std::vector<std::uint8_t> bytes(const std::string& s) { return {s.begin(), s.end()}; }

TEST(Ppm, SingleRedPixel) {
  auto b = bytes("P6\n1 1\n255\n");
  b.insert(b.end(), {255, 0, 0});
  const auto img = data::load_ppm(b);
  EXPECT_EQ(img.height(), 1u);
  EXPECT_EQ(img.at(0, 0, 0), 1.f);
  EXPECT_EQ(img.at(0, 0, 1), 0.f);
  EXPECT_EQ(img.at(0, 0, 2), 0.f);
}

TEST(Ppm, RejectsAsciiVariant) {
  try {
    data::load_ppm(bytes("P3\n1 1\n255\n255 0 0\n"));
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("not P6"), std::string::npos);
  }
}

TEST(Ppm, TruncationReportsByteCounts) {
  auto b = bytes("P6\n2 2\n255\n");
  b.insert(b.end(), {1, 2, 3, 4, 5});
  try {
    data::load_ppm(b);
    FAIL();
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("expected 12"), std::string::npos) << msg;
    EXPECT_NE(msg.find("got 5"), std::string::npos) << msg;
  }
}

TEST(Ppm, HeaderCommentsAreSkipped) {
  auto b = bytes("P6\n# made by hand\n1 1\n255\n");
  b.insert(b.end(), {0, 51, 255});
  EXPECT_FLOAT_EQ(data::load_ppm(b).at(0, 0, 1), 0.2f);
}

TEST(Ppm, MinimalFilesRoundTripByteForByte) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t w = 1 + rng.below(9), h = 1 + rng.below(9);
    auto b = bytes("P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n");
    for (std::size_t i = 0; i < w * h * 3; ++i) b.push_back(static_cast<std::uint8_t>(rng.below(256)));
    EXPECT_EQ(data::write_ppm(data::load_ppm(b)), b);
  }
}

TEST(Manifest, WriteThenReadPreservesPixelsAndLabels) {
  const auto dir = std::filesystem::temp_directory_path() / "conmim_manifest_test";
  std::filesystem::remove_all(dir);
  const auto images = data::synth_dataset(10, 4, 8, 3);
  data::write_dataset(dir, images);
  const auto back = data::read_manifest(dir / "manifest.tsv");
  ASSERT_EQ(back.size(), images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    EXPECT_EQ(back[i].label, images[i].label);
    for (std::size_t j = 0; j < images[i].pixels.size(); ++j)
      EXPECT_NEAR(back[i].pixels[j], images[i].pixels[j], 0.5 / 255 + 1e-6);
  }
  std::filesystem::remove_all(dir);
}

TEST(Synth, Deterministic) {
  const auto a = data::synth_dataset(50, 8, 32, 7), b = data::synth_dataset(50, 8, 32, 7);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(nd::bit_equal(a[i].pixels, b[i].pixels));
    EXPECT_EQ(a[i].label, b[i].label);
  }
  EXPECT_FALSE(nd::bit_equal(a[0].pixels, data::synth_dataset(1, 8, 32, 8)[0].pixels));
}

TEST(Synth, PixelsInUnitRange) {
  for (const auto& img : data::synth_dataset(200, 8, 32, 9)) EXPECT_TRUE(data::in_unit_range(img));
}

TEST(Synth, LabelHistogramIsBalanced) {
  const auto images = data::synth_dataset(8000, 8, 8, 10);
  std::vector<int> hist(8);
  for (const auto& img : images) ++hist[static_cast<std::size_t>(*img.label)];
  for (int h : hist) EXPECT_NEAR(h, 1000, 50);
}

TEST(Synth, RejectsTooFewOrTooManyClasses) {
  EXPECT_THROW(data::synth_dataset(4, 1, 8, 0), std::invalid_argument);
  EXPECT_THROW(data::synth_dataset(4, 9, 8, 0), std::invalid_argument);
}

TEST(Mask, CountsAreExact) {
  EXPECT_EQ(data::masked_count(196, 0.75), 147u);
  EXPECT_EQ(data::masked_count(64, 0.75), 48u);
  for (auto strat : {data::MaskStrategy::random, data::MaskStrategy::block})
    for (double r : {0.1, 0.4, 0.6, 0.75, 0.9})
      for (std::uint64_t seed = 0; seed < 30; ++seed)
        EXPECT_EQ(data::sample_mask(64, strat, r, seed).popcount(), data::masked_count(64, r));
  EXPECT_EQ(data::sample_mask(196, data::MaskStrategy::random, 0.75, 1).popcount(), 147u);
}

TEST(Mask, RatioOutsideOpenIntervalThrows) {
  EXPECT_THROW(data::sample_mask(64, data::MaskStrategy::random, 0.0, 1), std::invalid_argument);
  EXPECT_THROW(data::sample_mask(64, data::MaskStrategy::random, 1.0, 1), std::invalid_argument);
  EXPECT_THROW(data::sample_mask(63, data::MaskStrategy::block, 0.5, 1), std::invalid_argument);
}

TEST(Mask, BlockMasksAreSpatiallyClustered) {
  // A masked cell in a block mask has more masked 4-neighbours on average
  // than in a random mask at the same ratio.
  auto neighbours = [](const data::MaskPattern& m) {
    double total = 0, cells = 0;
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        if (!m.flags[y * 8 + x]) continue;
        cells += 1;
        const int d[4][2] = {{0, 1}, {1, 0}, {0, -1}, {-1, 0}};
        for (auto& o : d) {
          const int yy = y + o[0], xx = x + o[1];
          if (yy >= 0 && yy < 8 && xx >= 0 && xx < 8) total += m.flags[yy * 8 + xx];
        }
      }
    return total / cells;
  };
  double block = 0, random = 0;
  for (std::uint64_t s = 0; s < 200; ++s) {
    block += neighbours(data::sample_mask(64, data::MaskStrategy::block, 0.4, s));
    random += neighbours(data::sample_mask(64, data::MaskStrategy::random, 0.4, s));
  }
  EXPECT_GT(block, random * 1.3);
}

TEST(Augment, FlipIsAnInvolution) {
  const auto img = data::synth_dataset(1, 8, 16, 11)[0];
  EXPECT_TRUE(nd::bit_equal(data::hflip(data::hflip(img)).pixels, img.pixels));
}

TEST(Augment, SolarizeLeavesDarkImageAlone) {
  ImageRecord img = data::blank_image(4, 4);
  data::solarize(img, 0.5f);
  for (float v : img.pixels.values()) EXPECT_EQ(v, 0.f);
}

TEST(Augment, ViewsAlignWithoutPhotometricOps) {
  const auto images = data::synth_dataset(20, 8, 32, 12);
  data::AugConfig cfg;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto p = data::augment_pair(images[i], 100 + i, cfg, false);
    EXPECT_TRUE(nd::bit_equal(p.full_view.pixels, p.corrupted_view_base.pixels));
    EXPECT_EQ(p.mask.popcount(), 48u);
  }
}

TEST(Augment, PhotometricOpsTouchOnlyTheFullView) {
  const auto img = data::synth_dataset(1, 8, 32, 13)[0];
  data::AugConfig cfg;
  const auto plain = data::augment_pair(img, 5, cfg, false);
  const auto strong = data::augment_pair(img, 5, cfg, true);
  EXPECT_TRUE(nd::bit_equal(plain.corrupted_view_base.pixels, strong.corrupted_view_base.pixels));
  EXPECT_FALSE(nd::bit_equal(plain.full_view.pixels, strong.full_view.pixels));
  EXPECT_EQ(plain.mask.flags, strong.mask.flags);
  EXPECT_TRUE(data::in_unit_range(strong.full_view));
}

TEST(Augment, SwitchedVariantMovesTheStrongOps) {
  const auto img = data::synth_dataset(1, 8, 32, 14)[0];
  data::AugConfig cfg;
  cfg.full_strong = false;
  cfg.corrupted_strong = true;
  const auto p = data::augment_pair(img, 6, cfg, true);
  const auto plain = data::augment_pair(img, 6, cfg, false);
  EXPECT_TRUE(nd::bit_equal(p.full_view.pixels, plain.full_view.pixels));
  EXPECT_FALSE(nd::bit_equal(p.corrupted_view_base.pixels, plain.corrupted_view_base.pixels));
}

TEST(Augment, CropWindowStaysInsideSource) {
  Rng rng(15);
  data::AugConfig cfg;
  for (int i = 0; i < 1000; ++i) {
    const auto g = data::sample_geom(rng, 32, 32, cfg);
    EXPECT_GE(g.x0, 0);
    EXPECT_GE(g.y0, 0);
    EXPECT_LE(g.x0 + g.w, 32);
    EXPECT_LE(g.y0 + g.h, 32);
    EXPECT_GE(g.w * g.h, 0.2 * 32 * 32 * 0.9);
  }
}

TEST(Augment, FullFrameCropIsIdentity) {
  const auto img = data::synth_dataset(1, 8, 32, 16)[0];
  data::Geom g{false, 0, 0, 32, 32};
  EXPECT_TRUE(nd::bit_equal(data::apply_geom(img, g, 32).pixels, img.pixels));
  g.flip = true;
  EXPECT_TRUE(nd::bit_equal(data::apply_geom(img, g, 32).pixels, data::hflip(img).pixels));
}

TEST(Augment, JitterFactorsOfOneAreNoOps) {
  auto img = data::synth_dataset(1, 8, 16, 17)[0];
  const auto ref = img.pixels.clone();
  data::adjust_brightness(img, 1.f);
  EXPECT_TRUE(nd::bit_equal(img.pixels, ref));
  data::adjust_saturation(img, 1.f);
  data::adjust_hue(img, 0.f);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(img.pixels[i], ref[i], 1e-6);
}

}  // namespace
