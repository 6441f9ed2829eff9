#include "promptseg/data.hpp"

#include "promptseg/errors.hpp"
#include "promptseg/image_io.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

namespace promptseg {
namespace {

namespace fs = std::filesystem;

Sample blank_sample(int h, int w, int classes = 1) {
  Sample s;
  s.id = "s";
  s.image = ImageTensor::zeros(h, w);
  s.masks.assign(static_cast<std::size_t>(classes), BinaryMask(h, w));
  s.record = PadRecord{h, w, h, w, std::max(h, w), 1.0, 1.0};
  s.refresh_present();
  return s;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("promptseg_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(ResizePad, LongSideScaledAndPadded) {
  Sample s = blank_sample(500, 1000);
  s.image.data.setConstant(1.0);
  s.masks[0].at(499, 999) = 1;
  const Sample r = resize_pad(s, 1024);
  EXPECT_EQ(r.image.height, 1024);
  EXPECT_EQ(r.image.width, 1024);
  EXPECT_EQ(r.record.content_height, 512);
  EXPECT_EQ(r.record.content_width, 1024);
  EXPECT_EQ(r.masks[0].height, 1024);
  EXPECT_NEAR(r.image.at(0, 511, 1023), 1.0, 1e-12);
  for (int y = 512; y < 1024; y += 37) EXPECT_EQ(r.image.at(0, y, 5), 0.0);
  EXPECT_EQ(r.masks[0].at(511, 1023), 1);
  EXPECT_TRUE(r.present[0]);
}

TEST(ResizePad, SquareImageHasNoPadding) {
  Sample s = blank_sample(100, 100);
  s.image.data.setConstant(0.5);
  const Sample r = resize_pad(s, 256);
  EXPECT_EQ(r.record.content_height, 256);
  EXPECT_EQ(r.record.content_width, 256);
  EXPECT_NEAR(r.image.data.minCoeff(), 0.5, 1e-12);
}

TEST(ResizePad, EmptyImageIsInputError) { EXPECT_THROW(resize_pad(blank_sample(0, 0), 256), InputError); }

TEST(ResizePad, InverseMappingOfPointsAndBoxes) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  for (auto [h, w] : {std::pair{240, 320}, std::pair{333, 97}, std::pair{1000, 1000}}) {
    const Sample r = resize_pad(blank_sample(h, w), 256);
    const PadRecord& rec = r.record;
    for (int i = 0; i < 1000; ++i) {
      const double x = u(rng) * rec.content_width, y = u(rng) * rec.content_height;
      const double ox = rec.to_original_x(x), oy = rec.to_original_y(y);
      EXPECT_NEAR(rec.to_model_x(ox), x, 0.5);
      EXPECT_NEAR(rec.to_model_y(oy), y, 0.5);
      EXPECT_LE(ox, w + 1e-9);
      EXPECT_LE(oy, h + 1e-9);
    }
    for (int i = 0; i < 100; ++i) {
      double x1 = u(rng) * w, x2 = u(rng) * w, y1 = u(rng) * h, y2 = u(rng) * h;
      if (x1 > x2) std::swap(x1, x2);
      if (y1 > y2) std::swap(y1, y2);
      const Box b{x1, y1, x2, y2};
      const Box n = rec.to_model_normalized(b);
      EXPECT_GE(n.x1, 0.0);
      EXPECT_LE(n.x2, 1.0);
      const Box back = rec.to_original_pixels(n);
      EXPECT_NEAR(back.x1, b.x1, 0.5);
      EXPECT_NEAR(back.y1, b.y1, 0.5);
      EXPECT_NEAR(back.x2, b.x2, 0.5);
      EXPECT_NEAR(back.y2, b.y2, 0.5);
    }
  }
}

Sample model_space_sample(std::uint64_t seed) {
  return resize_pad(synth_generate(seed, 1, 0.0).front(), 256);
}

TEST(Augment, SameSeedSameOutput) {
  const Sample s = model_space_sample(3);
  const Sample a = augment(s, AugmentationPolicy{}, 99), b = augment(s, AugmentationPolicy{}, 99);
  EXPECT_EQ(a.image.data, b.image.data);
  EXPECT_EQ(a.masks[0], b.masks[0]);
}

TEST(Augment, ZeroProbabilityPolicyIsBitwiseIdentity) {
  const Sample s = model_space_sample(4);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Sample a = augment(s, AugmentationPolicy::none(), seed);
    EXPECT_EQ(a.image.data, s.image.data);
    EXPECT_EQ(a.masks[0], s.masks[0]);
  }
}

TEST(Augment, HorizontalFlipMirrorsColumns) {
  Sample s = blank_sample(256, 256);
  s.masks[0].at(10, 3) = 1;
  s.masks[0].at(200, 100) = 1;
  s.refresh_present();
  AugmentationPolicy p = AugmentationPolicy::none();
  p.p_flip_h = 1.0;
  const Sample a = augment(s, p, 5);
  EXPECT_EQ(a.masks[0].at(10, 252), 1);
  EXPECT_EQ(a.masks[0].at(200, 155), 1);
  EXPECT_EQ(a.masks[0].count(), 2u);
}

TEST(Augment, ImageAndMaskShareTheTransform) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> pos(20, 235);
  AugmentationPolicy policy;
  policy.image_interpolation = Interpolation::nearest;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Sample s = blank_sample(256, 256);
    for (int i = 0; i < 30; ++i) {
      const int y = pos(rng), x = pos(rng);
      s.masks[0].at(y, x) = 1;
      for (int c = 0; c < 3; ++c) s.image.at(c, y, x) = 1.0;
    }
    s.refresh_present();
    const Sample a = augment(s, policy, seed);
    std::size_t inter = 0, uni = 0;
    for (int y = 0; y < 256; ++y)
      for (int x = 0; x < 256; ++x) {
        const bool in_img = a.image.at(0, y, x) > 0.5, in_mask = a.masks[0].at(y, x) != 0;
        inter += in_img && in_mask;
        uni += in_img || in_mask;
      }
    EXPECT_EQ(inter, uni) << "seed " << seed;
    EXPECT_EQ(a.present[0], !a.masks[0].empty());
  }
}

TEST(Augment, PresentFlagNeverTrueForEmptyMask) {
  Sample s = blank_sample(256, 256);
  s.masks[0].at(1, 1) = 1;  // near a corner: rotation or translation can drop it
  s.refresh_present();
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const Sample a = augment(s, AugmentationPolicy{}, seed);
    if (a.masks[0].empty()) EXPECT_FALSE(a.present[0]);
    else EXPECT_TRUE(a.present[0]);
  }
}

TEST(Augment, InvalidPolicyRejected) {
  AugmentationPolicy p;
  p.p_rotate = 1.5;
  EXPECT_THROW(p.validate(), ConfigError);
}

TEST(Affine, InverseComposesToIdentity) {
  const Affine a = draw_augmentation(AugmentationPolicy{}, 256, 256, 12);
  EXPECT_TRUE(a.then(a.inverse()).is_identity());
}

TEST(Synth, EmptyFractionIsExact) {
  const Dataset d = synth_generate(7, 50);
  ASSERT_EQ(d.size(), 50u);
  int empty = 0;
  for (const auto& s : d) empty += !s.present[0];
  EXPECT_EQ(empty, 10);
}

TEST(Synth, DeterministicInSeed) {
  const Dataset a = synth_generate(11, 5), b = synth_generate(11, 5);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].id, b[i].id);
    EXPECT_EQ(a[i].image.data, b[i].image.data);
    EXPECT_EQ(a[i].masks[0], b[i].masks[0]);
  }
  EXPECT_NE(synth_generate(12, 1, 0.0)[0].image.data, a[0].image.data);
}

TEST(Synth, ForegroundFractionBoundsOverManySeeds) {
  double lo = 1.0, hi = 0.0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const Sample s = synth_generate(seed, 1, 0.0).front();
    ASSERT_TRUE(s.present[0]);
    const double f = static_cast<double>(s.masks[0].count()) / s.masks[0].pixels.size();
    lo = std::min(lo, f);
    hi = std::max(hi, f);
  }
  EXPECT_GE(lo, 0.01);
  EXPECT_LE(hi, 0.40);
}

TEST(Synth, MultiClassBandsAreSeparate) {
  const Dataset d = synth_generate(2, 4, 0.0, SynthOptions{240, 320, 3});
  for (const auto& s : d) {
    ASSERT_EQ(s.num_classes(), 3);
    for (std::size_t i = 0; i < s.masks[0].pixels.size(); ++i)
      EXPECT_LE(s.masks[0].pixels[i] + s.masks[1].pixels[i] + s.masks[2].pixels[i], 1);
  }
}

TEST(Synth, ImageValuesInUnitRange) {
  for (const auto& s : synth_generate(5, 10)) {
    EXPECT_GE(s.image.data.minCoeff(), 0.0);
    EXPECT_LE(s.image.data.maxCoeff(), 1.0);
  }
}

TEST(DatasetIo, SaveLoadRoundTrip) {
  const fs::path root = fresh_dir("roundtrip");
  const Dataset d = synth_generate(1, 3, 0.0, SynthOptions{60, 80, 2});
  save_dataset(d, root);
  const Dataset back = load_dataset(root, 2);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].id, d[i].id);
    EXPECT_EQ(back[i].masks[0], d[i].masks[0]);
    EXPECT_EQ(back[i].masks[1], d[i].masks[1]);
    EXPECT_LT((back[i].image.data - d[i].image.data).cwiseAbs().maxCoeff(), 0.5 / 255 + 1e-12);
  }
  fs::remove_all(root);
}

TEST(DatasetIo, SplitFileSelectsStems) {
  const fs::path root = fresh_dir("split");
  save_dataset(synth_generate(1, 3, 0.0, SynthOptions{32, 32, 1}), root);
  std::ofstream(root / "split.txt") << "synth_00002\nsynth_00000\n";
  const Dataset d = load_dataset(root, 1, root / "split.txt");
  ASSERT_EQ(d.size(), 2u);
  std::ofstream(root / "bad.txt") << "synth_00042\n";
  EXPECT_THROW(load_dataset(root, 1, root / "bad.txt"), LoadError);
  fs::remove_all(root);
}

TEST(DatasetIo, ImageWithoutMaskNamesTheStem) {
  const fs::path root = fresh_dir("unpaired");
  save_dataset(synth_generate(1, 2, 0.0, SynthOptions{32, 32, 1}), root);
  fs::remove(root / "masks" / "synth_00001.png");
  try {
    load_dataset(root, 1);
    FAIL() << "expected LoadError";
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("synth_00001"), std::string::npos);
  }
  fs::remove_all(root);
}

TEST(DatasetIo, MaskValueAboveClassCountRejected) {
  const fs::path root = fresh_dir("range");
  save_dataset(synth_generate(1, 1, 0.0, SynthOptions{32, 32, 2}), root);
  try {
    load_dataset(root, 1);
    FAIL() << "expected LoadError";
  } catch (const LoadError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2"), std::string::npos);
    EXPECT_NE(msg.find("1"), std::string::npos);
  }
  fs::remove_all(root);
}

TEST(DatasetIo, ThreePairsGiveThreeSamples) {
  const fs::path root = fresh_dir("three");
  save_dataset(synth_generate(9, 3, 0.0, SynthOptions{40, 40, 1}), root);
  EXPECT_EQ(load_dataset(root, 1).size(), 3u);
  fs::remove_all(root);
}

TEST(MixSeed, DistinctStreams) {
  EXPECT_NE(mix_seed(1, 0), mix_seed(1, 1));
  EXPECT_NE(mix_seed(1, 0), mix_seed(2, 0));
  EXPECT_EQ(mix_seed(5, 9), mix_seed(5, 9));
}

}  // namespace
}  // namespace promptseg
