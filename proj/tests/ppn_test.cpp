#include "promptseg/ppn.hpp"

#include "gradcheck.hpp"
#include "promptseg/errors.hpp"
#include "promptseg/losses.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

namespace promptseg {
namespace {

using testing::random_matrix;

ImageEmbedding random_embedding(const GeometryPreset& g, std::mt19937_64& rng) {
  return ImageEmbedding{g.embed_grid, random_matrix(g.embed_channels, g.grid_cells(), rng)};
}

TEST(PositionalEncoding, AdditiveAndInputIndependent) {
  const GeometryPreset g = GeometryPreset::desk();
  const ImageEmbedding zero{g.embed_grid, Matrix::Zero(g.embed_channels, g.grid_cells())};
  const Matrix p = add_positional_encoding(zero).data;
  EXPECT_EQ(p, grid_positional_encoding(g.embed_channels, g.embed_grid));
  std::mt19937_64 rng(1);
  for (int i = 0; i < 2; ++i) {
    const ImageEmbedding e = random_embedding(g, rng);
    EXPECT_LT((add_positional_encoding(e).data - e.data - p).cwiseAbs().maxCoeff(), 1e-12);
  }
  EXPECT_NE(p.col(0), p.col(1));
  EXPECT_NE(p.col(0), p.col(g.embed_grid));
}

class DeskPredictor : public ::testing::Test {
 protected:
  GeometryPreset g = GeometryPreset::desk();
  std::mt19937_64 rng{9};
  nn::Rng init{4};
  PromptPredictor ppn{g, 3, 8, init};
};

TEST_F(DeskPredictor, TwoWayAttentionPreservesShapes) {
  const auto [t, img] = ppn.two_way_attention(ag::constant(random_matrix(8, 128, rng)),
                                              ag::constant(random_matrix(256, 128, rng)));
  EXPECT_EQ(t.rows(), 8);
  EXPECT_EQ(t.cols(), 128);
  EXPECT_EQ(img.rows(), 256);
  EXPECT_EQ(img.cols(), 128);
  EXPECT_THROW(ppn.two_way_attention(ag::constant(random_matrix(8, 64, rng)), ag::constant(random_matrix(256, 128, rng))),
               InputError);
}

TEST_F(DeskPredictor, AttentionRowsSumToOne) {
  const Matrix w = ppn.token_attention_weights(random_matrix(8, 128, rng), random_matrix(256, 128, rng));
  EXPECT_EQ(w.rows(), 8 * PromptPredictor::kHeads);
  EXPECT_EQ(w.cols(), 256);
  for (Index r = 0; r < w.rows(); ++r) EXPECT_NEAR(w.row(r).sum(), 1.0, 1e-6);
  EXPECT_GE(w.minCoeff(), 0.0);
}

TEST(BoxFromRaw, MidpointOfSquashing) {
  const Matrix b = box_from_raw(ag::constant(Matrix::Zero(1, 4))).value();
  EXPECT_NEAR(b(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(b(0, 1), 0.25, 1e-15);
  EXPECT_NEAR(b(0, 2), 0.75, 1e-15);
  EXPECT_NEAR(b(0, 3), 0.75, 1e-15);
}

TEST(BoxFromRaw, AlwaysValidEvenWhenSizeCollapses) {
  std::mt19937_64 rng(12);
  for (int i = 0; i < 1000; ++i) {
    const Matrix b = box_from_raw(ag::constant(random_matrix(1, 4, rng, 5.0))).value();
    EXPECT_GE(b(0, 0), 0.0);
    EXPECT_LT(b(0, 0), b(0, 2));
    EXPECT_LE(b(0, 2), 1.0);
    EXPECT_GE(b(0, 1), 0.0);
    EXPECT_LT(b(0, 1), b(0, 3));
    EXPECT_LE(b(0, 3), 1.0);
  }
  for (double cx : {-40.0, 0.0, 40.0}) {
    Matrix raw(1, 4);
    raw << cx, -cx, -60.0, -60.0;  // w, h → 0⁺
    const Matrix b = box_from_raw(ag::constant(raw)).value();
    EXPECT_GE(b(0, 2) - b(0, 0), kMinBoxSide - 1e-15);
    EXPECT_GE(b(0, 3) - b(0, 1), kMinBoxSide - 1e-15);
    EXPECT_NO_THROW(giou(Box{b(0, 0), b(0, 1), b(0, 2), b(0, 3)}, Box{0, 0, 1, 1}));
  }
}

TEST_F(DeskPredictor, MaskPromptHeadShape) {
  const Matrix m = ppn.mask_prompt_head(ag::constant(random_matrix(256, 128, rng))).value();
  EXPECT_EQ(m.rows(), 1);
  EXPECT_EQ(m.cols(), 64 * 64);
  EXPECT_TRUE(m.allFinite());
}

TEST_F(DeskPredictor, PredictSplitsTokens) {
  const PromptBundle b = to_bundle(ppn.predict(random_embedding(g, rng), 0));
  EXPECT_EQ(b.dense_prompt_tokens.rows(), 6);
  EXPECT_EQ(b.dense_prompt_tokens.cols(), 128);
  EXPECT_EQ(b.mask_prompt.cols(), 64 * 64);
  EXPECT_LT(b.box.x1, b.box.x2);
  EXPECT_LT(b.box.y1, b.box.y2);
}

TEST_F(DeskPredictor, ClassesHaveIndependentBanks) {
  const ImageEmbedding e = random_embedding(g, rng);
  const PromptBundle a = to_bundle(ppn.predict(e, 0)), b = to_bundle(ppn.predict(e, 1));
  EXPECT_NE(a.dense_prompt_tokens, b.dense_prompt_tokens);
  EXPECT_NE(a.box, b.box);
  EXPECT_THROW(ppn.predict(e, 3), InputError);
  EXPECT_THROW(ppn.predict(e, -1), InputError);
}

TEST_F(DeskPredictor, UpdatingOneClassLeavesOthersBitwiseUnchanged) {
  const ImageEmbedding e = random_embedding(g, rng);
  const PromptBundle before = to_bundle(ppn.predict(e, 2));
  ppn.token_bank().tokens(0).value += random_matrix(8, 128, rng);
  const PromptBundle after = to_bundle(ppn.predict(e, 2));
  EXPECT_EQ(before.box, after.box);
  EXPECT_EQ(before.dense_prompt_tokens, after.dense_prompt_tokens);
  EXPECT_EQ(before.mask_prompt, after.mask_prompt);
}

TEST_F(DeskPredictor, PositionalEncodingIsLoadBearing) {
  const ImageEmbedding e = random_embedding(g, rng);
  const PromptBundle with = to_bundle(ppn.predict(e, 0));
  const PromptBundle without = to_bundle(ppn.predict_without_positional_encoding(e, 0));
  EXPECT_NE(with.box, without.box);
  EXPECT_NE(with.mask_prompt, without.mask_prompt);
}

TEST(ModelTokens, GradientReachesOnlyTheQueriedClass) {
  Model model(ModelConfig{GeometryPreset::desk(), 3, 8}, 5);
  const Dataset data = to_model_space(synth_generate(5, 1, 0.0, SynthOptions{240, 320, 3}), model.geometry());
  const ImageEmbedding emb = model.backbone().encode_image(data[0].image);
  ASSERT_TRUE(data[0].present[1]);
  ag::backward(sample_loss(model, emb, data[0], 1, LossWeights{}).total);
  const auto& bank = model.ppn().token_bank();
  ASSERT_TRUE(bank.tokens(1).has_grad());
  EXPECT_GT(bank.tokens(1).grad.norm(), 0.0);
  for (int k : {0, 2}) EXPECT_TRUE(!bank.tokens(k).has_grad() || bank.tokens(k).grad.isZero(0.0));
}

TEST(ModelTokens, DecoderTokenArithmetic) {
  Model model(ModelConfig{}, 6);
  std::mt19937_64 rng(6);
  const ImageEmbedding e = random_embedding(model.geometry(), rng);
  const SegmentationResult plain = model.segment_embedding(e, 0);
  EXPECT_EQ(plain.prompt_tokens, 2 + 6);
  EXPECT_EQ(plain.decoder_tokens, 2 + 6 + MaskDecoder::kOutputTokens);
  ManualPrompts box;
  box.boxes.push_back({0.1, 0.1, 0.4, 0.4});
  EXPECT_EQ(model.segment_embedding(e, 0, box).prompt_tokens, 2 + 6 + 2);
  EXPECT_EQ(plain.object_present, plain.objectness_logit >= 0.0);
}

// Shape suite over both presets and several token counts.
class PresetShapes : public ::testing::TestWithParam<std::tuple<std::string, int>> {};

TEST_P(PresetShapes, BundleAndTokenArithmetic) {
  const auto [preset, n] = GetParam();
  const GeometryPreset g = GeometryPreset::by_name(preset);
  Model model(ModelConfig{g, 1, n}, 8);
  std::mt19937_64 rng(8);
  const ImageEmbedding e = random_embedding(g, rng);
  const PromptBundle b = to_bundle(model.ppn().predict(e, 0));
  EXPECT_EQ(b.dense_prompt_tokens.rows(), n - 2);
  EXPECT_EQ(b.dense_prompt_tokens.cols(), g.embed_channels);
  EXPECT_EQ(b.mask_prompt.rows(), 1);
  EXPECT_EQ(b.mask_prompt.cols(), (4 * g.embed_grid) * (4 * g.embed_grid));
  const SegmentationResult r = model.segment_embedding(e, 0);
  EXPECT_EQ(r.prompt_tokens, n);
  EXPECT_EQ(r.decoder_tokens, n + MaskDecoder::kOutputTokens);
  EXPECT_EQ(r.mask_logits.rows(), g.input_size);
}

INSTANTIATE_TEST_SUITE_P(Presets, PresetShapes,
                         ::testing::Combine(::testing::Values("desk", "paper"), ::testing::Values(3, 8, 16)));

TEST(ModelTokens, TooFewTokensRejected) {
  EXPECT_THROW(Model(ModelConfig{GeometryPreset::desk(), 1, 2}, 0), ConfigError);
}

TEST(EndToEndGradient, RandomPredictorScalars) {
  for (const auto& p : testing::ppn_gradient_probes(31, 10))
    EXPECT_LT(p.rel_error, 1e-3) << p.name << "[" << p.index << "] analytic " << p.analytic << " fd " << p.numeric;
}

}  // namespace
}  // namespace promptseg
