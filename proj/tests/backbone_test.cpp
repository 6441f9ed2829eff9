#include "promptseg/backbone.hpp"

#include "promptseg/checkpoint.hpp"
#include "promptseg/errors.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <filesystem>

namespace promptseg {
namespace {

using testing::random_matrix;

ImageTensor random_image(int size, std::mt19937_64& rng) {
  ImageTensor img = ImageTensor::zeros(size, size);
  std::uniform_real_distribution<double> u(0, 1);
  for (Index i = 0; i < img.data.size(); ++i) img.data.data()[i] = u(rng);
  return img;
}

TEST(GeometryPreset, NamedPresets) {
  const auto p = GeometryPreset::paper();
  EXPECT_EQ(p.input_size, 1024);
  EXPECT_EQ(p.embed_channels, 256);
  EXPECT_EQ(p.embed_grid, 64);
  EXPECT_EQ(p.mask_prompt_size, 256);
  const auto d = GeometryPreset::desk();
  EXPECT_EQ(d.input_size, 256);
  EXPECT_EQ(d.embed_channels, 128);
  EXPECT_EQ(d.embed_grid, 16);
  EXPECT_EQ(d.mask_prompt_size, 64);
  for (const auto& g : {p, d}) {
    EXPECT_EQ(g.input_size, GeometryPreset::kPatchSize * g.embed_grid);
    EXPECT_EQ(g.mask_prompt_size, 4 * g.embed_grid);
    EXPECT_EQ(g.token_dim(), g.embed_channels);
    EXPECT_NO_THROW(g.validate());
  }
  EXPECT_EQ(GeometryPreset::by_name("desk"), d);
  EXPECT_THROW(GeometryPreset::by_name("laptop"), ConfigError);
}

class DeskBackbone : public ::testing::Test {
 protected:
  GeometryPreset g = GeometryPreset::desk();
  Backbone bb{g, 3};
  std::mt19937_64 rng{17};
};

TEST_F(DeskBackbone, EncodeShapeAndDeterminism) {
  const ImageTensor img = random_image(g.input_size, rng);
  const ImageEmbedding a = bb.encode_image(img);
  EXPECT_EQ(a.grid, 16);
  EXPECT_EQ(a.data.rows(), 128);
  EXPECT_EQ(a.data.cols(), 256);
  EXPECT_TRUE(a.data.allFinite());
  const ImageEmbedding b = bb.encode_image(img);
  EXPECT_EQ(a.data, b.data);
}

TEST_F(DeskBackbone, EncodeRejectsWrongSize) {
  try {
    bb.encode_image(ImageTensor::zeros(128, 128));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("256"), std::string::npos);
    EXPECT_NE(msg.find("128"), std::string::npos);
  }
}

TEST_F(DeskBackbone, PromptTokenArithmetic) {
  ManualPrompts p;
  p.points.push_back({0.3, 0.4, PointLabel::foreground});
  p.boxes.push_back({0.1, 0.1, 0.5, 0.6});
  const PromptEmbeddings e = bb.encode_manual_prompts(p);
  EXPECT_EQ(e.sparse.rows(), 3);
  EXPECT_EQ(e.sparse.cols(), 128);
  EXPECT_EQ(e.dense.rows(), 128);
  EXPECT_EQ(e.dense.cols(), 256);

  for (int pts = 0; pts < 4; ++pts)
    for (int boxes = 0; boxes < 4; ++boxes) {
      ManualPrompts q;
      for (int i = 0; i < pts; ++i) q.points.push_back({0.1 * i, 0.5, PointLabel::background});
      for (int i = 0; i < boxes; ++i) q.boxes.push_back({0.1, 0.1, 0.2 + 0.1 * i, 0.9});
      EXPECT_EQ(bb.encode_manual_prompts(q).sparse.rows(), pts + 2 * boxes);
      EXPECT_EQ(static_cast<int>(q.sparse_token_count()), pts + 2 * boxes);
    }
}

TEST_F(DeskBackbone, EmptyPromptsUseNoMaskEmbedding) {
  const PromptEmbeddings e = bb.encode_manual_prompts(ManualPrompts{});
  EXPECT_EQ(e.sparse.rows(), 0);
  EXPECT_EQ(e.dense.value(), bb.prompt_encoder().no_mask_dense().value());
}

TEST_F(DeskBackbone, BrushMaskResolution) {
  ManualPrompts p;
  p.brush_mask = BinaryMask(64, 64);
  p.brush_mask->at(10, 10) = 1;
  const PromptEmbeddings e = bb.encode_manual_prompts(p);
  EXPECT_EQ(e.dense.rows(), 128);
  EXPECT_EQ(e.dense.cols(), 256);
  EXPECT_NE(e.dense.value(), bb.prompt_encoder().no_mask_dense().value());
  p.brush_mask = BinaryMask(32, 32);
  EXPECT_THROW(bb.encode_manual_prompts(p), InputError);
}

TEST_F(DeskBackbone, InvalidPromptsRejected) {
  ManualPrompts p;
  p.boxes.push_back({0.5, 0.1, 0.4, 0.6});
  EXPECT_THROW(bb.encode_manual_prompts(p), InputError);
  ManualPrompts q;
  q.points.push_back({1.2, 0.5, PointLabel::foreground});
  EXPECT_THROW(bb.encode_manual_prompts(q), InputError);
}

TEST_F(DeskBackbone, DecoderClosureOverTokenCounts) {
  const ImageEmbedding emb = bb.encode_image(random_image(g.input_size, rng));
  const ag::Var dense = bb.prompt_encoder().no_mask_dense();
  for (int k = 0; k <= 16; ++k) {
    const ag::Var sparse = ag::constant(random_matrix(k, 128, rng));
    const SegmentationResult r = bb.decode_mask(emb, sparse, dense);
    EXPECT_EQ(r.mask_logits.rows(), 256);
    EXPECT_EQ(r.mask_logits.cols(), 256);
    EXPECT_EQ(r.prompt_tokens, k);
    EXPECT_EQ(r.decoder_tokens, k + MaskDecoder::kOutputTokens);
    EXPECT_TRUE(std::isfinite(r.objectness_logit));
  }
}

TEST_F(DeskBackbone, ResultThresholdInvariants) {
  const ImageEmbedding emb = bb.encode_image(random_image(g.input_size, rng));
  const SegmentationResult r =
      bb.decode_mask(emb, ag::constant(random_matrix(3, 128, rng)), bb.prompt_encoder().no_mask_dense());
  for (Index i = 0; i < r.mask_logits.size(); ++i)
    ASSERT_EQ(r.mask.pixels[static_cast<std::size_t>(i)], r.mask_logits.data()[i] > 0.0 ? 1 : 0);
  EXPECT_EQ(r.object_present, r.objectness_logit >= 0.0);
}

TEST_F(DeskBackbone, DecoderRejectsWrongTokenWidth) {
  const ImageEmbedding emb = bb.encode_image(random_image(g.input_size, rng));
  EXPECT_THROW(bb.decode_mask(emb, ag::constant(random_matrix(2, 64, rng)), bb.prompt_encoder().no_mask_dense()),
               InputError);
}

TEST_F(DeskBackbone, DecodeIsBitwiseDeterministic) {
  const ImageEmbedding emb = bb.encode_image(random_image(g.input_size, rng));
  const ag::Var sparse = ag::constant(random_matrix(5, 128, rng));
  const auto a = bb.decode_mask(emb, sparse, bb.prompt_encoder().no_mask_dense());
  const auto b = bb.decode_mask(emb, sparse, bb.prompt_encoder().no_mask_dense());
  EXPECT_EQ(a.mask_logits, b.mask_logits);
  EXPECT_EQ(a.objectness_logit, b.objectness_logit);
}

TEST_F(DeskBackbone, SaveLoadRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "promptseg_backbone_roundtrip.ckpt";
  save_backbone(path, bb);
  const ExternalBackbone ext = load_external_weights(path);
  EXPECT_TRUE(ext.unmapped.empty());
  EXPECT_EQ(ext.geometry, g);
  const ImageTensor img = random_image(g.input_size, rng);
  const ImageEmbedding a = bb.encode_image(img), b = ext.backbone->encode_image(img);
  EXPECT_EQ(a.data, b.data);
  ManualPrompts p;
  p.boxes.push_back({0.2, 0.2, 0.7, 0.8});
  const auto ea = bb.encode_manual_prompts(p), eb = ext.backbone->encode_manual_prompts(p);
  EXPECT_EQ(bb.decode_mask(a, ea.sparse, ea.dense).mask_logits,
            ext.backbone->decode_mask(b, eb.sparse, eb.dense).mask_logits);
  std::filesystem::remove(path);
}

TEST(PaperBackbone, PublishedShapes) {
  const GeometryPreset g = GeometryPreset::paper();
  Backbone bb(g, 1);
  std::mt19937_64 rng(2);
  const ImageEmbedding e = bb.encode_image(random_image(1024, rng));
  EXPECT_EQ(e.data.rows(), 256);
  EXPECT_EQ(e.data.cols(), 64 * 64);
  ManualPrompts p;
  p.brush_mask = BinaryMask(256, 256);
  const PromptEmbeddings pe = bb.encode_manual_prompts(p);
  EXPECT_EQ(pe.dense.rows(), 256);
  EXPECT_EQ(pe.dense.cols(), 64 * 64);
  const SegmentationResult r = bb.decode_mask(e, pe.sparse, pe.dense);
  EXPECT_EQ(r.mask_logits.rows(), 1024);
  EXPECT_EQ(r.mask_logits.cols(), 1024);
}

}  // namespace
}  // namespace promptseg
