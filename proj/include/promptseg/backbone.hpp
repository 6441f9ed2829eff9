#pragma once

// Toy promptable segmentation backbone: ViT-style image encoder, sparse and
// dense prompt encoder, and a two-way-attention mask decoder with an extra
// objectness output token. Shapes follow a GeometryPreset.

#include "promptseg/autograd.hpp"
#include "promptseg/geometry.hpp"
#include "promptseg/nn.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace promptseg {

/// Rearranges a 3×(S·S) image into (G·G) × (3·16·16) patch rows.
Matrix patchify(const ImageTensor& image, int patch_size);

/// Bilinear interpolation matrix mapping `in` samples to `out` samples
/// (half-pixel centers, edge clamped). Shape out × in.
Matrix bilinear_matrix(int out, int in);

class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(const GeometryPreset& geometry, nn::Rng& rng);

  /// Token form of the embedding, (G·G) × C.
  ag::Var forward(const ImageTensor& image) const;
  void collect(const std::string& prefix, nn::ParamList& out);

 private:
  struct Block {
    nn::LayerNorm norm1;
    nn::Attention attn;
    nn::LayerNorm norm2;
    nn::Mlp mlp;
  };

  GeometryPreset geometry_;
  nn::Linear patch_embed_;
  Matrix pos_tokens_;  // (G·G) × C, fixed
  std::vector<Block> blocks_;
  nn::Linear neck_;
  nn::LayerNorm neck_norm_;
};

/// Encoded prompts as consumed by the decoder.
struct PromptEmbeddings {
  ag::Var sparse;  // K × C, K may be zero
  ag::Var dense;   // C × (G·G)
};

class PromptEncoder {
 public:
  /// Logit magnitude assigned to painted / unpainted brush pixels.
  static constexpr double kBrushLogit = 4.0;

  PromptEncoder() = default;
  PromptEncoder(const GeometryPreset& geometry, nn::Rng& rng);

  /// Throws InputError for invalid prompts or a brush mask of the wrong size.
  PromptEmbeddings encode(const ManualPrompts& prompts) const;
  /// Two corner tokens for a box given as a differentiable 1×4 (x1,y1,x2,y2).
  ag::Var encode_box(const ag::Var& box) const;
  ag::Var encode_points(const std::vector<PointPrompt>& points) const;
  /// Dense embedding of a 1×(M·M) mask-logit map, M = mask_prompt_size.
  ag::Var encode_mask(const ag::Var& mask_logits) const;
  ag::Var no_mask_dense() const;
  ag::Var empty_sparse() const;
  static Matrix brush_to_logits(const BinaryMask& brush);

  void collect(const std::string& prefix, nn::ParamList& out);

 private:
  GeometryPreset geometry_;
  Parameter point_embeddings_;  // rows: background, foreground, box top-left, box bottom-right
  Parameter no_mask_embed_;     // 1 × C
  nn::Conv2x2 mask_down1_;
  nn::LayerNorm mask_norm1_;
  nn::Conv2x2 mask_down2_;
  nn::LayerNorm mask_norm2_;
  nn::Conv1x1 mask_proj_;
};

struct DecoderOutput {
  ag::Var low_res_logits;  // 1 × (M·M), M = 4·G
  ag::Var mask_logits;     // S × S
  ag::Var objectness;      // 1 × 1
  int prompt_tokens = 0;
  int decoder_tokens = 0;
};

class MaskDecoder {
 public:
  static constexpr int kOutputTokens = 2;  // mask token, objectness token

  MaskDecoder() = default;
  MaskDecoder(const GeometryPreset& geometry, nn::Rng& rng);

  /// `image_tokens`: (G·G) × C; `sparse`: K × C; `dense`: C × (G·G).
  DecoderOutput forward(const ag::Var& image_tokens, const ag::Var& sparse, const ag::Var& dense) const;
  void collect(const std::string& prefix, nn::ParamList& out);

  /// Every attention module of the decoder, for adapter placement.
  std::vector<nn::Attention*> attentions();

 private:
  struct TwoWayLayer {
    nn::Attention self_attn;
    nn::LayerNorm norm1;
    nn::Attention token_to_image;
    nn::LayerNorm norm2;
    nn::Mlp mlp;
    nn::LayerNorm norm3;
    nn::LayerNorm norm4;
    nn::Attention image_to_token;
    bool skip_first_pe = false;
  };

  GeometryPreset geometry_;
  Parameter mask_token_;
  Parameter objectness_token_;
  Matrix image_pe_;  // (G·G) × C, fixed
  std::vector<TwoWayLayer> layers_;
  nn::Attention final_attn_;
  nn::LayerNorm final_norm_;
  nn::ConvTranspose2x2 upscale1_;
  nn::LayerNorm upscale_norm_;
  nn::ConvTranspose2x2 upscale2_;
  nn::Mlp hyper_mlp_;
  nn::Mlp objectness_head_;
  Matrix upsample_rows_;     // S × M
  Matrix upsample_cols_t_;   // M × S
};

/// Converts decoder outputs to a thresholded result.
SegmentationResult to_result(const DecoderOutput& out);

class Backbone {
 public:
  Backbone() = default;
  Backbone(const GeometryPreset& geometry, std::uint64_t seed);

  Backbone(const Backbone&) = delete;
  Backbone& operator=(const Backbone&) = delete;
  Backbone(Backbone&&) = delete;
  Backbone& operator=(Backbone&&) = delete;

  const GeometryPreset& geometry() const { return geometry_; }

  /// Throws ConfigError naming expected and actual shapes on mismatch.
  ImageEmbedding encode_image(const ImageTensor& image) const;
  PromptEmbeddings encode_manual_prompts(const ManualPrompts& prompts) const;
  /// Throws InputError when the token width differs from C.
  DecoderOutput decode(const ImageEmbedding& embedding, const ag::Var& sparse, const ag::Var& dense) const;
  SegmentationResult decode_mask(const ImageEmbedding& embedding, const ag::Var& sparse, const ag::Var& dense) const;

  ImageEncoder& image_encoder() { return encoder_; }
  const ImageEncoder& image_encoder() const { return encoder_; }
  PromptEncoder& prompt_encoder() { return prompt_encoder_; }
  const PromptEncoder& prompt_encoder() const { return prompt_encoder_; }
  MaskDecoder& mask_decoder() { return decoder_; }
  const MaskDecoder& mask_decoder() const { return decoder_; }

  /// Names are prefixed "image_encoder.", "prompt_encoder.", "mask_decoder.".
  void collect(nn::ParamList& out);
  nn::ParamList parameters();

 private:
  GeometryPreset geometry_;
  ImageEncoder encoder_;
  PromptEncoder prompt_encoder_;
  MaskDecoder decoder_;
};

/// Token form of an embedding, (G·G) × C.
Matrix embedding_tokens(const ImageEmbedding& embedding);

}  // namespace promptseg
