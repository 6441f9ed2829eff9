#pragma once

// Prompt predictor network: per-class learnable tokens cross-attend with the
// positionally encoded image embedding and are decoded into a box, a
// low-resolution mask prompt, and N−2 dense prompt tokens.

#include "promptseg/autograd.hpp"
#include "promptseg/backbone.hpp"
#include "promptseg/geometry.hpp"
#include "promptseg/nn.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace promptseg {

/// Minimum box side enforced by the box parameterization.
inline constexpr double kMinBoxSide = 1e-4;

/// Independent N×C learnable tokens per class.
class ClassTokenBank {
 public:
  ClassTokenBank() = default;
  ClassTokenBank(int num_classes, int tokens_per_class, int channels, nn::Rng& rng);

  int num_classes() const { return static_cast<int>(tokens_.size()); }
  int tokens_per_class() const { return tokens_per_class_; }
  /// Throws InputError for an unknown class.
  const Parameter& tokens(int class_id) const;
  Parameter& tokens(int class_id);
  void collect(const std::string& prefix, nn::ParamList& out);

 private:
  int tokens_per_class_ = 0;
  std::vector<Parameter> tokens_;
};

/// Graph-valued predictor outputs (kept as Vars for training).
struct PromptPrediction {
  ag::Var box;           // 1 × 4, (x1, y1, x2, y2)
  ag::Var dense_tokens;  // (N−2) × C
  ag::Var mask_prompt;   // 1 × (M·M) logits
};

/// Plain-value snapshot of a prediction.
struct PromptBundle {
  Box box;
  Matrix dense_prompt_tokens;       // (N−2) × C
  Matrix mask_prompt;               // 1 × (M·M) logits
  std::optional<double> objectness_logit;  // set once the decoder has run
};

PromptBundle to_bundle(const PromptPrediction& p);

/// Box from four raw head outputs: (cx, cy, w, h) squashed to (0,1), then
/// corners clamped to [0,1] with sides at least kMinBoxSide. Differentiable.
ag::Var box_from_raw(const ag::Var& raw);

/// E + P with P the fixed sinusoidal grid encoding.
ImageEmbedding add_positional_encoding(const ImageEmbedding& embedding);

class PromptPredictor {
 public:
  static constexpr int kHeads = 4;

  PromptPredictor() = default;
  PromptPredictor(const GeometryPreset& geometry, int num_classes, int tokens_per_class, nn::Rng& rng);

  /// Queries attend to image tokens, then image tokens attend to the updated
  /// queries. Returns (updated tokens, updated image tokens).
  std::pair<ag::Var, ag::Var> two_way_attention(const ag::Var& tokens, const ag::Var& image_tokens) const;
  ag::Var box_head(const ag::Var& box_tokens) const;
  ag::Var mask_prompt_head(const ag::Var& image_tokens) const;
  /// Full procedure for one class. Throws InputError for an unknown class.
  PromptPrediction predict(const ImageEmbedding& embedding, int class_id) const;
  /// Variant that skips the positional encoding step (diagnostics only).
  PromptPrediction predict_without_positional_encoding(const ImageEmbedding& embedding, int class_id) const;

  /// Softmax weights of the query→image pass, heads stacked along rows.
  Matrix token_attention_weights(const Matrix& tokens, const Matrix& image_tokens) const;

  const GeometryPreset& geometry() const { return geometry_; }
  ClassTokenBank& token_bank() { return bank_; }
  const ClassTokenBank& token_bank() const { return bank_; }
  int tokens_per_class() const { return bank_.tokens_per_class(); }

  /// Names are prefixed "ppn.".
  void collect(nn::ParamList& out);

 private:
  PromptPrediction predict_tokens(const Matrix& image_tokens, int class_id) const;

  GeometryPreset geometry_;
  ClassTokenBank bank_;
  nn::Attention token_to_image_;
  nn::LayerNorm norm1_;
  nn::Mlp token_mlp_;
  nn::LayerNorm norm2_;
  nn::Attention image_to_token_;
  nn::LayerNorm norm3_;
  nn::Mlp image_mlp_;
  nn::LayerNorm norm4_;
  nn::Mlp box_mlp_;
  nn::ConvTranspose2x2 mask_up1_;
  nn::LayerNorm mask_norm_;
  nn::ConvTranspose2x2 mask_up2_;
  nn::Conv1x1 mask_out_;
};

struct ModelConfig {
  GeometryPreset geometry = GeometryPreset::desk();
  int num_classes = 1;
  int tokens_per_class = 8;
};

/// Forward pass with learned prompts, kept as a graph.
struct LearnedForward {
  PromptPrediction prompts;
  DecoderOutput decoder;
};

/// Backbone plus prompt predictor.
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }
  const GeometryPreset& geometry() const { return config_.geometry; }
  Backbone& backbone() { return backbone_; }
  const Backbone& backbone() const { return backbone_; }
  PromptPredictor& ppn() { return ppn_; }
  const PromptPredictor& ppn() const { return ppn_; }

  /// Backbone then predictor parameters.
  nn::ParamList parameters();

  /// Learned box re-encoded through the prompt encoder, then the dense prompt
  /// tokens, then any manual sparse tokens; a manual brush replaces the
  /// learned mask prompt on the dense path.
  LearnedForward forward_learned(const ImageEmbedding& embedding, int class_id,
                                 const ManualPrompts* manual = nullptr) const;

  SegmentationResult segment_with_learned_prompts(const ImageTensor& image, int class_id,
                                                  const std::optional<ManualPrompts>& manual = std::nullopt) const;
  SegmentationResult segment_embedding(const ImageEmbedding& embedding, int class_id,
                                       const std::optional<ManualPrompts>& manual = std::nullopt) const;
  /// Manual prompts only; the predictor is bypassed.
  SegmentationResult segment_manual(const ImageEmbedding& embedding, const ManualPrompts& prompts) const;

 private:
  ModelConfig config_;
  Backbone backbone_;
  PromptPredictor ppn_;
};

}  // namespace promptseg
