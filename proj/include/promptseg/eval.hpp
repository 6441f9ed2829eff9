#pragma once

#include "promptseg/data.hpp"
#include "promptseg/ppn.hpp"

#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace promptseg {

struct DiceIou {
  double dice = 0;
  double iou = 0;
};

/// Both empty → (1,1); exactly one empty → (0,0). InputError on shape mismatch.
DiceIou dice_iou(const BinaryMask& pred, const BinaryMask& gt);

enum class PromptMode { gt_box, learned, learned_plus_box, cosine_baseline };

PromptMode parse_prompt_mode(const std::string& name);  // InputError when unknown
std::string to_string(PromptMode mode);

/// Score of one (image, class) pair.
struct ImageScore {
  std::string sample_id;
  int class_id = 0;
  bool gt_present = false;
  bool predicted_present = false;
  double dice = 0;
  double iou = 0;
};

struct MetricRow {
  std::string model_tag;
  std::string dataset_tag;
  PromptMode mode = PromptMode::learned;
  double dice = 0;  // mean over scored pairs
  double iou = 0;
  int n_images = 0;
};

struct EvalOptions {
  std::string model_tag = "model";
  std::string dataset_tag = "data";
  /// Reference for the cosine baseline (model space, non-empty mask for the
  /// evaluated class). Defaults to the first sample with a non-empty mask.
  std::optional<Sample> reference;
};

struct EvalResult {
  MetricRow row;
  std::vector<ImageScore> images;
};

/// Scores every (sample, class) pair of a model-space dataset. A pair whose
/// gt is empty is scored by the objectness decision alone: correct
/// rejection (1,1), false acceptance (0,0). Learned modes gate the mask by
/// objectness; gt_box is a manual mode and is not gated.
EvalResult evaluate(const Model& model, const Dataset& dataset, PromptMode mode, const EvalOptions& options = {});

/// Delimiter-separated table: header plus one line per row, fixed precision.
void write_metrics_table(std::ostream& out, const std::vector<MetricRow>& rows);
void write_image_table(std::ostream& out, const std::vector<ImageScore>& images);
/// "Dice/IoU" in percent with one decimal, e.g. "78.2/65.2".
std::string format_dice_iou(double dice, double iou);
/// "<dataset> → <dice>/<iou>".
std::string format_report_line(const MetricRow& row);

/// Training-free baseline: mask-pooled reference feature compared to every
/// test patch by cosine similarity. The most similar patch center becomes a
/// foreground point; the bounding box of all patches with similarity at least
/// 0.8·max becomes a box. Ties go to the lowest patch index.
ManualPrompts cosine_baseline_prompts(const ImageEmbedding& reference_embedding, const BinaryMask& reference_mask,
                                      const ImageEmbedding& test_embedding);
ManualPrompts cosine_baseline_prompts(const Backbone& backbone, const Sample& reference, int class_id,
                                      const ImageEmbedding& test_embedding);

}  // namespace promptseg
