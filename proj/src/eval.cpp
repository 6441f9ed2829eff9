#include "promptseg/eval.hpp"

#include "promptseg/errors.hpp"

#include <cmath>
#include <cstdio>

namespace promptseg {

DiceIou dice_iou(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw InputError("dice_iou: shape mismatch " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                     " vs " + std::to_string(gt.height) + "x" + std::to_string(gt.width));
  std::size_t inter = 0, np = 0, ng = 0;
  for (std::size_t i = 0; i < gt.pixels.size(); ++i) {
    const bool p = pred.pixels[i] != 0;
    const bool g = gt.pixels[i] != 0;
    np += p;
    ng += g;
    inter += p && g;
  }
  if (np == 0 && ng == 0) return {1.0, 1.0};
  if (np == 0 || ng == 0) return {0.0, 0.0};
  const double i = static_cast<double>(inter);
  return {2.0 * i / static_cast<double>(np + ng), i / static_cast<double>(np + ng - inter)};
}

PromptMode parse_prompt_mode(const std::string& name) {
  if (name == "gt_box") return PromptMode::gt_box;
  if (name == "learned") return PromptMode::learned;
  if (name == "learned_plus_box") return PromptMode::learned_plus_box;
  if (name == "cosine_baseline") return PromptMode::cosine_baseline;
  throw InputError("unknown prompt mode '" + name + "' (expected gt_box, learned, learned_plus_box, cosine_baseline)");
}

std::string to_string(PromptMode mode) {
  switch (mode) {
    case PromptMode::gt_box: return "gt_box";
    case PromptMode::learned: return "learned";
    case PromptMode::learned_plus_box: return "learned_plus_box";
    case PromptMode::cosine_baseline: return "cosine_baseline";
  }
  return "?";
}

ManualPrompts cosine_baseline_prompts(const ImageEmbedding& ref, const BinaryMask& ref_mask, const ImageEmbedding& test) {
  if (ref.grid != test.grid || ref.channels() != test.channels())
    throw InputError("cosine baseline: reference and test embeddings differ in shape");
  if (ref_mask.empty()) throw InputError("cosine baseline: reference mask is empty");
  const int g = ref.grid;
  // Fraction of each patch covered by the reference mask.
  Eigen::VectorXd weight = Eigen::VectorXd::Zero(static_cast<Index>(g) * g);
  for (int y = 0; y < ref_mask.height; ++y)
    for (int x = 0; x < ref_mask.width; ++x)
      if (ref_mask.at(y, x)) {
        const int gy = std::min(g - 1, y * g / ref_mask.height);
        const int gx = std::min(g - 1, x * g / ref_mask.width);
        weight(static_cast<Index>(gy) * g + gx) += 1.0;
      }
  const Eigen::VectorXd feature = ref.data * weight / weight.sum();
  const double fnorm = feature.norm();

  const Index cells = static_cast<Index>(g) * g;
  Eigen::VectorXd sim(cells);
  for (Index i = 0; i < cells; ++i) {
    const double n = test.data.col(i).norm() * fnorm;
    sim(i) = n > 0 ? test.data.col(i).dot(feature) / n : 0.0;
  }
  Index best = 0;
  for (Index i = 1; i < cells; ++i)
    if (sim(i) > sim(best)) best = i;
  const double tau = 0.8 * sim(best);

  int x1 = static_cast<int>(best % g), x2 = x1, y1 = static_cast<int>(best / g), y2 = y1;
  for (Index i = 0; i < cells; ++i) {
    if (sim(i) < tau) continue;
    const int cx = static_cast<int>(i % g), cy = static_cast<int>(i / g);
    x1 = std::min(x1, cx);
    x2 = std::max(x2, cx);
    y1 = std::min(y1, cy);
    y2 = std::max(y2, cy);
  }
  ManualPrompts p;
  const double gd = g;
  p.points.push_back({(static_cast<double>(best % g) + 0.5) / gd, (static_cast<double>(best / g) + 0.5) / gd,
                      PointLabel::foreground});
  p.boxes.push_back(Box{x1 / gd, y1 / gd, (x2 + 1) / gd, (y2 + 1) / gd});
  return p;
}

ManualPrompts cosine_baseline_prompts(const Backbone& backbone, const Sample& reference, int class_id,
                                      const ImageEmbedding& test_embedding) {
  if (class_id < 0 || class_id >= reference.num_classes()) throw InputError("cosine baseline: unknown class_id");
  return cosine_baseline_prompts(backbone.encode_image(reference.image),
                                 reference.masks[static_cast<std::size_t>(class_id)], test_embedding);
}

EvalResult evaluate(const Model& model, const Dataset& dataset, PromptMode mode, const EvalOptions& options) {
  const Backbone& bb = model.backbone();
  const int classes = model.config().num_classes;
  const int size = model.geometry().input_size;

  // Reference embedding per class for the baseline.
  std::vector<std::optional<std::pair<ImageEmbedding, BinaryMask>>> refs(static_cast<std::size_t>(classes));
  if (mode == PromptMode::cosine_baseline) {
    for (int k = 0; k < classes; ++k) {
      const Sample* ref = nullptr;
      if (options.reference && options.reference->num_classes() > k &&
          !options.reference->masks[static_cast<std::size_t>(k)].empty())
        ref = &*options.reference;
      for (const auto& s : dataset)
        if (ref == nullptr && s.num_classes() > k && !s.masks[static_cast<std::size_t>(k)].empty()) ref = &s;
      if (ref == nullptr) throw InputError("cosine baseline: no reference with a non-empty mask for class " + std::to_string(k));
      refs[static_cast<std::size_t>(k)].emplace(bb.encode_image(ref->image), ref->masks[static_cast<std::size_t>(k)]);
    }
  }

  EvalResult result;
  for (const auto& s : dataset) {
    if (s.image.height != size || s.image.width != size)
      throw InputError("evaluate: sample '" + s.id + "' is not in model space");
    if (s.num_classes() != classes) throw InputError("evaluate: sample '" + s.id + "' has the wrong class count");
    const ImageEmbedding emb = bb.encode_image(s.image);
    for (int k = 0; k < classes; ++k) {
      const BinaryMask& gt = s.masks[static_cast<std::size_t>(k)];
      const auto gt_box = mask_bounding_box(gt);
      SegmentationResult r;
      bool gated = true;
      switch (mode) {
        case PromptMode::gt_box: {
          ManualPrompts p;
          if (gt_box) p.boxes.push_back(*gt_box);
          r = model.segment_manual(emb, p);
          gated = !gt_box.has_value();
          break;
        }
        case PromptMode::learned: r = model.segment_embedding(emb, k); break;
        case PromptMode::learned_plus_box: {
          std::optional<ManualPrompts> p;
          if (gt_box) p = ManualPrompts{{}, {*gt_box}, std::nullopt};
          r = model.segment_embedding(emb, k, p);
          break;
        }
        case PromptMode::cosine_baseline: {
          const auto& ref = *refs[static_cast<std::size_t>(k)];
          r = model.segment_manual(emb, cosine_baseline_prompts(ref.first, ref.second, emb));
          break;
        }
      }
      ImageScore score;
      score.sample_id = s.id;
      score.class_id = k;
      score.gt_present = gt_box.has_value();
      score.predicted_present = r.object_present;
      if (!score.gt_present) {
        score.dice = score.iou = r.object_present ? 0.0 : 1.0;
      } else {
        const BinaryMask pred = (gated && !r.object_present) ? BinaryMask(gt.height, gt.width) : r.mask;
        const DiceIou d = dice_iou(pred, gt);
        score.dice = d.dice;
        score.iou = d.iou;
      }
      result.images.push_back(score);
    }
  }
  MetricRow& row = result.row;
  row.model_tag = options.model_tag;
  row.dataset_tag = options.dataset_tag;
  row.mode = mode;
  row.n_images = static_cast<int>(dataset.size());
  for (const auto& i : result.images) {
    row.dice += i.dice;
    row.iou += i.iou;
  }
  if (!result.images.empty()) {
    row.dice /= static_cast<double>(result.images.size());
    row.iou /= static_cast<double>(result.images.size());
  }
  return result;
}

void write_metrics_table(std::ostream& out, const std::vector<MetricRow>& rows) {
  out << "model\tdataset\tprompt_mode\tdice\tiou\tn_images\n";
  char buf[64];
  for (const auto& r : rows) {
    out << r.model_tag << '\t' << r.dataset_tag << '\t' << to_string(r.mode) << '\t';
    std::snprintf(buf, sizeof buf, "%.6f\t%.6f\t%d\n", r.dice, r.iou, r.n_images);
    out << buf;
  }
}

void write_image_table(std::ostream& out, const std::vector<ImageScore>& images) {
  out << "sample\tclass\tgt_present\tpredicted_present\tdice\tiou\n";
  char buf[96];
  for (const auto& i : images) {
    std::snprintf(buf, sizeof buf, "\t%d\t%d\t%d\t%.9f\t%.9f\n", i.class_id, i.gt_present ? 1 : 0,
                  i.predicted_present ? 1 : 0, i.dice, i.iou);
    out << i.sample_id << buf;
  }
}

std::string format_dice_iou(double dice, double iou) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f/%.1f", 100.0 * dice, 100.0 * iou);
  return buf;
}

std::string format_report_line(const MetricRow& row) {
  return row.dataset_tag + " → " + format_dice_iou(row.dice, row.iou);
}

}  // namespace promptseg
