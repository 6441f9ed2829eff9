#pragma once

// Training objective: focal loss on the mask prompt and the final mask, L1 +
// GIoU on the box, and BCE on the objectness logit.
//
// The focal loss follows the formula as published, with alpha weighting the
// background term only:
//   FL(p, y) = -y (1-p)^gamma log p - alpha (1-y) p^gamma log(1-p)
// This differs from the usual alpha-balanced form, where alpha weights the
// foreground term and (1 - alpha) the background term.

#include "promptseg/autograd.hpp"
#include "promptseg/geometry.hpp"

namespace promptseg {

inline constexpr double kProbEpsilon = 1e-7;

struct LossWeights {
  double lambda1 = 10.0;  // mask (mask prompt + final mask)
  double lambda2 = 1.0;   // box (L1 + GIoU)
  double lambda3 = 1.0;   // objectness
  double gamma = 3.0;
  double alpha = 0.7;
};

struct LossReport {
  double total = 0;
  double mask_prompt_focal = 0;
  double final_mask_focal = 0;
  double box_l1 = 0;
  double box_giou = 0;
  double objectness_bce = 0;
};

/// Mean focal loss over elements; probabilities are clamped to [ε, 1−ε].
/// Throws InputError on a shape mismatch.
double focal_loss(const Matrix& prob, const Matrix& target, double gamma, double alpha);
ag::Var focal_loss(const ag::Var& prob, const Matrix& target, double gamma, double alpha);

/// Generalized IoU of two valid boxes; throws InputError on a zero-area box.
double giou(const Box& a, const Box& b);
double iou(const Box& a, const Box& b);
/// 1 − GIoU of a 1×4 prediction against a fixed target.
ag::Var giou_loss(const ag::Var& pred, const Box& target);

struct BoxLoss {
  double l1 = 0;
  double giou_loss = 0;
};
BoxLoss box_loss(const Box& pred, const Box& target);
/// Mean absolute difference over the four coordinates.
ag::Var box_l1_loss(const ag::Var& pred, const Box& target);

/// Numerically stable BCE with logits.
double objectness_loss(double logit, bool present);
ag::Var objectness_loss(const ag::Var& logit, bool present);

/// Nearest-neighbor resampling of a mask to size×size.
BinaryMask downsample_nearest(const BinaryMask& mask, int size);
Matrix mask_to_matrix(const BinaryMask& mask, Index rows, Index cols);

struct LossTerms {
  ag::Var total;
  LossReport report;
};

/// Graph form of the total loss. `mask_prompt_logits` is 1×(M·M);
/// `mask_logits` S×S at input resolution; `box` 1×4; `objectness` 1×1. When
/// `gt_present` is false only the objectness term contributes.
LossTerms total_loss(const ag::Var& mask_prompt_logits, const ag::Var& mask_logits, const ag::Var& box,
                     const ag::Var& objectness, const BinaryMask& gt_mask, bool gt_present,
                     const LossWeights& weights);

}  // namespace promptseg
