#include "promptseg/losses.hpp"

#include "promptseg/dual.hpp"
#include "promptseg/errors.hpp"

#include <cmath>

namespace promptseg {

namespace {

// std::pow is slow per pixel; integer exponents are the common case.
double power(double base, double exponent) {
  if (exponent == 3.0) return base * base * base;
  if (exponent == 2.0) return base * base;
  if (exponent == 1.0) return base;
  if (exponent == 0.0) return 1.0;
  return std::pow(base, exponent);
}

struct FocalTerms {
  double value;
  double dvalue;  // derivative with respect to the (unclamped) probability
};

FocalTerms focal_element(double p_raw, double y, double gamma, double alpha) {
  const bool clamped = p_raw < kProbEpsilon || p_raw > 1.0 - kProbEpsilon;
  const double p = std::clamp(p_raw, kProbEpsilon, 1.0 - kProbEpsilon);
  const double q = 1.0 - p;
  const double lp = std::log(p);
  const double lq = std::log(q);
  const double pos = power(q, gamma);
  const double neg = power(p, gamma);
  FocalTerms t;
  t.value = -y * pos * lp - alpha * (1.0 - y) * neg * lq;
  if (clamped) {
    t.dvalue = 0.0;
  } else {
    const double dpos = gamma == 0.0 ? 0.0 : -gamma * power(q, gamma - 1.0);  // d(q^γ)/dp
    const double dneg = gamma == 0.0 ? 0.0 : gamma * power(p, gamma - 1.0);   // d(p^γ)/dp
    t.dvalue = -y * (dpos * lp + pos / p) - alpha * (1.0 - y) * (dneg * lq - neg / q);
  }
  return t;
}

void check_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw InputError(std::string(what) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

template <class T>
T giou_generic(const std::array<T, 4>& a, const Box& b) {
  const T bx1(b.x1), by1(b.y1), bx2(b.x2), by2(b.y2);
  const T area_a = (a[2] - a[0]) * (a[3] - a[1]);
  const T area_b = (bx2 - bx1) * (by2 - by1);
  const T iw = max_of(min_of(a[2], bx2) - max_of(a[0], bx1), T(0.0));
  const T ih = max_of(min_of(a[3], by2) - max_of(a[1], by1), T(0.0));
  const T inter = iw * ih;
  const T uni = area_a + area_b - inter;
  const T ew = max_of(a[2], bx2) - min_of(a[0], bx1);
  const T eh = max_of(a[3], by2) - min_of(a[1], by1);
  const T enclosing = ew * eh;
  return inter / uni - (enclosing - uni) / enclosing;
}

void check_box(const Box& b, const char* which) {
  if (!(b.x2 > b.x1) || !(b.y2 > b.y1))
    throw InputError(std::string("giou: degenerate ") + which + " box (zero or negative area)");
}

}  // namespace

double focal_loss(const Matrix& prob, const Matrix& target, double gamma, double alpha) {
  check_same_shape(prob, target, "focal_loss");
  double total = 0.0;
  for (Index i = 0; i < prob.size(); ++i) total += focal_element(prob.data()[i], target.data()[i], gamma, alpha).value;
  return total / static_cast<double>(prob.size());
}

ag::Var focal_loss(const ag::Var& prob, const Matrix& target, double gamma, double alpha) {
  check_same_shape(prob.value(), target, "focal_loss");
  const Matrix& p = prob.value();
  const double n = static_cast<double>(p.size());
  Matrix dp(p.rows(), p.cols());
  double total = 0.0;
  for (Index i = 0; i < p.size(); ++i) {
    const FocalTerms t = focal_element(p.data()[i], target.data()[i], gamma, alpha);
    total += t.value;
    dp.data()[i] = t.dvalue / n;
  }
  Matrix out(1, 1);
  out(0, 0) = total / n;
  return ag::make_result(std::move(out), {prob}, [dp = std::move(dp)](ag::Node& self) {
    self.inputs[0]->grad_buffer() += dp * self.grad(0, 0);
  });
}

double giou(const Box& a, const Box& b) {
  check_box(a, "first");
  check_box(b, "second");
  return giou_generic<double>({a.x1, a.y1, a.x2, a.y2}, b);
}

double iou(const Box& a, const Box& b) {
  check_box(a, "first");
  check_box(b, "second");
  const double iw = std::max(std::min(a.x2, b.x2) - std::max(a.x1, b.x1), 0.0);
  const double ih = std::max(std::min(a.y2, b.y2) - std::max(a.y1, b.y1), 0.0);
  const double inter = iw * ih;
  return inter / (a.width() * a.height() + b.width() * b.height() - inter);
}

ag::Var giou_loss(const ag::Var& pred, const Box& target) {
  if (pred.rows() != 1 || pred.cols() != 4) throw InputError("giou_loss expects a 1x4 box");
  const Matrix& v = pred.value();
  check_box(Box{v(0, 0), v(0, 1), v(0, 2), v(0, 3)}, "predicted");
  check_box(target, "target");
  using D = Dual<4>;
  std::array<D, 4> in;
  for (int i = 0; i < 4; ++i) in[i] = D::seed(v(0, i), i);
  const D g = giou_generic(in, target);
  Matrix out(1, 1);
  out(0, 0) = 1.0 - g.v;
  Matrix grad(1, 4);
  for (int i = 0; i < 4; ++i) grad(0, i) = -g.d[i];
  return ag::make_result(std::move(out), {pred}, [grad = std::move(grad)](ag::Node& self) {
    self.inputs[0]->grad_buffer() += grad * self.grad(0, 0);
  });
}

BoxLoss box_loss(const Box& pred, const Box& target) {
  BoxLoss l;
  l.l1 = (std::abs(pred.x1 - target.x1) + std::abs(pred.y1 - target.y1) + std::abs(pred.x2 - target.x2) +
          std::abs(pred.y2 - target.y2)) /
         4.0;
  l.giou_loss = 1.0 - giou(pred, target);
  return l;
}

ag::Var box_l1_loss(const ag::Var& pred, const Box& target) {
  Matrix t(1, 4);
  t << target.x1, target.y1, target.x2, target.y2;
  const Matrix diff = pred.value() - t;
  Matrix out(1, 1);
  out(0, 0) = diff.cwiseAbs().sum() / 4.0;
  Matrix sign = diff.unaryExpr([](double d) { return d > 0 ? 0.25 : (d < 0 ? -0.25 : 0.0); });
  return ag::make_result(std::move(out), {pred}, [sign = std::move(sign)](ag::Node& self) {
    self.inputs[0]->grad_buffer() += sign * self.grad(0, 0);
  });
}

double objectness_loss(double logit, bool present) {
  const double y = present ? 1.0 : 0.0;
  return std::max(logit, 0.0) - logit * y + std::log1p(std::exp(-std::abs(logit)));
}

ag::Var objectness_loss(const ag::Var& logit, bool present) {
  const double z = logit.scalar();
  Matrix out(1, 1);
  out(0, 0) = objectness_loss(z, present);
  const double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  const double d = s - (present ? 1.0 : 0.0);
  return ag::make_result(std::move(out), {logit}, [d](ag::Node& self) {
    self.inputs[0]->grad_buffer()(0, 0) += d * self.grad(0, 0);
  });
}

BinaryMask downsample_nearest(const BinaryMask& mask, int size) {
  BinaryMask out(size, size);
  for (int y = 0; y < size; ++y) {
    const int sy = std::min(mask.height - 1, static_cast<int>((y + 0.5) * mask.height / size));
    for (int x = 0; x < size; ++x) {
      const int sx = std::min(mask.width - 1, static_cast<int>((x + 0.5) * mask.width / size));
      out.at(y, x) = mask.at(sy, sx);
    }
  }
  return out;
}

Matrix mask_to_matrix(const BinaryMask& mask, Index rows, Index cols) {
  if (static_cast<Index>(mask.pixels.size()) != rows * cols) throw InputError("mask_to_matrix: size mismatch");
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = mask.pixels[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
  return m;
}

LossTerms total_loss(const ag::Var& mask_prompt_logits, const ag::Var& mask_logits, const ag::Var& box,
                     const ag::Var& objectness, const BinaryMask& gt_mask, bool gt_present,
                     const LossWeights& w) {
  LossTerms t;
  ag::Var obj = objectness_loss(objectness, gt_present);
  t.report.objectness_bce = obj.scalar();
  ag::Var total = ag::scale(obj, w.lambda3);
  if (gt_present) {
    if (gt_mask.height != mask_logits.rows() || gt_mask.width != mask_logits.cols())
      throw InputError("total_loss: gt mask must match the mask logits resolution");
    const auto gt_box = mask_bounding_box(gt_mask);
    if (!gt_box) throw InputError("total_loss: gt_present but the mask is empty");

    const Index m = static_cast<Index>(std::lround(std::sqrt(static_cast<double>(mask_prompt_logits.cols()))));
    const BinaryMask small = downsample_nearest(gt_mask, static_cast<int>(m));
    ag::Var prompt_focal = focal_loss(ag::sigmoid(mask_prompt_logits), mask_to_matrix(small, 1, m * m), w.gamma, w.alpha);
    ag::Var final_focal =
        focal_loss(ag::sigmoid(mask_logits), mask_to_matrix(gt_mask, gt_mask.height, gt_mask.width), w.gamma, w.alpha);
    ag::Var l1 = box_l1_loss(box, *gt_box);
    ag::Var gl = giou_loss(box, *gt_box);
    t.report.mask_prompt_focal = prompt_focal.scalar();
    t.report.final_mask_focal = final_focal.scalar();
    t.report.box_l1 = l1.scalar();
    t.report.box_giou = gl.scalar();
    total = ag::add(total, ag::scale(ag::add(prompt_focal, final_focal), w.lambda1));
    total = ag::add(total, ag::scale(ag::add(l1, gl), w.lambda2));
  }
  t.total = total;
  t.report.total = total.scalar();
  return t;
}

}  // namespace promptseg
