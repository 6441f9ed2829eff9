#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every value is a 2-D matrix; channel-first feature maps C×H×W are
// stored as C rows of H·W columns and token sequences L×C as L rows.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace promptseg {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

/// A trainable tensor owned by a module. `grad` accumulates across backward
/// passes until `zero_grad()`.
struct Parameter {
  Matrix value;
  mutable Matrix grad;  // written by backward passes through const modules
  bool trainable = true;

  Parameter() = default;
  explicit Parameter(Matrix v) : value(std::move(v)) {}
  void zero_grad() const { grad.resize(0, 0); }
  bool has_grad() const { return grad.size() != 0; }
};

namespace ag {

struct Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node&)>;

struct Node {
  Matrix value;
  const Matrix* external = nullptr;  // parameter leaves alias the parameter value
  const Parameter* param = nullptr;
  Matrix grad;
  bool requires_grad = false;
  std::vector<NodePtr> inputs;
  BackwardFn backward;

  const Matrix& val() const { return external != nullptr ? *external : value; }
  Matrix& grad_buffer();
};

/// Handle to a node in the computation graph. Cheap to copy.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->val(); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool requires_grad() const { return node_->requires_grad; }
  /// Gradient accumulated by the last backward pass; empty when none reached.
  const Matrix& grad() const { return node_->grad; }
  double scalar() const { return value()(0, 0); }
  bool defined() const { return static_cast<bool>(node_); }
  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

bool grad_enabled();

/// Disables graph construction on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

Var constant(Matrix value);
/// Leaf bound to `p`; gradients land in `p.grad` after `backward` when the
/// parameter is trainable.
Var parameter(const Parameter& p);
/// Leaf that records its own gradient (used for inputs under test).
Var variable(Matrix value);

/// Builds a result node. The backward closure is dropped when no input
/// requires a gradient or grad mode is off.
Var make_result(Matrix value, std::vector<Var> inputs, BackwardFn fn);

/// Reverse pass from a 1×1 root. Parameter leaves accumulate into their
/// parameter's gradient.
void backward(const Var& root);

// Linear algebra
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a · bᵀ
Var transpose(const Var& a);
Var reshape(const Var& a, Index rows, Index cols);

// Elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_row_broadcast(const Var& a, const Var& row);  // row: 1×cols
Var add_col_broadcast(const Var& a, const Var& col);  // col: rows×1
Var gelu(const Var& a);
Var relu(const Var& a);
Var sigmoid(const Var& a);

// Structure
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(const Var& a, Index begin, Index count);
Var slice_cols(const Var& a, Index begin, Index count);

// Reductions
Var sum(const Var& a);
Var mean(const Var& a);

// Normalization and attention
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);
/// Scaled dot-product attention with `heads` heads over pre-projected q/k/v.
Var multihead_attention(const Var& q, const Var& k, const Var& v, int heads);
/// Per-head softmax weights of the same attention (heads·Nq rows × Nk).
Matrix attention_weights(const Matrix& q, const Matrix& k, int heads);

// Spatial rearrangements for stride-2 2×2 (transposed) convolutions on
// C×(H·W) maps.
Var pixel_shuffle2(const Var& x, Index height, Index width);    // 4c×HW -> c×(2H·2W)
Var pixel_unshuffle2(const Var& x, Index height, Index width);  // c×HW -> 4c×(H/2·W/2)

}  // namespace ag
}  // namespace promptseg
