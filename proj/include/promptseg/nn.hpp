#pragma once

// Layer building blocks on top of the autodiff core. Modules own their
// parameters by value and expose them through `collect`, which appends
// (dotted name, pointer) pairs; the pointers stay valid while the module is
// neither moved nor destroyed.

#include "promptseg/autograd.hpp"

#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace promptseg::nn {

using ParamList = std::vector<std::pair<std::string, Parameter*>>;

inline std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

using Rng = std::mt19937_64;

Matrix uniform(Index rows, Index cols, double bound, Rng& rng);
Matrix normal(Index rows, Index cols, double stddev, Rng& rng);

/// Parallel low-rank path added to a linear map: x·A·B·(alpha/rank).
struct LoraAdapter {
  Parameter a;  // in × rank, small random normal
  Parameter b;  // rank × out, zero
  double scaling = 1.0;
};

/// y = x·W + b with W stored in×out.
class Linear {
 public:
  Linear() = default;
  Linear(Index in, Index out, Rng& rng);

  ag::Var operator()(const ag::Var& x) const;
  void collect(const std::string& prefix, ParamList& out);

  void attach_lora(int rank, double alpha, Rng& rng);
  bool has_lora() const { return lora_.has_value(); }
  LoraAdapter* lora() { return lora_ ? &*lora_ : nullptr; }

  Index in_features() const { return weight_.value.rows(); }
  Index out_features() const { return weight_.value.cols(); }

  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }

 private:
  Parameter weight_;
  Parameter bias_;
  std::optional<LoraAdapter> lora_;
};

/// Normalizes each row over its columns.
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(Index dim);
  ag::Var operator()(const ag::Var& x) const;
  /// Channel-wise normalization of a C×(H·W) feature map, per pixel.
  ag::Var channels(const ag::Var& x) const;
  void collect(const std::string& prefix, ParamList& out);

 private:
  Parameter gamma_;
  Parameter beta_;
};

/// Stack of linear layers with GELU between them (none after the last).
class Mlp {
 public:
  Mlp() = default;
  Mlp(Index in, Index hidden, Index out, int layers, Rng& rng);
  ag::Var operator()(const ag::Var& x) const;
  void collect(const std::string& prefix, ParamList& out);

 private:
  std::vector<Linear> layers_;
};

/// Multi-head attention with separate q/k/v/out projections. `internal_dim`
/// may be smaller than `dim` (downsampled cross-attention).
class Attention {
 public:
  Attention() = default;
  Attention(Index dim, Index internal_dim, int heads, Rng& rng);

  ag::Var operator()(const ag::Var& q, const ag::Var& k, const ag::Var& v) const;
  /// Softmax weights for the given inputs, heads stacked along rows.
  Matrix weights(const Matrix& q, const Matrix& k) const;
  void collect(const std::string& prefix, ParamList& out);

  Linear& q_proj() { return q_proj_; }
  Linear& v_proj() { return v_proj_; }
  int heads() const { return heads_; }

 private:
  Linear q_proj_, k_proj_, v_proj_, out_proj_;
  int heads_ = 1;
};

/// Stride-2 2×2 transposed convolution on a C×(H·W) map.
class ConvTranspose2x2 {
 public:
  ConvTranspose2x2() = default;
  ConvTranspose2x2(Index in_ch, Index out_ch, Rng& rng);
  ag::Var operator()(const ag::Var& x, Index height, Index width) const;
  void collect(const std::string& prefix, ParamList& out);

 private:
  Parameter weight_;  // 4·out × in, row k·out + o with k = 2·dy + dx
  Parameter bias_;    // out × 1
};

/// Stride-2 2×2 convolution on a C×(H·W) map.
class Conv2x2 {
 public:
  Conv2x2() = default;
  Conv2x2(Index in_ch, Index out_ch, Rng& rng);
  ag::Var operator()(const ag::Var& x, Index height, Index width) const;
  void collect(const std::string& prefix, ParamList& out);

 private:
  Parameter weight_;  // out × 4·in
  Parameter bias_;    // out × 1
};

/// 1×1 convolution on a C×(H·W) map.
class Conv1x1 {
 public:
  Conv1x1() = default;
  Conv1x1(Index in_ch, Index out_ch, Rng& rng);
  ag::Var operator()(const ag::Var& x) const;
  void collect(const std::string& prefix, ParamList& out);

 private:
  Parameter weight_;  // out × in
  Parameter bias_;    // out × 1
};

std::size_t count_elements(const ParamList& params);

}  // namespace promptseg::nn
