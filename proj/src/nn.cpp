#include "promptseg/nn.hpp"

#include <cmath>

namespace promptseg::nn {

Matrix uniform(Index rows, Index cols, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Matrix normal(Index rows, Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Linear::Linear(Index in, Index out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight_ = Parameter(uniform(in, out, bound, rng));
  bias_ = Parameter(uniform(1, out, bound, rng));
}

ag::Var Linear::operator()(const ag::Var& x) const {
  ag::Var y = ag::add_row_broadcast(ag::matmul(x, ag::parameter(weight_)), ag::parameter(bias_));
  if (lora_) {
    ag::Var low = ag::matmul(ag::matmul(x, ag::parameter(lora_->a)), ag::parameter(lora_->b));
    y = ag::add(y, ag::scale(low, lora_->scaling));
  }
  return y;
}

void Linear::collect(const std::string& prefix, ParamList& out) {
  out.emplace_back(join(prefix, "weight"), &weight_);
  out.emplace_back(join(prefix, "bias"), &bias_);
  if (lora_) {
    out.emplace_back(join(prefix, "lora_a"), &lora_->a);
    out.emplace_back(join(prefix, "lora_b"), &lora_->b);
  }
}

void Linear::attach_lora(int rank, double alpha, Rng& rng) {
  LoraAdapter adapter;
  adapter.a = Parameter(normal(in_features(), rank, 0.01, rng));
  adapter.b = Parameter(Matrix::Zero(rank, out_features()));
  adapter.scaling = alpha / static_cast<double>(rank);
  lora_ = std::move(adapter);
}

LayerNorm::LayerNorm(Index dim)
    : gamma_(Matrix::Ones(1, dim)), beta_(Matrix::Zero(1, dim)) {}

ag::Var LayerNorm::operator()(const ag::Var& x) const {
  return ag::layer_norm_rows(x, ag::parameter(gamma_), ag::parameter(beta_));
}

ag::Var LayerNorm::channels(const ag::Var& x) const {
  return ag::transpose((*this)(ag::transpose(x)));
}

void LayerNorm::collect(const std::string& prefix, ParamList& out) {
  out.emplace_back(join(prefix, "gamma"), &gamma_);
  out.emplace_back(join(prefix, "beta"), &beta_);
}

Mlp::Mlp(Index in, Index hidden, Index out, int layers, Rng& rng) {
  for (int i = 0; i < layers; ++i) {
    const Index a = i == 0 ? in : hidden;
    const Index b = i == layers - 1 ? out : hidden;
    layers_.emplace_back(a, b, rng);
  }
}

ag::Var Mlp::operator()(const ag::Var& x) const {
  ag::Var h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i](h);
    if (i + 1 < layers_.size()) h = ag::gelu(h);
  }
  return h;
}

void Mlp::collect(const std::string& prefix, ParamList& out) {
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(join(prefix, "layers." + std::to_string(i)), out);
}

Attention::Attention(Index dim, Index internal_dim, int heads, Rng& rng)
    : q_proj_(dim, internal_dim, rng),
      k_proj_(dim, internal_dim, rng),
      v_proj_(dim, internal_dim, rng),
      out_proj_(internal_dim, dim, rng),
      heads_(heads) {}

ag::Var Attention::operator()(const ag::Var& q, const ag::Var& k, const ag::Var& v) const {
  ag::Var attended = ag::multihead_attention(q_proj_(q), k_proj_(k), v_proj_(v), heads_);
  return out_proj_(attended);
}

Matrix Attention::weights(const Matrix& q, const Matrix& k) const {
  ag::NoGradGuard guard;
  return ag::attention_weights(q_proj_(ag::constant(q)).value(), k_proj_(ag::constant(k)).value(), heads_);
}

void Attention::collect(const std::string& prefix, ParamList& out) {
  q_proj_.collect(join(prefix, "q_proj"), out);
  k_proj_.collect(join(prefix, "k_proj"), out);
  v_proj_.collect(join(prefix, "v_proj"), out);
  out_proj_.collect(join(prefix, "out_proj"), out);
}

ConvTranspose2x2::ConvTranspose2x2(Index in_ch, Index out_ch, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch));
  weight_ = Parameter(uniform(4 * out_ch, in_ch, bound, rng));
  bias_ = Parameter(uniform(out_ch, 1, bound, rng));
}

ag::Var ConvTranspose2x2::operator()(const ag::Var& x, Index height, Index width) const {
  ag::Var expanded = ag::matmul(ag::parameter(weight_), x);
  return ag::add_col_broadcast(ag::pixel_shuffle2(expanded, height, width), ag::parameter(bias_));
}

void ConvTranspose2x2::collect(const std::string& prefix, ParamList& out) {
  out.emplace_back(join(prefix, "weight"), &weight_);
  out.emplace_back(join(prefix, "bias"), &bias_);
}

Conv2x2::Conv2x2(Index in_ch, Index out_ch, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(4 * in_ch));
  weight_ = Parameter(uniform(out_ch, 4 * in_ch, bound, rng));
  bias_ = Parameter(uniform(out_ch, 1, bound, rng));
}

ag::Var Conv2x2::operator()(const ag::Var& x, Index height, Index width) const {
  ag::Var patches = ag::pixel_unshuffle2(x, height, width);
  return ag::add_col_broadcast(ag::matmul(ag::parameter(weight_), patches), ag::parameter(bias_));
}

void Conv2x2::collect(const std::string& prefix, ParamList& out) {
  out.emplace_back(join(prefix, "weight"), &weight_);
  out.emplace_back(join(prefix, "bias"), &bias_);
}

Conv1x1::Conv1x1(Index in_ch, Index out_ch, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch));
  weight_ = Parameter(uniform(out_ch, in_ch, bound, rng));
  bias_ = Parameter(uniform(out_ch, 1, bound, rng));
}

ag::Var Conv1x1::operator()(const ag::Var& x) const {
  return ag::add_col_broadcast(ag::matmul(ag::parameter(weight_), x), ag::parameter(bias_));
}

void Conv1x1::collect(const std::string& prefix, ParamList& out) {
  out.emplace_back(join(prefix, "weight"), &weight_);
  out.emplace_back(join(prefix, "bias"), &bias_);
}

std::size_t count_elements(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& [name, p] : params) n += static_cast<std::size_t>(p->value.size());
  return n;
}

}  // namespace promptseg::nn
