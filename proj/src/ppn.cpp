#include "promptseg/ppn.hpp"

#include "promptseg/dual.hpp"
#include "promptseg/errors.hpp"

#include <cmath>

namespace promptseg {

ClassTokenBank::ClassTokenBank(int num_classes, int tokens_per_class, int channels, nn::Rng& rng)
    : tokens_per_class_(tokens_per_class) {
  if (num_classes < 1) throw ConfigError("token bank needs at least one class");
  if (tokens_per_class < 3) throw ConfigError("tokens per class must be >= 3 (2 box tokens + 1 dense token)");
  for (int k = 0; k < num_classes; ++k) tokens_.emplace_back(nn::normal(tokens_per_class, channels, 1.0, rng));
}

const Parameter& ClassTokenBank::tokens(int class_id) const {
  if (class_id < 0 || class_id >= num_classes())
    throw InputError("unknown class_id " + std::to_string(class_id) + " (have " + std::to_string(num_classes()) + ")");
  return tokens_[static_cast<std::size_t>(class_id)];
}

Parameter& ClassTokenBank::tokens(int class_id) {
  return const_cast<Parameter&>(static_cast<const ClassTokenBank&>(*this).tokens(class_id));
}

void ClassTokenBank::collect(const std::string& prefix, nn::ParamList& out) {
  for (std::size_t k = 0; k < tokens_.size(); ++k) out.emplace_back(nn::join(prefix, std::to_string(k)), &tokens_[k]);
}

PromptBundle to_bundle(const PromptPrediction& p) {
  PromptBundle b;
  const Matrix& box = p.box.value();
  b.box = Box{box(0, 0), box(0, 1), box(0, 2), box(0, 3)};
  b.dense_prompt_tokens = p.dense_tokens.value();
  b.mask_prompt = p.mask_prompt.value();
  return b;
}

namespace {

template <class T>
std::array<T, 4> corners_from_raw(const std::array<T, 4>& raw) {
  auto squash = [](const T& x) {
    const double s = 1.0 / (1.0 + std::exp(-value_of(x)));
    // Chain rule through the logistic: ds/dx = s(1-s).
    if constexpr (std::is_same_v<T, double>) {
      return s;
    } else {
      T r(s);
      for (std::size_t i = 0; i < r.d.size(); ++i) r.d[i] = x.d[i] * s * (1.0 - s);
      return r;
    }
  };
  const T cx = squash(raw[0]);
  const T cy = squash(raw[1]);
  const T w = squash(raw[2]);
  const T h = squash(raw[3]);
  const T half(0.5);
  const T zero(0.0);
  const T one(1.0);
  const T top(1.0 - kMinBoxSide);
  const T x1 = clamp_to(cx - w * half, zero, top);
  const T y1 = clamp_to(cy - h * half, zero, top);
  const T x2 = clamp_to(cx + w * half, x1 + T(kMinBoxSide), one);
  const T y2 = clamp_to(cy + h * half, y1 + T(kMinBoxSide), one);
  return {x1, y1, x2, y2};
}

}  // namespace

ag::Var box_from_raw(const ag::Var& raw) {
  if (raw.rows() != 1 || raw.cols() != 4) throw InputError("box_from_raw expects 1x4");
  using D = Dual<4>;
  std::array<D, 4> in;
  for (int i = 0; i < 4; ++i) in[i] = D::seed(raw.value()(0, i), i);
  const auto out = corners_from_raw(in);
  Matrix value(1, 4);
  Matrix jac(4, 4);  // jac(o, i) = d out_o / d raw_i
  for (int o = 0; o < 4; ++o) {
    value(0, o) = out[o].v;
    for (int i = 0; i < 4; ++i) jac(o, i) = out[o].d[i];
  }
  return ag::make_result(std::move(value), {raw}, [jac = std::move(jac)](ag::Node& self) {
    self.inputs[0]->grad_buffer() += self.grad * jac;
  });
}

ImageEmbedding add_positional_encoding(const ImageEmbedding& embedding) {
  ImageEmbedding out = embedding;
  out.data += grid_positional_encoding(embedding.channels(), embedding.grid);
  return out;
}

PromptPredictor::PromptPredictor(const GeometryPreset& geometry, int num_classes, int tokens_per_class, nn::Rng& rng)
    : geometry_(geometry), bank_(num_classes, tokens_per_class, geometry.embed_channels, rng) {
  const Index c = geometry.embed_channels;
  token_to_image_ = nn::Attention(c, c / 2, kHeads, rng);
  norm1_ = nn::LayerNorm(c);
  token_mlp_ = nn::Mlp(c, 2 * c, c, 2, rng);
  norm2_ = nn::LayerNorm(c);
  image_to_token_ = nn::Attention(c, c / 2, kHeads, rng);
  norm3_ = nn::LayerNorm(c);
  image_mlp_ = nn::Mlp(c, 2 * c, c, 2, rng);
  norm4_ = nn::LayerNorm(c);
  box_mlp_ = nn::Mlp(2 * c, c, 4, 3, rng);
  mask_up1_ = nn::ConvTranspose2x2(c, c / 4, rng);
  mask_norm_ = nn::LayerNorm(c / 4);
  mask_up2_ = nn::ConvTranspose2x2(c / 4, c / 8, rng);
  mask_out_ = nn::Conv1x1(c / 8, 1, rng);
}

std::pair<ag::Var, ag::Var> PromptPredictor::two_way_attention(const ag::Var& tokens, const ag::Var& image_tokens) const {
  const Index c = geometry_.embed_channels;
  if (tokens.cols() != c || image_tokens.cols() != c)
    throw InputError("two_way_attention: token width must be " + std::to_string(c));
  if (image_tokens.rows() != geometry_.grid_cells())
    throw InputError("two_way_attention: expected " + std::to_string(geometry_.grid_cells()) + " image tokens");
  ag::Var t = norm1_(ag::add(tokens, token_to_image_(tokens, image_tokens, image_tokens)));
  t = norm2_(ag::add(t, token_mlp_(t)));
  ag::Var img = norm3_(ag::add(image_tokens, image_to_token_(image_tokens, t, t)));
  img = norm4_(ag::add(img, image_mlp_(img)));
  return {t, img};
}

Matrix PromptPredictor::token_attention_weights(const Matrix& tokens, const Matrix& image_tokens) const {
  return token_to_image_.weights(tokens, image_tokens);
}

ag::Var PromptPredictor::box_head(const ag::Var& box_tokens) const {
  if (box_tokens.rows() != 2) throw InputError("box_head expects exactly 2 tokens");
  ag::Var flat = ag::reshape(box_tokens, 1, 2 * box_tokens.cols());
  return box_from_raw(box_mlp_(flat));
}

ag::Var PromptPredictor::mask_prompt_head(const ag::Var& image_tokens) const {
  const Index g = geometry_.embed_grid;
  ag::Var x = ag::transpose(image_tokens);  // C × g²
  x = mask_up1_(x, g, g);
  x = ag::gelu(mask_norm_.channels(x));
  x = ag::gelu(mask_up2_(x, 2 * g, 2 * g));
  return mask_out_(x);  // 1 × (4g)²
}

PromptPrediction PromptPredictor::predict_tokens(const Matrix& image_tokens, int class_id) const {
  ag::Var tokens = ag::parameter(bank_.tokens(class_id));
  auto [t, img] = two_way_attention(tokens, ag::constant(image_tokens));
  const Index n = t.rows();
  PromptPrediction p;
  p.box = box_head(ag::slice_rows(t, 0, 2));
  p.dense_tokens = ag::slice_rows(t, 2, n - 2);
  p.mask_prompt = mask_prompt_head(img);
  return p;
}

PromptPrediction PromptPredictor::predict(const ImageEmbedding& embedding, int class_id) const {
  bank_.tokens(class_id);  // validates class_id before any work
  return predict_tokens(embedding_tokens(add_positional_encoding(embedding)), class_id);
}

PromptPrediction PromptPredictor::predict_without_positional_encoding(const ImageEmbedding& embedding,
                                                                      int class_id) const {
  bank_.tokens(class_id);
  return predict_tokens(embedding_tokens(embedding), class_id);
}

void PromptPredictor::collect(nn::ParamList& out) {
  const std::string p = "ppn";
  bank_.collect(nn::join(p, "class_tokens"), out);
  token_to_image_.collect(nn::join(p, "token_to_image"), out);
  norm1_.collect(nn::join(p, "norm1"), out);
  token_mlp_.collect(nn::join(p, "token_mlp"), out);
  norm2_.collect(nn::join(p, "norm2"), out);
  image_to_token_.collect(nn::join(p, "image_to_token"), out);
  norm3_.collect(nn::join(p, "norm3"), out);
  image_mlp_.collect(nn::join(p, "image_mlp"), out);
  norm4_.collect(nn::join(p, "norm4"), out);
  box_mlp_.collect(nn::join(p, "box_head"), out);
  mask_up1_.collect(nn::join(p, "mask_head.up1"), out);
  mask_norm_.collect(nn::join(p, "mask_head.norm"), out);
  mask_up2_.collect(nn::join(p, "mask_head.up2"), out);
  mask_out_.collect(nn::join(p, "mask_head.out"), out);
}

// ------------------------------------------------------------------ model

namespace {

nn::Rng predictor_rng(std::uint64_t seed) { return nn::Rng(seed ^ 0x9e3779b97f4a7c15ULL); }

}  // namespace

Model::Model(const ModelConfig& config, std::uint64_t seed)
    : config_(config), backbone_(config.geometry, seed) {
  auto rng = predictor_rng(seed);
  ppn_ = PromptPredictor(config.geometry, config.num_classes, config.tokens_per_class, rng);
}

nn::ParamList Model::parameters() {
  nn::ParamList out;
  backbone_.collect(out);
  ppn_.collect(out);
  return out;
}

LearnedForward Model::forward_learned(const ImageEmbedding& embedding, int class_id, const ManualPrompts* manual) const {
  LearnedForward f;
  f.prompts = ppn_.predict(embedding, class_id);
  const auto& pe = backbone_.prompt_encoder();
  std::vector<ag::Var> sparse{pe.encode_box(f.prompts.box)};
  if (f.prompts.dense_tokens.rows() > 0) sparse.push_back(f.prompts.dense_tokens);
  ag::Var dense;
  if (manual != nullptr) {
    PromptEmbeddings m = pe.encode(*manual);
    if (m.sparse.rows() > 0) sparse.push_back(m.sparse);
    if (manual->brush_mask) dense = m.dense;
  }
  if (!dense.defined()) dense = pe.encode_mask(f.prompts.mask_prompt);
  f.decoder = backbone_.decode(embedding, ag::concat_rows(sparse), dense);
  return f;
}

SegmentationResult Model::segment_embedding(const ImageEmbedding& embedding, int class_id,
                                            const std::optional<ManualPrompts>& manual) const {
  ag::NoGradGuard guard;
  return to_result(forward_learned(embedding, class_id, manual ? &*manual : nullptr).decoder);
}

SegmentationResult Model::segment_with_learned_prompts(const ImageTensor& image, int class_id,
                                                       const std::optional<ManualPrompts>& manual) const {
  return segment_embedding(backbone_.encode_image(image), class_id, manual);
}

SegmentationResult Model::segment_manual(const ImageEmbedding& embedding, const ManualPrompts& prompts) const {
  ag::NoGradGuard guard;
  PromptEmbeddings m = backbone_.encode_manual_prompts(prompts);
  return backbone_.decode_mask(embedding, m.sparse, m.dense);
}

}  // namespace promptseg
