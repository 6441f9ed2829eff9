#include "promptseg/backbone.hpp"

#include "promptseg/errors.hpp"

#include <algorithm>
#include <cmath>

namespace promptseg {

namespace {

constexpr int kHeads = 4;

std::string shape_str(Index a, Index b) { return std::to_string(a) + "x" + std::to_string(b); }

}  // namespace

Matrix patchify(const ImageTensor& image, int patch_size) {
  const int gh = image.height / patch_size;
  const int gw = image.width / patch_size;
  const int per = patch_size * patch_size;
  Matrix out(static_cast<Index>(gh) * gw, 3 * per);
  for (int r = 0; r < gh; ++r) {
    for (int c = 0; c < gw; ++c) {
      auto row = out.row(static_cast<Index>(r) * gw + c);
      for (int ch = 0; ch < 3; ++ch)
        for (int py = 0; py < patch_size; ++py)
          for (int px = 0; px < patch_size; ++px)
            row(ch * per + py * patch_size + px) = image.at(ch, r * patch_size + py, c * patch_size + px);
    }
  }
  return out;
}

Matrix bilinear_matrix(int out, int in) {
  Matrix m = Matrix::Zero(out, in);
  const double ratio = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    const double src = std::max(0.0, (i + 0.5) * ratio - 0.5);
    const int i0 = std::min(static_cast<int>(std::floor(src)), in - 1);
    const int i1 = std::min(i0 + 1, in - 1);
    const double t = src - i0;
    m(i, i0) += 1.0 - t;
    m(i, i1) += t;
  }
  return m;
}

Matrix embedding_tokens(const ImageEmbedding& embedding) { return embedding.data.transpose(); }

// ---------------------------------------------------------------- encoder

ImageEncoder::ImageEncoder(const GeometryPreset& geometry, nn::Rng& rng) : geometry_(geometry) {
  const Index c = geometry.embed_channels;
  const int p = GeometryPreset::kPatchSize;
  patch_embed_ = nn::Linear(3 * p * p, c, rng);
  pos_tokens_ = grid_positional_encoding(static_cast<int>(c), geometry.embed_grid).transpose();
  for (int i = 0; i < 2; ++i) {
    blocks_.push_back(Block{nn::LayerNorm(c), nn::Attention(c, c, kHeads, rng), nn::LayerNorm(c),
                            nn::Mlp(c, 2 * c, c, 2, rng)});
  }
  neck_ = nn::Linear(c, c, rng);
  neck_norm_ = nn::LayerNorm(c);
}

ag::Var ImageEncoder::forward(const ImageTensor& image) const {
  ag::Var x = patch_embed_(ag::constant(patchify(image, GeometryPreset::kPatchSize)));
  x = ag::add(x, ag::constant(pos_tokens_));
  for (const auto& b : blocks_) {
    ag::Var h = b.norm1(x);
    x = ag::add(x, b.attn(h, h, h));
    x = ag::add(x, b.mlp(b.norm2(x)));
  }
  return neck_norm_(neck_(x));
}

void ImageEncoder::collect(const std::string& prefix, nn::ParamList& out) {
  patch_embed_.collect(nn::join(prefix, "patch_embed"), out);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string b = nn::join(prefix, "blocks." + std::to_string(i));
    blocks_[i].norm1.collect(nn::join(b, "norm1"), out);
    blocks_[i].attn.collect(nn::join(b, "attn"), out);
    blocks_[i].norm2.collect(nn::join(b, "norm2"), out);
    blocks_[i].mlp.collect(nn::join(b, "mlp"), out);
  }
  neck_.collect(nn::join(prefix, "neck"), out);
  neck_norm_.collect(nn::join(prefix, "neck_norm"), out);
}

// ---------------------------------------------------------- prompt encoder

PromptEncoder::PromptEncoder(const GeometryPreset& geometry, nn::Rng& rng) : geometry_(geometry) {
  const Index c = geometry.embed_channels;
  point_embeddings_ = Parameter(nn::normal(4, c, 1.0, rng));
  no_mask_embed_ = Parameter(nn::normal(1, c, 1.0, rng));
  mask_down1_ = nn::Conv2x2(1, 4, rng);
  mask_norm1_ = nn::LayerNorm(4);
  mask_down2_ = nn::Conv2x2(4, 16, rng);
  mask_norm2_ = nn::LayerNorm(16);
  mask_proj_ = nn::Conv1x1(16, c, rng);
}

ag::Var PromptEncoder::empty_sparse() const { return ag::constant(Matrix(0, geometry_.embed_channels)); }

ag::Var PromptEncoder::encode_points(const std::vector<PointPrompt>& points) const {
  if (points.empty()) return empty_sparse();
  Matrix xy(static_cast<Index>(points.size()), 2);
  std::vector<ag::Var> label_rows;
  ag::Var table = ag::parameter(point_embeddings_);
  for (std::size_t i = 0; i < points.size(); ++i) {
    xy(static_cast<Index>(i), 0) = points[i].x;
    xy(static_cast<Index>(i), 1) = points[i].y;
    label_rows.push_back(ag::slice_rows(table, static_cast<Index>(points[i].label), 1));
  }
  ag::Var pe = coordinate_encoding(ag::constant(std::move(xy)), geometry_.embed_channels, geometry_.embed_grid);
  return ag::add(pe, ag::concat_rows(label_rows));
}

ag::Var PromptEncoder::encode_box(const ag::Var& box) const {
  if (box.rows() != 1 || box.cols() != 4) throw InputError("box must be 1x4");
  ag::Var corners = ag::reshape(box, 2, 2);  // rows: (x1,y1), (x2,y2)
  ag::Var pe = coordinate_encoding(corners, geometry_.embed_channels, geometry_.embed_grid);
  return ag::add(pe, ag::slice_rows(ag::parameter(point_embeddings_), 2, 2));
}

Matrix PromptEncoder::brush_to_logits(const BinaryMask& brush) {
  Matrix m(1, static_cast<Index>(brush.height) * brush.width);
  for (std::size_t i = 0; i < brush.pixels.size(); ++i) m(0, static_cast<Index>(i)) = brush.pixels[i] ? kBrushLogit : -kBrushLogit;
  return m;
}

ag::Var PromptEncoder::encode_mask(const ag::Var& mask_logits) const {
  const Index m = geometry_.mask_prompt_size;
  if (mask_logits.rows() != 1 || mask_logits.cols() != m * m)
    throw InputError("mask prompt must be 1x" + std::to_string(m * m) + ", got " +
                     shape_str(mask_logits.rows(), mask_logits.cols()));
  ag::Var x = mask_down1_(mask_logits, m, m);
  x = ag::gelu(mask_norm1_.channels(x));
  x = mask_down2_(x, m / 2, m / 2);
  x = ag::gelu(mask_norm2_.channels(x));
  return mask_proj_(x);
}

ag::Var PromptEncoder::no_mask_dense() const {
  const Index cells = geometry_.grid_cells();
  ag::Var ones = ag::constant(Matrix::Ones(1, cells));
  return ag::matmul(ag::transpose(ag::parameter(no_mask_embed_)), ones);
}

PromptEmbeddings PromptEncoder::encode(const ManualPrompts& prompts) const {
  prompts.validate();
  std::vector<ag::Var> parts;
  if (!prompts.points.empty()) parts.push_back(encode_points(prompts.points));
  for (const auto& b : prompts.boxes) {
    Matrix m(1, 4);
    m << b.x1, b.y1, b.x2, b.y2;
    parts.push_back(encode_box(ag::constant(std::move(m))));
  }
  PromptEmbeddings out;
  out.sparse = parts.empty() ? empty_sparse() : ag::concat_rows(parts);
  if (prompts.brush_mask) {
    const auto& b = *prompts.brush_mask;
    if (b.height != geometry_.mask_prompt_size || b.width != geometry_.mask_prompt_size)
      throw InputError("brush mask must be " + shape_str(geometry_.mask_prompt_size, geometry_.mask_prompt_size) +
                       ", got " + shape_str(b.height, b.width));
    out.dense = encode_mask(ag::constant(brush_to_logits(b)));
  } else {
    out.dense = no_mask_dense();
  }
  return out;
}

void PromptEncoder::collect(const std::string& prefix, nn::ParamList& out) {
  out.emplace_back(nn::join(prefix, "point_embeddings"), &point_embeddings_);
  out.emplace_back(nn::join(prefix, "no_mask_embed"), &no_mask_embed_);
  mask_down1_.collect(nn::join(prefix, "mask_down1"), out);
  mask_norm1_.collect(nn::join(prefix, "mask_norm1"), out);
  mask_down2_.collect(nn::join(prefix, "mask_down2"), out);
  mask_norm2_.collect(nn::join(prefix, "mask_norm2"), out);
  mask_proj_.collect(nn::join(prefix, "mask_proj"), out);
}

// ------------------------------------------------------------ mask decoder

MaskDecoder::MaskDecoder(const GeometryPreset& geometry, nn::Rng& rng) : geometry_(geometry) {
  const Index c = geometry.embed_channels;
  mask_token_ = Parameter(nn::normal(1, c, 1.0, rng));
  objectness_token_ = Parameter(nn::normal(1, c, 1.0, rng));
  image_pe_ = grid_positional_encoding(static_cast<int>(c), geometry.embed_grid).transpose();
  for (int i = 0; i < 2; ++i) {
    TwoWayLayer l{nn::Attention(c, c, kHeads, rng),   nn::LayerNorm(c), nn::Attention(c, c / 2, kHeads, rng),
                  nn::LayerNorm(c),                   nn::Mlp(c, 2 * c, c, 2, rng), nn::LayerNorm(c),
                  nn::LayerNorm(c),                   nn::Attention(c, c / 2, kHeads, rng), i == 0};
    layers_.push_back(std::move(l));
  }
  final_attn_ = nn::Attention(c, c / 2, kHeads, rng);
  final_norm_ = nn::LayerNorm(c);
  upscale1_ = nn::ConvTranspose2x2(c, c / 4, rng);
  upscale_norm_ = nn::LayerNorm(c / 4);
  upscale2_ = nn::ConvTranspose2x2(c / 4, c / 8, rng);
  hyper_mlp_ = nn::Mlp(c, c, c / 8, 3, rng);
  objectness_head_ = nn::Mlp(c, c, 1, 3, rng);
  upsample_rows_ = bilinear_matrix(geometry.input_size, geometry.mask_prompt_size);
  upsample_cols_t_ = upsample_rows_.transpose();
}

DecoderOutput MaskDecoder::forward(const ag::Var& image_tokens, const ag::Var& sparse, const ag::Var& dense) const {
  const Index c = geometry_.embed_channels;
  const Index g = geometry_.embed_grid;
  const Index cells = g * g;
  if (sparse.cols() != c)
    throw InputError("decoder: token dimension " + std::to_string(sparse.cols()) + " != C=" + std::to_string(c));
  if (image_tokens.rows() != cells || image_tokens.cols() != c)
    throw InputError("decoder: image tokens " + shape_str(image_tokens.rows(), image_tokens.cols()) + ", expected " +
                     shape_str(cells, c));
  if (dense.rows() != c || dense.cols() != cells)
    throw InputError("decoder: dense embedding " + shape_str(dense.rows(), dense.cols()) + ", expected " +
                     shape_str(c, cells));

  const Index k = sparse.rows();
  std::vector<ag::Var> token_parts;
  if (k > 0) token_parts.push_back(sparse);
  token_parts.push_back(ag::parameter(mask_token_));
  token_parts.push_back(ag::parameter(objectness_token_));
  const ag::Var query_pe = ag::concat_rows(token_parts);
  const ag::Var key_pe = ag::constant(image_pe_);

  ag::Var queries = query_pe;
  ag::Var keys = ag::add(image_tokens, ag::transpose(dense));

  for (const auto& l : layers_) {
    if (l.skip_first_pe) {
      queries = l.self_attn(queries, queries, queries);
    } else {
      ag::Var q = ag::add(queries, query_pe);
      queries = ag::add(queries, l.self_attn(q, q, queries));
    }
    queries = l.norm1(queries);

    ag::Var q = ag::add(queries, query_pe);
    ag::Var kk = ag::add(keys, key_pe);
    queries = l.norm2(ag::add(queries, l.token_to_image(q, kk, keys)));
    queries = l.norm3(ag::add(queries, l.mlp(queries)));

    q = ag::add(queries, query_pe);
    kk = ag::add(keys, key_pe);
    keys = l.norm4(ag::add(keys, l.image_to_token(kk, q, queries)));
  }
  {
    ag::Var q = ag::add(queries, query_pe);
    ag::Var kk = ag::add(keys, key_pe);
    queries = final_norm_(ag::add(queries, final_attn_(q, kk, keys)));
  }

  const ag::Var mask_out = ag::slice_rows(queries, k, 1);
  const ag::Var obj_out = ag::slice_rows(queries, k + 1, 1);

  ag::Var feat = ag::transpose(keys);  // C × cells
  feat = upscale1_(feat, g, g);
  feat = ag::gelu(upscale_norm_.channels(feat));
  feat = ag::gelu(upscale2_(feat, 2 * g, 2 * g));  // C/8 × (4g)²

  DecoderOutput out;
  out.low_res_logits = ag::matmul(hyper_mlp_(mask_out), feat);
  const Index m = geometry_.mask_prompt_size;
  ag::Var grid = ag::reshape(out.low_res_logits, m, m);
  out.mask_logits = ag::matmul(ag::constant(upsample_rows_), ag::matmul(grid, ag::constant(upsample_cols_t_)));
  out.objectness = objectness_head_(obj_out);
  out.prompt_tokens = static_cast<int>(k);
  out.decoder_tokens = static_cast<int>(k) + kOutputTokens;
  return out;
}

void MaskDecoder::collect(const std::string& prefix, nn::ParamList& out) {
  out.emplace_back(nn::join(prefix, "mask_token"), &mask_token_);
  out.emplace_back(nn::join(prefix, "objectness_token"), &objectness_token_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string p = nn::join(prefix, "layers." + std::to_string(i));
    auto& l = layers_[i];
    l.self_attn.collect(nn::join(p, "self_attn"), out);
    l.norm1.collect(nn::join(p, "norm1"), out);
    l.token_to_image.collect(nn::join(p, "token_to_image"), out);
    l.norm2.collect(nn::join(p, "norm2"), out);
    l.mlp.collect(nn::join(p, "mlp"), out);
    l.norm3.collect(nn::join(p, "norm3"), out);
    l.norm4.collect(nn::join(p, "norm4"), out);
    l.image_to_token.collect(nn::join(p, "image_to_token"), out);
  }
  final_attn_.collect(nn::join(prefix, "final_attn"), out);
  final_norm_.collect(nn::join(prefix, "final_norm"), out);
  upscale1_.collect(nn::join(prefix, "upscale1"), out);
  upscale_norm_.collect(nn::join(prefix, "upscale_norm"), out);
  upscale2_.collect(nn::join(prefix, "upscale2"), out);
  hyper_mlp_.collect(nn::join(prefix, "hyper_mlp"), out);
  objectness_head_.collect(nn::join(prefix, "objectness_head"), out);
}

std::vector<nn::Attention*> MaskDecoder::attentions() {
  std::vector<nn::Attention*> out;
  for (auto& l : layers_) {
    out.push_back(&l.self_attn);
    out.push_back(&l.token_to_image);
    out.push_back(&l.image_to_token);
  }
  out.push_back(&final_attn_);
  return out;
}

SegmentationResult to_result(const DecoderOutput& out) {
  SegmentationResult r;
  r.mask_logits = out.mask_logits.value();
  const Index s = r.mask_logits.rows();
  r.mask = BinaryMask(static_cast<int>(s), static_cast<int>(r.mask_logits.cols()));
  for (Index i = 0; i < r.mask_logits.size(); ++i) r.mask.pixels[static_cast<std::size_t>(i)] = r.mask_logits.data()[i] > 0.0;
  r.objectness_logit = out.objectness.scalar();
  r.object_present = r.objectness_logit >= 0.0;
  r.prompt_tokens = out.prompt_tokens;
  r.decoder_tokens = out.decoder_tokens;
  return r;
}

// ---------------------------------------------------------------- backbone

Backbone::Backbone(const GeometryPreset& geometry, std::uint64_t seed) : geometry_(geometry) {
  geometry.validate();
  nn::Rng rng(seed);
  encoder_ = ImageEncoder(geometry, rng);
  prompt_encoder_ = PromptEncoder(geometry, rng);
  decoder_ = MaskDecoder(geometry, rng);
}

ImageEmbedding Backbone::encode_image(const ImageTensor& image) const {
  if (image.height != geometry_.input_size || image.width != geometry_.input_size || image.data.rows() != 3)
    throw ConfigError("encode_image: expected 3x" + shape_str(geometry_.input_size, geometry_.input_size) + " input, got " +
                      std::to_string(image.data.rows()) + "x" + shape_str(image.height, image.width));
  ag::NoGradGuard guard;
  ImageEmbedding e;
  e.grid = geometry_.embed_grid;
  e.data = encoder_.forward(image).value().transpose();
  return e;
}

PromptEmbeddings Backbone::encode_manual_prompts(const ManualPrompts& prompts) const {
  return prompt_encoder_.encode(prompts);
}

DecoderOutput Backbone::decode(const ImageEmbedding& embedding, const ag::Var& sparse, const ag::Var& dense) const {
  if (embedding.channels() != geometry_.embed_channels || embedding.grid != geometry_.embed_grid)
    throw InputError("decode: embedding shape does not match the geometry preset");
  return decoder_.forward(ag::constant(embedding_tokens(embedding)), sparse, dense);
}

SegmentationResult Backbone::decode_mask(const ImageEmbedding& embedding, const ag::Var& sparse,
                                         const ag::Var& dense) const {
  return to_result(decode(embedding, sparse, dense));
}

void Backbone::collect(nn::ParamList& out) {
  encoder_.collect("image_encoder", out);
  prompt_encoder_.collect("prompt_encoder", out);
  decoder_.collect("mask_decoder", out);
}

nn::ParamList Backbone::parameters() {
  nn::ParamList out;
  collect(out);
  return out;
}

}  // namespace promptseg
