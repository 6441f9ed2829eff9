#include "promptseg/training.hpp"

#include "promptseg/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace promptseg {

namespace fs = std::filesystem;

// ------------------------------------------------------------------ optimizer

void AdamW::add(std::string name, Parameter* param, double lr, double weight_decay) {
  entries_.push_back(Entry{std::move(name), param, lr, weight_decay, Matrix::Zero(param->value.rows(), param->value.cols()),
                           Matrix::Zero(param->value.rows(), param->value.cols())});
}

void AdamW::zero_grad() {
  for (auto& e : entries_) e.param->zero_grad();
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& e : entries_) {
    Parameter& p = *e.param;
    if (!p.has_grad()) continue;
    e.m = beta1_ * e.m + (1.0 - beta1_) * p.grad;
    e.v = beta2_ * e.v + (1.0 - beta2_) * p.grad.cwiseProduct(p.grad);
    p.value *= 1.0 - e.lr * e.weight_decay;
    p.value.array() -= e.lr * (e.m.array() / bc1) / ((e.v.array() / bc2).sqrt() + eps_);
  }
  zero_grad();
}

void AdamW::export_state(TensorArchive& archive) const {
  archive.metadata["optimizer"] = {{"step", t_}};
  for (const auto& e : entries_) {
    archive.add("optim.m." + e.name, e.m);
    archive.add("optim.v." + e.name, e.v);
  }
}

void AdamW::import_state(const TensorArchive& archive) {
  if (!archive.metadata.contains("optimizer")) throw LoadError("checkpoint has no optimizer state");
  std::vector<std::string> missing;
  for (auto& e : entries_) {
    const Matrix* m = archive.find("optim.m." + e.name);
    const Matrix* v = archive.find("optim.v." + e.name);
    if (m == nullptr || v == nullptr || m->rows() != e.m.rows() || m->cols() != e.m.cols()) {
      missing.push_back(e.name);
      continue;
    }
    e.m = *m;
    e.v = *v;
  }
  if (!missing.empty()) {
    std::string msg = "optimizer state missing or mismatched for: " + missing[0];
    for (std::size_t i = 1; i < missing.size(); ++i) msg += ", " + missing[i];
    throw LoadError(msg);
  }
  t_ = archive.metadata["optimizer"].at("step").get<long long>();
}

// ------------------------------------------------------------------ config

void TrainConfig::validate() const {
  if (!(lr_ppn > 0) || !(lr_decoder > 0)) throw ConfigError("learning rates must be positive");
  if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (tokens_per_class < 3) throw ConfigError("tokens_per_class must be >= 3");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (few_shot_k < 1) throw ConfigError("few_shot_k must be >= 1");
  if (loss.lambda1 < 0 || loss.lambda2 < 0 || loss.lambda3 < 0) throw ConfigError("loss weights must be nonnegative");
  if (loss.gamma < 0) throw ConfigError("loss.gamma must be >= 0");
  if (loss.alpha < 0 || loss.alpha > 1) throw ConfigError("loss.alpha must lie in [0,1]");
  GeometryPreset::by_name(geometry);
  freeze.validate();
  augmentation.validate();
}

// ------------------------------------------------------------------ trainer

namespace {

constexpr std::uint64_t kAugmentStream = 0x61756700ULL;
constexpr std::uint64_t kEpochStream = 0x65706f63ULL;

void check_finite(const LossReport& r, long long step, const std::string& sample_id) {
  const double parts[] = {r.total, r.mask_prompt_focal, r.final_mask_focal, r.box_l1, r.box_giou, r.objectness_bce};
  if (std::all_of(std::begin(parts), std::end(parts), [](double v) { return std::isfinite(v); })) return;
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "non-finite loss at step %lld (sample %s): total=%g mask_prompt_focal=%g final_mask_focal=%g "
                "box_l1=%g box_giou=%g objectness_bce=%g",
                step, sample_id.c_str(), r.total, r.mask_prompt_focal, r.final_mask_focal, r.box_l1, r.box_giou,
                r.objectness_bce);
  throw TrainingError(buf);
}

void accumulate(LossReport& into, const LossReport& r, double w) {
  into.total += w * r.total;
  into.mask_prompt_focal += w * r.mask_prompt_focal;
  into.final_mask_focal += w * r.final_mask_focal;
  into.box_l1 += w * r.box_l1;
  into.box_giou += w * r.box_giou;
  into.objectness_bce += w * r.objectness_bce;
}

}  // namespace

Trainer::Trainer(Model& model, const Dataset& train_set, const TrainConfig& config)
    : model_(model), data_(train_set), config_(config) {
  config_.validate();
  if (data_.empty()) throw ConfigError("training dataset is empty (0 images)");
  const int s = model.geometry().input_size;
  for (const auto& sample : data_) {
    if (sample.image.height != s || sample.image.width != s)
      throw ConfigError("training sample '" + sample.id + "' is not in model space (" + std::to_string(s) + "px)");
    if (sample.num_classes() != model.config().num_classes)
      throw ConfigError("training sample '" + sample.id + "' has " + std::to_string(sample.num_classes()) +
                        " class masks, model has " + std::to_string(model.config().num_classes));
  }
  for (auto& [name, p] : model.parameters()) {
    if (!p->trainable) continue;
    switch (group_of(name)) {
      case ParamGroup::ppn: optimizer_.add(name, p, config_.lr_ppn, config_.weight_decay); break;
      case ParamGroup::decoder: optimizer_.add(name, p, config_.lr_decoder, config_.weight_decay); break;
      case ParamGroup::other: throw ConfigError("parameter " + name + " is trainable but belongs to no group");
    }
  }
  census_ = promptseg::census(model);
  snapshot_ = snapshot_frozen(model);
}

std::vector<std::size_t> Trainer::batch_indices(long long s) const {
  const auto n = static_cast<long long>(data_.size());
  std::vector<std::size_t> out;
  for (int j = 0; j < config_.batch_size; ++j) {
    const long long slot = s * config_.batch_size + j;
    const long long epoch = slot / n;
    auto it = epoch_orders_.find(epoch);
    if (it == epoch_orders_.end()) {
      std::vector<std::size_t> order(data_.size());
      std::iota(order.begin(), order.end(), 0);
      std::mt19937_64 rng(mix_seed(config_.seed ^ kEpochStream, static_cast<std::uint64_t>(epoch)));
      std::shuffle(order.begin(), order.end(), rng);
      it = epoch_orders_.emplace(epoch, std::move(order)).first;
      // Only the current and next epoch are ever needed.
      while (epoch_orders_.size() > 2) epoch_orders_.erase(epoch_orders_.begin());
    }
    out.push_back(it->second[static_cast<std::size_t>(slot % n)]);
  }
  return out;
}

const ImageEmbedding& Trainer::embedding_for(std::size_t index) {
  auto it = cache_.find(index);
  if (it == cache_.end()) it = cache_.emplace(index, model_.backbone().encode_image(data_[index].image)).first;
  return it->second;
}

LossTerms sample_loss(const Model& model, const ImageEmbedding& embedding, const Sample& sample, int class_id,
                      const LossWeights& weights) {
  const LearnedForward f = model.forward_learned(embedding, class_id);
  const auto k = static_cast<std::size_t>(class_id);
  return total_loss(f.prompts.mask_prompt, f.decoder.mask_logits, f.prompts.box, f.decoder.objectness, sample.masks[k],
                    sample.present[k], weights);
}

LossReport Trainer::step() {
  const long long s = optimizer_.steps();
  const auto indices = batch_indices(s);
  const int classes = model_.config().num_classes;
  const double w = 1.0 / (static_cast<double>(indices.size()) * classes);
  LossReport mean;
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const Sample& base = data_[indices[j]];
    Sample augmented;
    const Sample* sample = &base;
    ImageEmbedding fresh;
    const ImageEmbedding* emb = nullptr;
    if (config_.augment) {
      const auto slot = static_cast<std::uint64_t>(s * config_.batch_size) + j;
      augmented = augment(base, config_.augmentation, mix_seed(config_.seed ^ kAugmentStream, slot));
      sample = &augmented;
      fresh = model_.backbone().encode_image(augmented.image);
      emb = &fresh;
    } else {
      emb = &embedding_for(indices[j]);
    }
    for (int k = 0; k < classes; ++k) {
      LossTerms t = sample_loss(model_, *emb, *sample, k, config_.loss);
      check_finite(t.report, s, sample->id);
      ag::backward(ag::scale(t.total, w));
      accumulate(mean, t.report, w);
    }
  }
  optimizer_.step();
  return mean;
}

void Trainer::export_state(TensorArchive& archive) const {
  optimizer_.export_state(archive);
  archive.metadata["train"] = {{"step", optimizer_.steps()}, {"seed", config_.seed}};
}

void Trainer::import_state(const TensorArchive& archive) { optimizer_.import_state(archive); }

std::string metrics_record(long long step, const LossReport& r) {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["total"] = r.total;
  j["mask_prompt_focal"] = r.mask_prompt_focal;
  j["final_mask_focal"] = r.final_mask_focal;
  j["box_l1"] = r.box_l1;
  j["box_giou"] = r.box_giou;
  j["objectness_bce"] = r.objectness_bce;
  return j.dump();
}

// ------------------------------------------------------------------ drivers

Dataset to_model_space(const Dataset& dataset, const GeometryPreset& geometry) {
  Dataset out;
  out.reserve(dataset.size());
  for (const auto& s : dataset) out.push_back(resize_pad(s, geometry.input_size));
  return out;
}

namespace {

std::string step_name(long long step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06lld.ckpt", step);
  return buf;
}

Dataset load_configured(const TrainConfig& config) {
  if (config.train_data.empty()) throw ConfigError("data.train is not set");
  Dataset raw = config.train_split.empty()
                    ? load_dataset(config.train_data, config.num_classes)
                    : load_dataset(config.train_data, config.num_classes, config.train_split);
  return to_model_space(raw, GeometryPreset::by_name(config.geometry));
}

}  // namespace

TrainOutcome train_on(const TrainConfig& config, const Dataset& data, const ProgressFn& progress) {
  config.validate();
  if (data.empty()) throw ConfigError("training dataset is empty (0 images)");
  ModelConfig mc;
  mc.geometry = GeometryPreset::by_name(config.geometry);
  mc.num_classes = config.num_classes;
  mc.tokens_per_class = config.tokens_per_class;
  Model model(mc, config.seed);

  TensorArchive resume;
  if (!config.resume.empty()) {
    resume = read_archive(config.resume);
    apply_policy(model, config.freeze, config.seed);
    nn::ParamList params = model.parameters();
    assign_parameters(params, resume, true);
  } else {
    if (!config.backbone.empty()) load_backbone_into(model, config.backbone);
    apply_policy(model, config.freeze, config.seed);
  }

  Trainer trainer(model, data, config);
  if (!config.resume.empty()) trainer.import_state(resume);

  const fs::path out_dir(config.out_dir);
  fs::create_directories(out_dir);
  std::ofstream log(out_dir / "metrics.ndjson", config.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw ConfigError("cannot write metrics log in " + out_dir.string());

  auto save = [&](const fs::path& path) {
    TensorArchive extra;
    trainer.export_state(extra);
    save_model(path, model, config.freeze, extra);
  };

  TrainOutcome out;
  while (trainer.step_index() < config.max_steps) {
    const LossReport r = trainer.step();
    const long long done = trainer.step_index();
    log << metrics_record(done, r) << '\n';
    out.log.push_back(r);
    if (progress) progress(done, r);
    if (config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.max_steps)
      save(out_dir / step_name(done));
  }
  log.flush();
  const fs::path final_path = out_dir / "final.ckpt";
  save(final_path);
  out.checkpoint = final_path.string();
  out.census = trainer.census();
  out.frozen_intact = frozen_integrity_check(model, trainer.frozen_snapshot());
  out.final_step = trainer.step_index();
  if (!out.frozen_intact) throw TrainingError("frozen tensors changed during training");
  return out;
}

TrainOutcome train(const TrainConfig& config, const ProgressFn& progress) {
  config.validate();
  return train_on(config, load_configured(config), progress);
}

Dataset few_shot_subset(const Dataset& dataset, int k, std::uint64_t seed) {
  if (k < 1) throw InputError("few-shot k must be >= 1");
  if (static_cast<std::size_t>(k) > dataset.size())
    throw InputError("few-shot k=" + std::to_string(k) + " exceeds dataset size " + std::to_string(dataset.size()));
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, 0x66657773ULL));
  std::shuffle(order.begin(), order.end(), rng);
  Dataset out;
  for (int i = 0; i < k; ++i) out.push_back(dataset[order[static_cast<std::size_t>(i)]]);
  return out;
}

TrainOutcome few_shot_train(const TrainConfig& config, const ProgressFn& progress) {
  config.validate();
  return train_on(config, few_shot_subset(load_configured(config), config.few_shot_k, config.seed), progress);
}

// ------------------------------------------------------------------ backbone pretraining

ManualPrompts random_manual_prompts(const BinaryMask& gt, const GeometryPreset& geometry, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  ManualPrompts p;
  const double side = gt.width;
  auto random_box = [&] {
    const double w = 0.1 + 0.6 * u01(rng);
    const double h = 0.05 + 0.4 * u01(rng);
    const double x1 = u01(rng) * (1 - w);
    const double y1 = u01(rng) * (1 - h);
    return Box{x1, y1, x1 + w, y1 + h};
  };
  auto pick_pixel = [&](std::uint8_t want) -> std::optional<PointPrompt> {
    for (int tries = 0; tries < 200; ++tries) {
      const int x = static_cast<int>(u01(rng) * gt.width);
      const int y = static_cast<int>(u01(rng) * gt.height);
      if (gt.at(y, x) == want)
        return PointPrompt{(x + 0.5) / side, (y + 0.5) / gt.height,
                           want ? PointLabel::foreground : PointLabel::background};
    }
    return std::nullopt;
  };

  const auto box = mask_bounding_box(gt);
  const double r = u01(rng);
  if (!box) {
    if (r < 0.4) {
      p.boxes.push_back(random_box());
    } else if (r < 0.8) {
      const int n = 1 + static_cast<int>(u01(rng) * 2);
      for (int i = 0; i < n; ++i)
        p.points.push_back({u01(rng), u01(rng), u01(rng) < 0.7 ? PointLabel::foreground : PointLabel::background});
    }
    return p;
  }
  auto jittered = [&] {
    const double bw = box->width(), bh = box->height();
    const double j = 0.1;
    Box b{std::clamp(box->x1 + (2 * u01(rng) - 1) * j * bw, 0.0, 1.0),
          std::clamp(box->y1 + (2 * u01(rng) - 1) * j * bh, 0.0, 1.0),
          std::clamp(box->x2 + (2 * u01(rng) - 1) * j * bw, 0.0, 1.0),
          std::clamp(box->y2 + (2 * u01(rng) - 1) * j * bh, 0.0, 1.0)};
    if (b.x2 <= b.x1 || b.y2 <= b.y1) return *box;
    return b;
  };
  if (r < 0.4) {
    p.boxes.push_back(u01(rng) < 0.5 ? *box : jittered());
  } else if (r < 0.6) {
    p.boxes.push_back(jittered());
    if (auto pt = pick_pixel(1)) p.points.push_back(*pt);
    if (u01(rng) < 0.5)
      if (auto pt = pick_pixel(0)) p.points.push_back(*pt);
  } else if (r < 0.85) {
    const int n = 1 + static_cast<int>(u01(rng) * 3);
    for (int i = 0; i < n; ++i)
      if (auto pt = pick_pixel(i == 0 || u01(rng) < 0.6 ? 1 : 0)) p.points.push_back(*pt);
  } else {
    BinaryMask brush = downsample_nearest(gt, geometry.mask_prompt_size);
    for (auto& v : brush.pixels)
      if (u01(rng) < 0.03) v = static_cast<std::uint8_t>(1 - v);
    p.brush_mask = std::move(brush);
  }
  return p;
}

void pretrain_backbone(Backbone& backbone, const Dataset& data, const PretrainConfig& config, const ProgressFn& progress) {
  if (data.empty()) throw ConfigError("pretraining dataset is empty");
  if (config.steps < 0 || config.batch_size < 1 || !(config.lr > 0)) throw ConfigError("invalid pretraining schedule");
  const GeometryPreset& g = backbone.geometry();
  AdamW opt;
  for (auto& [name, p] : backbone.parameters()) {
    p->trainable = true;
    opt.add(name, p, config.lr, 0.0);
  }
  const auto n = static_cast<long long>(data.size());
  std::vector<std::size_t> order;
  for (long long s = 0; s < config.steps; ++s) {
    const double w = 1.0 / config.batch_size;
    LossReport mean;
    for (int j = 0; j < config.batch_size; ++j) {
      const long long slot = s * config.batch_size + j;
      if (slot % n == 0) {
        order.resize(data.size());
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 shuffle_rng(mix_seed(config.seed ^ kEpochStream, static_cast<std::uint64_t>(slot / n)));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
      }
      std::mt19937_64 rng(mix_seed(config.seed ^ 0x70726574ULL, static_cast<std::uint64_t>(slot)));
      const Sample& base = data[order[static_cast<std::size_t>(slot % n)]];
      const Sample sample = config.augment ? augment(base, config.augmentation, rng()) : base;
      const int k = static_cast<int>(rng() % static_cast<std::uint64_t>(sample.num_classes()));
      const BinaryMask& gt = sample.masks[static_cast<std::size_t>(k)];
      const ManualPrompts prompts = random_manual_prompts(gt, g, rng);

      const ag::Var tokens = backbone.image_encoder().forward(sample.image);
      const PromptEmbeddings pe = backbone.prompt_encoder().encode(prompts);
      const DecoderOutput out = backbone.mask_decoder().forward(tokens, pe.sparse, pe.dense);
      const bool present = !gt.empty();
      ag::Var focal = focal_loss(ag::sigmoid(out.mask_logits), mask_to_matrix(gt, gt.height, gt.width),
                                 config.loss.gamma, config.loss.alpha);
      ag::Var obj = objectness_loss(out.objectness, present);
      ag::Var total = ag::add(ag::scale(focal, config.loss.lambda1), ag::scale(obj, config.loss.lambda3));
      LossReport r;
      r.final_mask_focal = focal.scalar();
      r.objectness_bce = obj.scalar();
      r.total = total.scalar();
      check_finite(r, s, sample.id);
      ag::backward(ag::scale(total, w));
      accumulate(mean, r, w);
    }
    opt.step();
    if (progress) progress(s + 1, mean);
  }
}

std::unique_ptr<Backbone> pretrain_synthetic(const PretrainConfig& config, const ProgressFn& progress) {
  const GeometryPreset g = GeometryPreset::by_name(config.geometry);
  const Dataset data = to_model_space(synth_generate(mix_seed(config.seed, kPretrainDataStream), config.synth_count), g);
  auto backbone = std::make_unique<Backbone>(g, config.seed);
  pretrain_backbone(*backbone, data, config, progress);
  return backbone;
}

}  // namespace promptseg
