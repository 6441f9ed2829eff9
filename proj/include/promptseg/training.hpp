#pragma once

#include "promptseg/checkpoint.hpp"
#include "promptseg/data.hpp"
#include "promptseg/losses.hpp"
#include "promptseg/peft.hpp"
#include "promptseg/ppn.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace promptseg {

/// Adam with decoupled weight decay; each parameter carries its own learning
/// rate and decay (its group's settings).
class AdamW {
 public:
  struct Entry {
    std::string name;
    Parameter* param;
    double lr;
    double weight_decay;
    Matrix m;
    Matrix v;
  };

  explicit AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void add(std::string name, Parameter* param, double lr, double weight_decay);
  /// Updates every parameter that received a gradient, then clears gradients.
  void step();
  void zero_grad();
  long long steps() const { return t_; }
  const std::vector<Entry>& entries() const { return entries_; }

  /// Moments as "optim.m.<name>" / "optim.v.<name>", step count in metadata.
  void export_state(TensorArchive& archive) const;
  /// Throws LoadError when the archive lacks state for a registered parameter.
  void import_state(const TensorArchive& archive);

 private:
  double beta1_, beta2_, eps_;
  long long t_ = 0;
  std::vector<Entry> entries_;
};

struct TrainConfig {
  double lr_ppn = 1e-4;
  double lr_decoder = 1e-5;
  double weight_decay = 0.1;
  int batch_size = 4;
  int max_steps = 2000;
  std::uint64_t seed = 0;
  std::string geometry = "desk";
  int num_classes = 1;
  int tokens_per_class = 8;
  FreezePolicy freeze;
  LossWeights loss;
  bool augment = true;
  AugmentationPolicy augmentation;
  int few_shot_k = 10;

  std::string train_data;       // dataset directory
  std::string train_split;      // optional split file of stems
  std::string backbone;         // optional backbone archive
  std::string out_dir = "run";  // checkpoints and metrics log
  int checkpoint_every = 500;   // 0 disables intermediate checkpoints
  std::string resume;           // checkpoint to continue from

  void validate() const;
};

/// One optimization run over an in-memory dataset already in model space.
/// Randomness for step s derives from (seed, s) only, so a resumed run
/// replays the exact same batches and augmentations.
class Trainer {
 public:
  Trainer(Model& model, const Dataset& train_set, const TrainConfig& config);

  /// One optimizer step over one batch; returns the batch-mean report.
  LossReport step();
  long long step_index() const { return optimizer_.steps(); }
  const AdamW& optimizer() const { return optimizer_; }
  const ParameterCensus& census() const { return census_; }
  const FrozenSnapshot& frozen_snapshot() const { return snapshot_; }

  /// Sample indices used by step `s`.
  std::vector<std::size_t> batch_indices(long long s) const;

  void export_state(TensorArchive& archive) const;
  void import_state(const TensorArchive& archive);

 private:
  const ImageEmbedding& embedding_for(std::size_t index);

  Model& model_;
  const Dataset& data_;
  TrainConfig config_;
  AdamW optimizer_;
  ParameterCensus census_;
  FrozenSnapshot snapshot_;
  std::map<std::size_t, ImageEmbedding> cache_;  // unaugmented embeddings
  mutable std::map<long long, std::vector<std::size_t>> epoch_orders_;
};

/// Per-sample loss on one (sample, class) pair, as a graph.
LossTerms sample_loss(const Model& model, const ImageEmbedding& embedding, const Sample& sample, int class_id,
                      const LossWeights& weights);

/// JSON line with the step and every LossReport field.
std::string metrics_record(long long step, const LossReport& report);

struct TrainOutcome {
  std::string checkpoint;       // final checkpoint path
  std::vector<LossReport> log;  // per-step reports of this invocation
  ParameterCensus census;
  bool frozen_intact = false;
  long long final_step = 0;
};

using ProgressFn = std::function<void(long long step, const LossReport&)>;

/// Builds the model, optionally loads a backbone archive or resumes from a
/// checkpoint, trains to max_steps writing `out_dir/metrics.ndjson` and
/// checkpoints, and verifies frozen tensors at the end.
TrainOutcome train(const TrainConfig& config, const ProgressFn& progress = {});
/// Same as `train` on an in-memory dataset.
TrainOutcome train_on(const TrainConfig& config, const Dataset& model_space, const ProgressFn& progress = {});

/// First k samples of the seeded shuffle; InputError when k exceeds the size.
Dataset few_shot_subset(const Dataset& dataset, int k, std::uint64_t seed);
TrainOutcome few_shot_train(const TrainConfig& config, const ProgressFn& progress = {});

/// Resizes and pads every sample to the geometry's input size.
Dataset to_model_space(const Dataset& dataset, const GeometryPreset& geometry);

// ------------------------------------------------------------------ backbone pretraining

/// Trains the toy backbone as a promptable segmenter on manual prompts (box,
/// points, brush; random prompts with objectness false on empty images) so
/// that a frozen backbone is meaningful for prompt learning.
struct PretrainConfig {
  int steps = 3000;
  int batch_size = 4;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::string geometry = "desk";
  int synth_count = 400;
  LossWeights loss;
  bool augment = true;
  AugmentationPolicy augmentation;
};

/// Random manual prompts for a sample: gt-derived when the class is present.
ManualPrompts random_manual_prompts(const BinaryMask& gt, const GeometryPreset& geometry, std::mt19937_64& rng);

void pretrain_backbone(Backbone& backbone, const Dataset& model_space, const PretrainConfig& config,
                       const ProgressFn& progress = {});

/// Seed stream of the synthetic pretraining set, disjoint from user seeds
/// passed straight to `synth_generate`.
inline constexpr std::uint64_t kPretrainDataStream = 0x70726574ULL;

/// Fresh backbone pretrained on `config.synth_count` synthetic images drawn
/// from `mix_seed(config.seed, kPretrainDataStream)`.
std::unique_ptr<Backbone> pretrain_synthetic(const PretrainConfig& config, const ProgressFn& progress = {});

}  // namespace promptseg
