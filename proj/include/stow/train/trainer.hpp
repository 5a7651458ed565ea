#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "stow/ad/adam.hpp"
#include "stow/model/checkpoint.hpp"
#include "stow/model/model.hpp"
#include "stow/synth/synthgen.hpp"
#include "stow/train/losses.hpp"

namespace stow::train {

struct TrainConfig {
  std::uint64_t seed = 1;
  std::int64_t iterations = 4000;
  int batch_size = 4;
  int frames_per_sample = 2;
  double learning_rate = 1e-4;
  std::int64_t decay_step = 3500;
  double decay_factor = 0.1;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global L2 norm; 0 disables
  LossWeights weights;
  ContrastiveConfig contrastive;
  double initial_log_temperature = 2.659260036932778;  // ln(1 / 0.07)
  double max_log_temperature = 4.605170185988092;      // ln(100)
  // augmentation, applied jointly to every frame of a sample
  bool rotate = true;        // multiples of 90 degrees
  double brightness = 0.1;   // additive, uniform in [-b, b]
  double contrast = 0.2;     // multiplicative about the mean, 1 +- c
  double saturation = 0.2;   // blend toward gray, 1 +- s
  std::int64_t checkpoint_every = 1000;  // 0: final checkpoint only
  std::int64_t log_every = 10;
  int workers = 0;  // 0: STOW_WORKERS or 1

  void validate() const;
  [[nodiscard]] KeyValueConfig to_keyvalue() const;
  // Keys without the "train." prefix; a "preset" key selects the base.
  static TrainConfig from_keyvalue(const KeyValueConfig& kv);
  [[nodiscard]] ad::AdamConfig adam() const;

  // "desk" (the defaults), "long-shelf" and "long-tabletop".
  static TrainConfig preset(const std::string& name);
};

// Worker count from the config or the STOW_WORKERS environment variable.
[[nodiscard]] int resolve_workers(int configured);

struct Augmentation {
  int quarter_turns = 0;  // counter-clockwise
  double brightness = 0.0;
  double contrast = 1.0;
  double saturation = 1.0;
};

[[nodiscard]] Augmentation draw_augmentation(const TrainConfig& config, std::mt19937_64& rng);
[[nodiscard]] ImageU8 augment_image(const ImageU8& image, const Augmentation& aug);
[[nodiscard]] BinaryMask rotate_mask(const BinaryMask& mask, int quarter_turns);

// Area-averaged mask at 1/factor resolution.
[[nodiscard]] std::vector<double> downsample_mask(const BinaryMask& mask, int factor);

// K distinct frame indices in ascending order.
[[nodiscard]] std::vector<std::size_t> sample_frames(std::size_t sequence_length, std::size_t k, std::mt19937_64& rng);

struct TrainingSample {
  std::vector<ImageU8> images;
  std::vector<FrameTargets> targets;
  std::map<int, int> appearance_groups;
};

[[nodiscard]] TrainingSample make_sample(const synth::SequenceRecord& sequence, std::span<const std::size_t> frames,
                                         const Augmentation& aug, int mask_factor);

struct StepMetrics {
  std::int64_t step = 0;  // index of the step just taken
  double class_loss = 0, ce_loss = 0, dice_loss = 0, contrastive_loss = 0, softmax_loss = 0, total = 0;
  double learning_rate = 0;

  [[nodiscard]] std::string log_line() const;
};

// Loss of one sample with deep supervision: class and mask terms over every
// decoder layer including the initial queries, tracking terms over layers
// 1..L. Per-layer terms are averaged.
template <typename T>
LossTerms<T> sample_losses(const model::StowModel<T>& model, const TrainingSample& sample, const TrainConfig& config,
                           const Tensor<T>& log_temperature, std::mt19937_64* negative_rng);

class Trainer {
 public:
  Trainer(std::vector<synth::SequenceRecord> dataset, const model::ModelConfig& model_config, TrainConfig config);
  // Continues from a checkpoint saved during training.
  Trainer(std::vector<synth::SequenceRecord> dataset, model::LoadedCheckpoint checkpoint, TrainConfig config);

  // One optimizer step over a freshly sampled batch.
  StepMetrics step();
  [[nodiscard]] std::int64_t completed_steps() const { return optimizer_.state().step; }
  [[nodiscard]] const model::StowModel<float>& model() const { return model_; }
  [[nodiscard]] double log_temperature() const { return log_temperature_[0]; }
  [[nodiscard]] model::TrainingState training_state() const;
  void save(const std::string& path) const;

 private:
  void init();
  std::vector<ad::Tensor<float>> trainables(model::StowModel<float>& m, ad::Tensor<float>& tau);

  std::vector<synth::SequenceRecord> dataset_;
  TrainConfig config_;
  model::StowModel<float> model_;
  ad::Tensor<float> log_temperature_;
  ad::Adam<float> optimizer_;
  std::vector<model::StowModel<float>> replicas_;
  std::vector<ad::Tensor<float>> replica_tau_;
};

struct TrainRunResult {
  std::vector<StepMetrics> history;
  std::string final_checkpoint;
};

// Runs until config.iterations steps are complete, appending metrics to
// <out>/metrics.log and writing <out>/checkpoint_<step>.ckpt periodically and
// <out>/final.ckpt at the end. A resume checkpoint continues its step count.
TrainRunResult train_loop(std::vector<synth::SequenceRecord> dataset, const model::ModelConfig& model_config,
                          const TrainConfig& config, const std::string& out_dir,
                          const std::optional<std::string>& resume_from = std::nullopt,
                          const std::function<void(const StepMetrics&)>& on_step = {});

}  // namespace stow::train
