#pragma once

// Binary checkpoint: magic "STOWCKPT", schema version, the ModelConfig as
// key-value text, then a name -> tensor table (explicit shape, little-endian
// float32). Training checkpoints append the step counter, extra trainable
// tensors and the optimizer moments so a run can resume exactly.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stow/ad/adam.hpp"
#include "stow/model/model.hpp"

namespace stow::model {

struct StoredTensor {
  std::string name;
  ad::Shape shape;
  std::vector<float> values;

  friend bool operator==(const StoredTensor&, const StoredTensor&) = default;
};

struct TrainingState {
  std::int64_t step = 0;             // completed optimizer steps
  std::vector<StoredTensor> extras;  // trainable tensors outside the network
  ad::OptimizerState<float> optimizer;
  std::string train_config;          // serialized key-value text

  friend bool operator==(const TrainingState& a, const TrainingState& b) {
    return a.step == b.step && a.extras == b.extras && a.optimizer.step == b.optimizer.step &&
           a.optimizer.first_moment == b.optimizer.first_moment &&
           a.optimizer.second_moment == b.optimizer.second_moment && a.train_config == b.train_config;
  }
};

// Writes to a temporary sibling and renames, so readers never see a torn file.
void save_checkpoint(const std::string& path, const StowModel<float>& model,
                     const std::optional<TrainingState>& training = std::nullopt);

struct LoadedCheckpoint {
  StowModel<float> model;
  std::optional<TrainingState> training;
};

// Throws ParseError with context on a bad magic, version, truncated data or a
// tensor whose shape disagrees with the embedded ModelConfig. Nothing is
// returned unless the whole file validates.
[[nodiscard]] LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace stow::model
