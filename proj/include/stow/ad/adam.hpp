#pragma once

#include <cstdint>
#include <vector>

#include "stow/ad/tensor.hpp"

namespace stow::ad {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Steps with index >= decay_step use learning_rate * decay_factor.
  std::int64_t decay_step = 3500;
  double decay_factor = 0.1;
  double weight_decay = 0.0;  // decoupled (AdamW style); 0 disables
};

template <typename T>
struct OptimizerState {
  std::int64_t step = 0;  // completed updates
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
};

// Adam with bias correction and a single step decay of the learning rate.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig config) : config_(config) {}

  [[nodiscard]] double rate_at(std::int64_t step_index) const {
    return step_index >= config_.decay_step ? config_.learning_rate * config_.decay_factor : config_.learning_rate;
  }
  [[nodiscard]] double current_rate() const { return rate_at(state_.step); }

  // Updates every parameter from its accumulated grad. Parameters without a
  // grad buffer are treated as having zero gradient.
  void step(std::vector<Tensor<T>>& params);

  [[nodiscard]] const AdamConfig& config() const { return config_; }
  [[nodiscard]] const OptimizerState<T>& state() const { return state_; }
  void set_state(OptimizerState<T> state) { state_ = std::move(state); }

 private:
  AdamConfig config_;
  OptimizerState<T> state_;
};

}  // namespace stow::ad
