#include "stow/ad/adam.hpp"

#include <cmath>

#include "stow/common/errors.hpp"

namespace stow::ad {

template <typename T>
void Adam<T>::step(std::vector<Tensor<T>>& params) {
  if (state_.first_moment.empty()) {
    for (const auto& p : params) {
      state_.first_moment.emplace_back(p.numel(), T(0));
      state_.second_moment.emplace_back(p.numel(), T(0));
    }
  }
  if (state_.first_moment.size() != params.size()) {
    throw UsageError("Adam: parameter count changed between steps");
  }
  const double lr = rate_at(state_.step);
  const std::int64_t t = state_.step + 1;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t));
  const T b1 = static_cast<T>(config_.beta1);
  const T b2 = static_cast<T>(config_.beta2);

  for (std::size_t p = 0; p < params.size(); ++p) {
    auto values = params[p].mutable_values();
    auto grad = params[p].grad();
    auto& m = state_.first_moment[p];
    auto& v = state_.second_moment[p];
    if (m.size() != values.size()) throw UsageError("Adam: parameter shape changed between steps");
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T g = grad.empty() ? T(0) : grad[i];
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      const double mhat = static_cast<double>(m[i]) / bc1;
      const double vhat = static_cast<double>(v[i]) / bc2;
      double update = lr * mhat / (std::sqrt(vhat) + config_.epsilon);
      if (config_.weight_decay > 0.0) update += lr * config_.weight_decay * static_cast<double>(values[i]);
      values[i] = static_cast<T>(static_cast<double>(values[i]) - update);
    }
  }
  state_.step = t;
}

template class Adam<float>;
template class Adam<double>;

}  // namespace stow::ad
