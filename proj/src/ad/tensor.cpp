#include "stow/ad/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

#include "stow/common/errors.hpp"

namespace stow::ad {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

void validate_shape(const Shape& shape) {
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_to_string(shape));
  }
}

}  // namespace

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  validate_shape(shape);
  auto node = std::make_shared<TensorNode<T>>();
  node->value.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from_values(Shape shape, std::vector<T> values, bool requires_grad) {
  validate_shape(shape);
  if (values.size() != shape_numel(shape)) {
    throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_to_string(shape));
  }
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from_values({1}, {value}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_to_string(shape()));
  return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = node_->shape;
  node->value = node_->value;
  node->requires_grad = node_->requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  Tensor t = clone();
  t.set_requires_grad(false);
  return t;
}

namespace {

template <typename T>
Tape<T>*& active_tape_slot() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

}  // namespace

template <typename T>
Tape<T>* Tape<T>::active() {
  return active_tape_slot<T>();
}

template <typename T>
void Tape<T>::set_active(Tape* tape) {
  active_tape_slot<T>() = tape;
}

template <typename T>
void Tape<T>::record(std::shared_ptr<TensorNode<T>> output, BackwardFn backward, const char* op_name) {
  entries_.push_back(Entry{std::move(output), std::move(backward), op_name});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward() requires a scalar loss, got shape " +
                     (loss.defined() ? shape_to_string(loss.shape()) : std::string("<undefined>")));
  }
  TensorNode<T>* loss_node = loss.node_ptr().get();
  const bool on_tape = std::any_of(entries_.begin(), entries_.end(),
                                   [&](const Entry& e) { return e.output.get() == loss_node; });
  if (!on_tape && !loss.requires_grad()) throw UsageError("backward() on a loss that is not on the tape");

  for (auto& e : entries_) e.output->grad.clear();
  loss_node->ensure_grad();
  if (on_tape)
    loss_node->grad[0] = T(1);
  else
    loss_node->grad[0] += T(1);

  last_replay_count_ = 0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not reachable from the loss
    it->backward();
    ++last_replay_count_;
  }
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace stow::ad
