#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace stow::ad {

using Shape = std::vector<std::size_t>;

[[nodiscard]] std::size_t shape_numel(const Shape& shape);
[[nodiscard]] std::string shape_to_string(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

// Dense row-major array with shared ownership. Copies alias the same storage;
// use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  [[nodiscard]] bool defined() const { return node_ != nullptr; }
  [[nodiscard]] const Shape& shape() const { return node_->shape; }
  [[nodiscard]] std::size_t dim() const { return node_->shape.size(); }
  [[nodiscard]] std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }
  [[nodiscard]] std::size_t numel() const { return node_->value.size(); }

  [[nodiscard]] std::span<const T> values() const { return node_->value; }
  // Direct value access for initialization and optimizer updates.
  [[nodiscard]] std::span<T> mutable_values() { return node_->value; }
  [[nodiscard]] std::span<const T> grad() const { return node_->grad; }
  [[nodiscard]] std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  [[nodiscard]] bool has_grad() const { return !node_->grad.empty(); }
  [[nodiscard]] T item() const;
  [[nodiscard]] T operator[](std::size_t flat_index) const { return node_->value[flat_index]; }

  [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  // Deep copy of values with no tape history. The result keeps requires_grad.
  [[nodiscard]] Tensor clone() const;
  // Values-only copy that never requires grad.
  [[nodiscard]] Tensor detach() const;

  [[nodiscard]] TensorNode<T>& node() const { return *node_; }
  [[nodiscard]] const std::shared_ptr<TensorNode<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

// Ordered record of differentiable ops. Ops record themselves on the tape that
// is active on the calling thread; without one they run as plain functions.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<TensorNode<T>> output, BackwardFn backward, const char* op_name);

  // Seeds d(loss)/d(loss) = 1 and replays every recorded op in reverse.
  // Leaf gradients accumulate across calls; intermediate gradients are
  // reset at the start of each call.
  void backward(const Tensor<T>& loss);

  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  [[nodiscard]] const char* op_name(std::size_t i) const { return entries_.at(i).op_name; }
  // Number of ops whose backward rule ran during the last backward().
  [[nodiscard]] std::size_t last_replay_count() const { return last_replay_count_; }
  void clear() { entries_.clear(); }

  [[nodiscard]] static Tape* active();
  static void set_active(Tape* tape);

 private:
  struct Entry {
    std::shared_ptr<TensorNode<T>> output;
    BackwardFn backward;
    const char* op_name;
  };
  std::vector<Entry> entries_;
  std::size_t last_replay_count_ = 0;
};

// Makes `tape` the active tape of this thread for the scope's lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::active()) { Tape<T>::set_active(&tape); }
  ~TapeScope() { Tape<T>::set_active(previous_); }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

// Suspends recording for the scope's lifetime.
template <typename T>
class NoTapeScope {
 public:
  NoTapeScope() : previous_(Tape<T>::active()) { Tape<T>::set_active(nullptr); }
  ~NoTapeScope() { Tape<T>::set_active(previous_); }
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

}  // namespace stow::ad
