#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace htr {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Shared storage behind a tensor handle. Gradients are allocated lazily.
template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

/// Dense row-major tensor handle. Copies share storage; use clone() for a deep copy.
///
/// `float` is the training/inference precision. `double` exists for
/// finite-difference gradient checking.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  BasicTensor() = default;
  explicit BasicTensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  /// Direct write access that bypasses the tape (optimizer updates, weight import).
  std::span<T> mutable_data() { return node_->value; }
  T item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Deep copy of the values; the copy does not require grad.
  BasicTensor clone() const;

  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Ordered record of differentiable operations. Inputs of every entry are
/// either leaves or outputs of earlier entries, so reverse order is a valid
/// reverse-topological sweep.
template <typename T>
class BasicTape {
 public:
  using NodePtr = std::shared_ptr<TensorNode<T>>;
  struct Entry {
    const char* op;
    std::vector<NodePtr> inputs;
    NodePtr output;
    std::function<void()> backward;
  };

  void record(Entry entry) { entries_.push_back(std::move(entry)); }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  std::vector<Entry> entries_;
};

using Tape = BasicTape<float>;
using TapeD = BasicTape<double>;

namespace detail {
template <typename T>
BasicTape<T>*& active_tape_slot() {
  thread_local BasicTape<T>* tape = nullptr;
  return tape;
}
}  // namespace detail

/// The tape ops record onto in this thread, or null when recording is off.
template <typename T>
BasicTape<T>* active_tape() {
  return detail::active_tape_slot<T>();
}

/// Makes `tape` the recording target for the current thread while in scope.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(BasicTape<T>& tape) : previous_(detail::active_tape_slot<T>()) {
    detail::active_tape_slot<T>() = &tape;
  }
  ~TapeScope() { detail::active_tape_slot<T>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  BasicTape<T>* previous_;
};

struct BackwardStats {
  std::size_t visited = 0;
};

/// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse, accumulating
/// gradients into every tensor that requires them.
template <typename T>
BackwardStats backward(BasicTape<T>& tape, const BasicTensor<T>& loss);

/// When enabled, every op scans its output and throws NonFiniteError on NaN/Inf.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

}  // namespace htr
