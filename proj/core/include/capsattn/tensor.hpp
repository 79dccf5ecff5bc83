#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "capsattn/common.hpp"
#include "capsattn/random.hpp"

namespace capsattn {

/// Thread-local switch for recording backward graphs. Disabled during
/// evaluation and decoding so forward passes do not retain activations.
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set_enabled(bool on) { flag() = on; }

 private:
  static bool& flag() {
    thread_local bool f = true;
    return f;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {

/// One record of the compute graph: value buffer plus the closure that
/// pushes this node's gradient into its parents. Parents are owned via
/// shared_ptr; children never own parents' children, so there are no cycles.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated on first accumulation
  bool requires_grad = false;  // leaf flag (parameters, probe inputs)
  bool needs_grad = false;     // requires_grad or downstream of such a leaf
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

template <typename T>
inline void debug_check_finite(const std::vector<T>& values, const char* op) {
#ifndef NDEBUG
  for (const T& v : values) {
    if (!std::isfinite(static_cast<double>(v))) {
      fail(std::string(op) + ": non-finite value produced");
    }
  }
#else
  (void)values;
  (void)op;
#endif
}

}  // namespace detail

/// Dense n-dimensional array with optional reverse-mode gradient tracking.
/// Storage is a flat row-major buffer; handles share the underlying node,
/// so copies are cheap. Values are immutable once an op has consumed them;
/// only leaf tensors (parameters) are updated in place, between graphs.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

  static Tensor full(Shape shape, T value) {
    auto node = std::make_shared<detail::Node<T>>();
    validate_shape(shape);
    node->data.assign(shape_numel(shape), value);
    node->shape = std::move(shape);
    return Tensor(std::move(node));
  }

  static Tensor scalar(T value) { return full({}, value); }

  static Tensor from(Shape shape, std::vector<T> values) {
    validate_shape(shape);
    check(shape_numel(shape) == values.size(),
          "tensor: shape " + shape_str(shape) + " expects " +
              std::to_string(shape_numel(shape)) + " values, got " +
              std::to_string(values.size()));
    detail::debug_check_finite(values, "tensor");
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    return Tensor(std::move(node));
  }

  static Tensor uniform(Shape shape, RandomSource& rng, T lo, T hi) {
    Tensor t = zeros(std::move(shape));
    for (T& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  static Tensor normal(Shape shape, RandomSource& rng, T mean, T stddev) {
    Tensor t = zeros(std::move(shape));
    for (T& v : t.data()) v = static_cast<T>(mean + stddev * rng.normal());
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape[axis]; }

  std::vector<T>& data() { return node_->data; }
  const std::vector<T>& data() const { return node_->data; }

  T item() const {
    check(defined() && numel() == 1, "item: tensor is not a scalar");
    return node_->data[0];
  }

  T at(const std::vector<std::size_t>& index) const {
    check(index.size() == rank(), "at: index rank mismatch");
    std::size_t flat = 0;
    for (std::size_t d = 0; d < index.size(); ++d) {
      check(index[d] < node_->shape[d], "at: index out of range");
      flat = flat * node_->shape[d] + index[d];
    }
    return node_->data[flat];
  }

  bool requires_grad() const { return node_->requires_grad; }

  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    node_->needs_grad = on || node_->needs_grad;
    return *this;
  }

  bool has_grad() const { return defined() && !node_->grad.empty(); }

  const std::vector<T>& grad() const {
    check(has_grad(), "grad: no gradient accumulated");
    return node_->grad;
  }

  void zero_grad() {
    if (defined()) node_->grad.assign(node_->data.size(), T(0));
  }

  /// Leaf copy of the current values, detached from any graph.
  Tensor detached() const {
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = node_->shape;
    node->data = node_->data;
    return Tensor(std::move(node));
  }

  /// Reverse-mode pass from a scalar output. Visits each reachable node
  /// exactly once, in reverse topological order, accumulating into leaf
  /// gradients (which persist until explicitly zeroed).
  void backward() const {
    check(defined(), "backward: undefined tensor");
    check(numel() == 1,
          "backward: output must be a scalar, got shape " + shape_str(shape()));
    std::vector<detail::Node<T>*> order;
    std::unordered_set<detail::Node<T>*> seen;
    struct Frame {
      detail::Node<T>* node;
      std::size_t next_parent;
    };
    std::vector<Frame> stack;
    seen.insert(node_.get());
    stack.push_back({node_.get(), 0});
    while (!stack.empty()) {
      Frame& frame = stack.back();
      if (frame.next_parent < frame.node->parents.size()) {
        detail::Node<T>* parent = frame.node->parents[frame.next_parent++].get();
        if (seen.insert(parent).second) stack.push_back({parent, 0});
      } else {
        order.push_back(frame.node);
        stack.pop_back();
      }
    }
    node_->grad.assign(1, T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node<T>* node = *it;
      if (node->backward && !node->grad.empty()) node->backward();
    }
  }

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

 private:
  static void validate_shape(const Shape& shape) {
    for (std::size_t d : shape) {
      check(d > 0, "tensor: dimension sizes must be positive, got " + shape_str(shape));
    }
  }

  std::shared_ptr<detail::Node<T>> node_;
};

namespace detail {

/// Allocates the result node of an op, wiring parents and the backward
/// closure only when gradients are both enabled and needed.
template <typename T, typename MakeBackward>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      const char* op, MakeBackward&& make_backward) {
  debug_check_finite(data, op);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool track = false;
  if (GradMode::enabled()) {
    for (const auto& p : parents) {
      if (p->needs_grad) {
        track = true;
        break;
      }
    }
  }
  if (track) {
    node->needs_grad = true;
    node->parents = std::move(parents);
    node->backward = make_backward(node.get());
  }
  return Tensor<T>(std::move(node));
}

}  // namespace detail

}  // namespace capsattn
