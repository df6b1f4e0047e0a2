#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <unordered_map>
#include <string>
#include <vector>

#include "vdial/error.hpp"

namespace vdial {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

class Tape;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  // Propagates this node's grad into its inputs. Empty for leaves.
  std::function<void(Node&)> backward_fn;

  std::span<double> grad_span() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

/// Shared handle to a dense row-major array of doubles plus optional gradient.
///
/// Copies alias the same storage, as with framework tensors. Leaves created
/// with `requires_grad` accumulate gradients when a loss depending on them is
/// back-propagated through the active Tape.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> data(shape_numel(shape), 0.0);
    return from(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::vector<double> data(shape_numel(shape), value);
    return from(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    require(shape_numel(shape) == data.size(), ErrorKind::ShapeMismatch,
            "data length " + std::to_string(data.size()) + " does not match shape " + shape_string(shape));
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(double value, bool requires_grad = false) { return from({}, {value}, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  /// Size of the last axis (1 for scalars).
  std::size_t cols() const { return rank() == 0 ? 1 : node_->shape.back(); }
  /// Product of all leading axes.
  std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

  std::span<const double> data() const { return node_->value; }
  std::span<double> data() { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double& operator[](std::size_t i) { return node_->value[i]; }
  double at(std::size_t row, std::size_t col) const { return node_->value[row * cols() + col]; }

  double item() const {
    require(numel() == 1, ErrorKind::NotScalar, "item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad_span(); }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  /// A leaf copy of the values, detached from any recorded history.
  Tensor detach() const { return from(shape(), node_->value, false); }

  const detail::NodePtr& node() const { return node_; }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}
  friend Tensor make_result(Shape, std::vector<double>, bool,
                            const std::function<std::function<void(detail::Node&)>()>&);
  friend class Tape;

  detail::NodePtr node_;
};

namespace detail {
inline thread_local Tape* active_tape = nullptr;
}  // namespace detail

/// Ordered record of differentiable operations on the current thread.
///
/// Constructing a Tape activates it for the calling thread; operations whose
/// inputs require gradients are appended in execution order, so the record is
/// topologically sorted by construction. Without an active tape nothing is
/// recorded and results carry no history.
class Tape {
 public:
  Tape() : previous_(detail::active_tape) { detail::active_tape = this; }
  ~Tape() { detail::active_tape = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return detail::active_tape; }

  std::size_t size() const { return nodes_.size(); }

  void record(detail::NodePtr node) {
    index_[node.get()] = nodes_.size();
    nodes_.push_back(std::move(node));
  }

  /// Reverse sweep from `loss`. Each recorded node at or before the loss is
  /// visited exactly once; leaves accumulate into their existing gradients.
  void backward(const Tensor& loss) {
    require(loss.numel() == 1, ErrorKind::NotScalar,
            "backward() needs a scalar loss, got " + shape_string(loss.shape()));
    auto* root = loss.node().get();
    if (!root->requires_grad) return;
    auto found = index_.find(root);
    if (found == index_.end()) {
      root->grad_span()[0] += 1.0;
      return;
    }
    root->grad_span()[0] = 1.0;
    for (std::size_t i = found->second + 1; i-- > 0;) {
      detail::Node& node = *nodes_[i];
      if (node.grad.empty() || !node.backward_fn) continue;
      node.backward_fn(node);
    }
  }

  void clear() {
    nodes_.clear();
    index_.clear();
  }

 private:
  struct PtrHash {
    std::size_t operator()(const detail::Node* p) const { return std::hash<const void*>()(p); }
  };

  Tape* previous_;
  std::vector<detail::NodePtr> nodes_;
  std::unordered_map<const detail::Node*, std::size_t, PtrHash> index_;
};

/// Suspends recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : saved_(detail::active_tape) { detail::active_tape = nullptr; }
  ~NoGradGuard() { detail::active_tape = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

inline void backward(const Tensor& loss) {
  require(loss.numel() == 1, ErrorKind::NotScalar,
          "backward() needs a scalar loss, got " + shape_string(loss.shape()));
  Tape* tape = Tape::active();
  require(tape != nullptr, ErrorKind::InvalidArgument, "backward() called without an active Tape");
  tape->backward(loss);
}

/// True when a tape is recording and any input participates in gradients.
inline bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* input : inputs)
    if (input->requires_grad()) return true;
  return false;
}

/// Builds an op result. The backward factory is only invoked (and the result
/// only recorded) when `record` is set, see needs_grad().
inline Tensor make_result(Shape shape, std::vector<double> value, bool record,
                          const std::function<std::function<void(detail::Node&)>()>& make_backward) {
  Tensor out = Tensor::from(std::move(shape), std::move(value), false);
  if (!record) return out;
  out.node_->requires_grad = true;
  out.node_->backward_fn = make_backward();
  Tape::active()->record(out.node_);
  return out;
}

/// Gradient buffer of `t` if it participates in differentiation, else empty.
inline std::span<double> grad_target(const Tensor& t) {
  if (!t.requires_grad()) return {};
  return t.node()->grad_span();
}

inline bool all_finite(const Tensor& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  for (double g : t.grad())
    if (!std::isfinite(g)) return false;
  return true;
}

}  // namespace vdial
