#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace codis {

using Shape = std::vector<std::size_t>;

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

// One entry of the reverse-mode graph. Nodes are created in topological order
// by the ops; intermediate nodes die with the last Tensor handle that reaches
// them, so a graph lives exactly as long as the loss of one step.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major array of doubles with an optional gradient slot.
///
/// A Tensor is a cheap handle; copies alias the same storage. Matrices are
/// rank-2 `{rows, cols}`; rank-1 tensors behave as a single row.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const { return node_->value; }
  // Direct write access; only for leaves (parameters, test inputs).
  std::span<double> mutable_values() { return node_->value; }
  double item() const;
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const {
    return node_->value[r * cols() + c];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::vector<double> grad_or_zeros() const;
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  const char* op() const { return node_->op; }
  Tensor detach() const;
  Tensor clone() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Runs reverse-mode accumulation from a single-element tensor. The seed
/// gradient is 1. Each reachable node's backward runs exactly once.
void backward(const Tensor& loss);

/// Reverse topological order of the nodes reachable from `root` that carry
/// gradients. Exposed for tape inspection in tests.
std::vector<detail::Node*> tape_order(const Tensor& root);

bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// When set, every op verifies its output is finite and throws NonFiniteError.
void set_debug_checks(bool enabled);
bool debug_checks();

namespace detail {

// Builds an op output. `parents` are recorded only when a gradient is needed.
Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<Tensor> parents,
                   std::function<void(Node&)> backward);

}  // namespace detail

}  // namespace codis
