#include "codis/numcore/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace codis {

namespace {
thread_local bool t_grad_enabled = true;
thread_local bool t_debug_checks = false;
}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  node->value.assign(shape_size(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  if (values.size() != shape_size(shape)) {
    throw DimensionError("Tensor::from: " + std::to_string(values.size()) +
                         " values for shape " + shape_string(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

std::size_t Tensor::cols() const {
  const auto& s = node_->shape;
  return s.empty() ? 1 : s.back();
}

std::size_t Tensor::rows() const {
  const std::size_t c = cols();
  return c == 0 ? 0 : size() / c;
}

double Tensor::item() const {
  if (size() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  }
  return node_->value[0];
}

std::vector<double> Tensor::grad_or_zeros() const {
  if (node_->grad.empty()) return std::vector<double>(size(), 0.0);
  return node_->grad;
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = node_->shape;
  node->value = node_->value;
  return Tensor(std::move(node));
}

Tensor Tensor::clone() const {
  Tensor out = detach();
  out.set_requires_grad(requires_grad());
  return out;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) {
  t_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

void set_debug_checks(bool enabled) { t_debug_checks = enabled; }
bool debug_checks() { return t_debug_checks; }

std::vector<detail::Node*> tape_order(const Tensor& root) {
  std::vector<detail::Node*> order;
  if (!root.defined() || !root.requires_grad()) return order;
  std::unordered_set<detail::Node*> seen;
  // Iterative post-order DFS; post-order of a DAG is a topological order.
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }
  std::reverse(order.begin(), order.end());
  return order;
}

void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw DimensionError("backward() needs a single-element loss, got " +
                         shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  const auto order = tape_order(loss);
  loss.node()->grad_buffer()[0] += 1.0;
  for (detail::Node* node : order) {
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

namespace detail {

Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<Tensor> parents,
                   std::function<void(Node&)> backward) {
  if (t_debug_checks) {
    for (double v : value) {
      if (!std::isfinite(v)) {
        throw NonFiniteError(std::string("non-finite output from ") + op);
      }
    }
  }
  auto node = std::make_shared<Node>();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

}  // namespace detail

}  // namespace codis
