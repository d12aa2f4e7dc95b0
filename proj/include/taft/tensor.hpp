#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "taft/errors.hpp"

namespace taft {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
inline thread_local bool grad_enabled = true;
}

// Scoped guard disabling graph recording; forwards run value-only.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on demand; persistent for leaves
  bool requires_grad = false;
  bool is_leaf = true;
  bool backward_ran = false;  // set on a loss node once consumed
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <class T>
void check_finite(const std::vector<T>& values, const char* op_name) {
  for (const T v : values) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericsError(std::string(op_name) + " produced a non-finite value");
    }
  }
}

// Value-semantics handle to a graph node. Copies share the node.
template <class T>
class Tensor {
 public:
  using scalar_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return from_data(std::move(shape), {}, false);
  }

  static Tensor full(Shape shape, T fill) {
    auto n = shape_numel(shape);
    std::vector<T> v(static_cast<size_t>(n), fill);
    return from_data(std::move(shape), std::move(v), false);
  }

  static Tensor from_data(Shape shape, std::vector<T> values,
                          bool requires_grad = false) {
    auto node = std::make_shared<Node<T>>();
    const int64_t n = shape_numel(shape);
    if (values.empty()) values.assign(static_cast<size_t>(n), T(0));
    if (static_cast<int64_t>(values.size()) != n) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    }
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    node->is_leaf = true;
    return Tensor(std::move(node));
  }

  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int64_t numel() const { return node_->numel(); }

  std::vector<T>& data() { return node_->value; }
  const std::vector<T>& data() const { return node_->value; }
  std::vector<T>& grad() { return node_->grad; }
  const std::vector<T>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->is_leaf) throw GraphError("requires_grad is settable on leaves only");
    node_->requires_grad = on;
  }
  bool is_leaf() const { return node_->is_leaf; }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
  }

  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  std::shared_ptr<Node<T>> node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Builds an op output node. Records parents and the backward closure only
// when grad mode is on and some input requires grad.
template <class T>
Tensor<T> make_op_node(Shape shape, std::vector<T> value,
                       std::vector<Tensor<T>> inputs,
                       std::function<void(Node<T>&)> backward_fn,
                       const char* op_name) {
  check_finite(value, op_name);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->is_leaf = false;
    node->parents.reserve(inputs.size());
    for (auto& t : inputs) node->parents.push_back(t.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

// Reverse-mode sweep from a scalar loss. Gradients of leaf tensors with
// requires_grad accumulate additively across calls; interior buffers are
// cleared per pass. A given loss node can be consumed once.
template <class T>
void backward(const Tensor<T>& loss) {
  auto root = loss.node();
  if (!root) throw GraphError("backward on an undefined tensor");
  if (root->numel() != 1) {
    throw GraphError("backward requires a scalar loss, got shape " + shape_str(root->shape));
  }
  if (!root->requires_grad) {
    throw GraphError("loss does not depend on any parameter requiring grad");
  }
  if (root->backward_ran) {
    throw GraphError("backward called twice on the same loss node");
  }

  // Iterative post-order DFS over grad-requiring parents.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next].get();
      ++next;
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* node : order) {
    if (!node->is_leaf) node->grad.assign(node->value.size(), T(0));
    else node->ensure_grad();
  }
  root->grad.assign(1, T(1));

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward_fn) node->backward_fn(*node);
  }
  root->backward_ran = true;
}

}  // namespace taft
