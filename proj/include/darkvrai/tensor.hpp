#pragma once

// Dense row-major tensor with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to a node. Operations (see ops.hpp) record a
// backward rule on their result whenever gradient recording is enabled and at
// least one input requires a gradient. Nodes are numbered in recording order;
// backward() replays the reachable part of the graph in exact reverse order
// and then frees it.

#include <algorithm>
#include <cstddef>
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

#include "darkvrai/error.hpp"

namespace darkvrai {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
class Tensor;

namespace detail {

inline thread_local std::uint64_t g_record_counter = 0;
inline thread_local int g_no_grad_depth = 0;

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  bool released = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(std::span<const T>)> backward;
};

}  // namespace detail

inline bool grad_enabled() { return detail::g_no_grad_depth == 0; }

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::g_no_grad_depth; }
  ~NoGradGuard() { --detail::g_no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<detail::Node<T>>()) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor of shape " + shape_string(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " elements, got " +
                       std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }
  static Tensor full(Shape shape, T v) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v));
  }
  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  const T& operator[](std::size_t i) const { return node_->value[i]; }

  /// Writable storage; only leaves may be mutated (parameter init and updates).
  std::span<T> mutable_data() {
    if (!node_->is_leaf) throw GraphError("cannot mutate a tensor produced by a recorded operation");
    return node_->value;
  }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }

  Tensor& set_requires_grad(bool flag) {
    if (!node_->is_leaf) throw GraphError("requires_grad can only be set on leaf tensors");
    node_->requires_grad = flag;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  /// Value copy that is a fresh leaf; never receives gradients from this graph.
  Tensor detach() const { return Tensor(node_->shape, node_->value); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->value.begin(), node_->value.end());
    return Tensor<U>(node_->shape, std::move(out));
  }

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

namespace detail {

template <typename T>
bool any_requires_grad(const std::vector<Tensor<T>>& inputs) {
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requires_grad(); });
}

/// Wraps an operation result and, when needed, attaches it to the graph.
template <typename T>
Tensor<T> record(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs,
                 std::function<void(std::span<const T>)> backward) {
  Tensor<T> out(std::move(shape), std::move(value));
  if (!grad_enabled() || !any_requires_grad(inputs)) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.is_leaf = false;
  node.seq = ++g_record_counter;
  for (const auto& in : inputs) {
    if (in.requires_grad()) node.parents.push_back(in.node());
  }
  node.backward = std::move(backward);
  return out;
}

/// Gradient buffer of an input, allocated on first use; empty if the input
/// does not take part in differentiation.
template <typename T>
std::span<T> grad_sink(const Tensor<T>& t) {
  auto& node = *t.node();
  if (!node.requires_grad) return {};
  if (node.grad.empty()) node.grad.assign(node.value.size(), T(0));
  return node.grad;
}

}  // namespace detail

/// Populates dLoss/dLeaf on every reachable leaf that requires a gradient.
/// Leaf gradients accumulate across calls; intermediate graph state is freed
/// unless retain_graph is set.
template <typename T>
void backward(const Tensor<T>& loss, bool retain_graph = false) {
  if (!loss.defined()) throw GraphError("backward on an undefined tensor");
  if (loss.numel() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) throw GraphError("loss is detached from the graph");
  const auto& root = loss.node();
  if (root->released) throw GraphError("graph was already freed by a previous backward call");

  // Owning references keep every node alive while the graph is released.
  std::vector<std::shared_ptr<detail::Node<T>>> order;
  std::unordered_set<detail::Node<T>*> seen;
  std::vector<std::shared_ptr<detail::Node<T>>> stack{root};
  while (!stack.empty()) {
    auto n = std::move(stack.back());
    stack.pop_back();
    if (!seen.insert(n.get()).second) continue;
    for (const auto& p : n->parents) stack.push_back(p);
    order.push_back(std::move(n));
  }
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a->seq > b->seq; });

  for (const auto& n : order) {
    if (!n->is_leaf) n->grad.assign(n->value.size(), T(0));
  }
  if (root->grad.empty()) root->grad.assign(1, T(0));
  root->grad[0] += T(1);

  for (const auto& n : order) {
    if (!n->is_leaf && n->backward) n->backward(n->grad);
  }

  if (!retain_graph) {
    for (const auto& n : order) {
      if (n->is_leaf) continue;
      n->backward = nullptr;
      n->parents.clear();
      std::vector<T>().swap(n->grad);
      n->released = true;
    }
  }
}

}  // namespace darkvrai
