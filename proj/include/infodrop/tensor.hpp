#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "infodrop/error.hpp"

namespace infodrop {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// One node of the reverse-mode tape. Ops append nodes by linking parents and
// installing a backward_fn that reads this node's grad and accumulates into
// the parents' grads.
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(const TensorNode&)> backward_fn;

  std::size_t numel() const { return data.size(); }
};

// Thread-local switch: with gradients disabled, ops produce constant nodes
// with no tape links (used by evaluation passes).
class GradMode {
 public:
  static bool enabled() { return state(); }
  static void set_enabled(bool on) { state() = on; }

 private:
  static bool& state() {
    thread_local bool enabled = true;
    return enabled;
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

// Dense n-dimensional array of doubles, row-major, with shared node state so
// copies alias the same storage (the usual autograd-tensor convention).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from_data(std::move(shape), {}, requires_grad, /*fill=*/0.0);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    return from_data(std::move(shape), {}, requires_grad, value);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false, double fill = 0.0) {
    auto node = std::make_shared<TensorNode>();
    const std::size_t n = shape_numel(shape);
    node->shape = std::move(shape);
    if (data.empty() && n > 0) {
      node->data.assign(n, fill);
    } else {
      if (data.size() != n) {
        throw DimensionError("tensor data size " + std::to_string(data.size()) +
                             " does not match shape " +
                             shape_to_string(node->shape));
      }
      node->data = std::move(data);
    }
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const { return node().shape; }
  std::size_t dim(std::size_t i) const { return node().shape.at(i); }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t numel() const { return node().data.size(); }

  std::vector<double>& data() { return node().data; }
  const std::vector<double>& data() const { return node().data; }

  double value() const {
    if (numel() != 1) {
      throw ContractError("value() requires a scalar tensor, got shape " +
                          shape_to_string(shape()));
    }
    return node().data[0];
  }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool on) { node().requires_grad = on; }

  // Populated by backward(); empty before the first backward pass.
  const std::vector<double>& grad() const { return node().grad; }

  std::shared_ptr<TensorNode> node_ptr() const { return node_; }
  TensorNode& node() {
    if (!node_) throw ContractError("use of undefined tensor");
    return *node_;
  }
  const TensorNode& node() const {
    if (!node_) throw ContractError("use of undefined tensor");
    return *node_;
  }

 private:
  std::shared_ptr<TensorNode> node_;
};

namespace detail {

// Postorder over the tape reachable from root: every node appears after all
// of its parents, so the reversed list is a valid backpropagation order that
// visits each node exactly once.
inline std::vector<TensorNode*> topo_order(TensorNode* root) {
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* parent = node->parents[next++].get();
      if (visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Grads of all reachable nodes are
// reset first, so calling backward twice on the same tape yields identical
// gradients (this is the documented repeat-backward behavior).
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_to_string(loss.shape()));
  }
  TensorNode* root = loss.node_ptr().get();
  std::vector<TensorNode*> order = detail::topo_order(root);
  for (TensorNode* n : order) n->grad.assign(n->numel(), 0.0);
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

}  // namespace infodrop
