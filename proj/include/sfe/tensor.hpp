#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sfe/errors.hpp"

namespace sfe {

using Shape = std::vector<int>;

inline std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Thread-local autodiff switch. Ops record backward closures only while
// grad mode is on; inference paths wrap themselves in a NoGradGuard.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until touched
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

// Dense row-major N-d array with optional reverse-mode gradient. Copying a
// Tensor copies the handle; the storage and graph node are shared.
template <typename T>
class Tensor {
 public:
  using Node = detail::Node<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return make(std::move(shape), {}, requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> data(static_cast<std::size_t>(numel_of(shape)), value);
    return make(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor from_data(Shape shape, std::vector<T> data,
                          bool requires_grad = false) {
    if (static_cast<std::int64_t>(data.size()) != numel_of(shape)) {
      throw ConfigError("tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
    }
    return make(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor randn(Shape shape, std::mt19937_64& rng, T stddev = T(1),
                      bool requires_grad = false) {
    std::vector<T> data(static_cast<std::size_t>(numel_of(shape)));
    std::normal_distribution<T> dist(T(0), stddev);
    for (auto& v : data) v = dist(rng);
    return make(std::move(shape), std::move(data), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const {
    return static_cast<std::int64_t>(node_->data.size());
  }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  std::vector<T>& values() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  std::vector<T>& grad() { return node_->grad_buffer(); }
  const std::vector<T>* grad_if_any() const {
    return node_->grad.empty() ? nullptr : &node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
  }

  T item() const {
    if (numel() != 1) {
      throw ConfigError("item() requires a scalar tensor, got shape " +
                        shape_str(shape()));
    }
    return node_->data[0];
  }

  // Copies the data into a fresh leaf that never requires grad.
  Tensor detach() const { return make(node_->shape, node_->data, false); }

  // Reverse-mode sweep from a scalar root. Gradients accumulate into every
  // reachable tensor with requires_grad; intermediate grad buffers are
  // released as soon as their node has been processed.
  void backward() {
    if (numel() != 1) {
      throw ConfigError("backward() requires a scalar loss, got shape " +
                        shape_str(shape()));
    }
    std::vector<Node*> order = topo_order();
    node_->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backprop && !n->grad.empty()) n->backprop(*n);
      if (!n->parents.empty()) {
        n->grad.clear();
        n->grad.shrink_to_fit();
      }
    }
  }

  // Graph plumbing used by the ops layer.
  const std::shared_ptr<Node>& node() const { return node_; }
  void mark_requires_grad() { node_->requires_grad = true; }
  void attach(const char* op, std::vector<std::shared_ptr<Node>> parents,
              std::function<void(Node&)> backprop) {
    node_->op = op;
    node_->parents = std::move(parents);
    node_->backprop = std::move(backprop);
    node_->requires_grad = true;
  }

 private:
  static Tensor make(Shape shape, std::vector<T> data, bool requires_grad) {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    if (data.empty()) {
      t.node_->data.assign(static_cast<std::size_t>(numel_of(t.node_->shape)),
                           T(0));
    } else {
      t.node_->data = std::move(data);
    }
    t.node_->requires_grad = requires_grad;
    return t;
  }

  std::vector<Node*> topo_order() const {
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    // Iterative DFS; the graph can be deeper than the stack allows.
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node* p = n->parents[next++].get();
        if (visited.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    return order;
  }

  std::shared_ptr<Node> node_;
};

// Splits a base seed into decorrelated per-component streams.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace sfe
