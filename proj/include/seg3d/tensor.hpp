#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "seg3d/common.hpp"

namespace seg3d {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s);

// One vertex of the reverse-mode graph. Ops allocate the output value at
// construction; backprop pushes this node's grad into its parents' grads.
template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backprop;

  void ensure_grad() {
    if (grad.size() != static_cast<size_t>(shape_numel(shape))) grad.assign(shape_numel(shape), T(0));
  }
  void release() {  // drop buffers of consumed intermediates
    value.clear();
    value.shrink_to_fit();
    grad.clear();
    grad.shrink_to_fit();
    backprop = nullptr;
    parents.clear();
  }
};

// Value-semantic handle to a graph node. Copies share the node.
template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value.assign(shape_numel(shape), T(0));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, T v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.n_->value.begin(), t.n_->value.end(), v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw RunError("tensor data length does not match shape");
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int64_t numel() const { return shape_numel(n_->shape); }
  std::vector<T>& value() { return n_->value; }
  const std::vector<T>& value() const { return n_->value; }
  T* data() { return n_->value.data(); }
  const T* data() const { return n_->value.data(); }
  std::vector<T>& grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool b) { n_->requires_grad = b; }
  void zero_grad() { std::fill(n_->grad.begin(), n_->grad.end(), T(0)); }
  std::shared_ptr<Node<T>>& node() { return n_; }
  const std::shared_ptr<Node<T>>& node() const { return n_; }

 private:
  std::shared_ptr<Node<T>> n_;
};

// Wires up the result node of an op. When no parent needs gradients the graph
// edge is dropped entirely, so inference builds no tape.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(Node<T>&)> backprop) {
  auto n = std::make_shared<Node<T>>();
  n->value.assign(shape_numel(shape), T(0));
  n->shape = std::move(shape);
  n->is_leaf = false;
  for (const auto& p : parents)
    if (p->requires_grad) {
      n->requires_grad = true;
      break;
    }
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return Tensor<T>(std::move(n));
}

// Reverse-mode sweep from a scalar root. With free_graph, intermediate value
// and grad buffers are released as soon as their backprop has run.
template <class T>
void backward(const Tensor<T>& root, bool free_graph = true);

extern template void backward<float>(const Tensor<float>&, bool);
extern template void backward<double>(const Tensor<double>&, bool);

}  // namespace seg3d
