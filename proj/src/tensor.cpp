#include "seg3d/tensor.hpp"

#include <sstream>
#include <unordered_set>

namespace seg3d {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << ")";
  return os.str();
}

namespace {

// Iterative post-order DFS: children after their parents when the result is
// walked in reverse, which is the order the backward sweep needs.
template <class T>
std::vector<std::shared_ptr<Node<T>>> topo_order(const std::shared_ptr<Node<T>>& root) {
  std::vector<std::shared_ptr<Node<T>>> order;
  std::unordered_set<const Node<T>*> seen;
  std::vector<std::pair<std::shared_ptr<Node<T>>, size_t>> stack;
  if (!root->requires_grad) return order;
  stack.emplace_back(root, 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto parent = node->parents[next++];
      if (parent->requires_grad && !seen.count(parent.get())) {
        seen.insert(parent.get());
        stack.emplace_back(std::move(parent), 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

template <class T>
void backward(const Tensor<T>& root, bool free_graph) {
  if (!root.defined()) throw RunError("backward on undefined tensor");
  if (root.numel() != 1) throw RunError("backward requires a scalar root, got shape " + shape_str(root.shape()));
  if (!root.requires_grad()) throw RunError("backward on a tensor that does not require gradients");
  auto order = topo_order(root.node());
  root.node()->ensure_grad();
  root.node()->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>& n = **it;
    if (n.backprop) n.backprop(n);
    if (free_graph && !n.is_leaf) n.release();
  }
}

template void backward<float>(const Tensor<float>&, bool);
template void backward<double>(const Tensor<double>&, bool);

}  // namespace seg3d
