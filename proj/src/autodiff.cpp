#include "fsfnet/autodiff.hpp"

#include <unordered_set>

namespace fsfnet {

namespace detail {

template <typename T>
void topo_collect(ValueNode<T>* root, std::vector<ValueNode<T>*>& order) {
  // Iterative post-order DFS over the parent links.
  std::unordered_set<ValueNode<T>*> seen;
  std::vector<std::pair<ValueNode<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      ValueNode<T>* p = node->parents[next++].get();
      if (seen.insert(p).second) {
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
}

template void topo_collect<float>(ValueNode<float>*, std::vector<ValueNode<float>*>&);
template void topo_collect<double>(ValueNode<double>*, std::vector<ValueNode<double>*>&);

}  // namespace detail

template <typename T>
void backward(const Value<T>& loss) {
  if (!loss.defined()) fail("backward: undefined value");
  if (loss.shape() != Shape{1, 1, 1, 1}) {
    fail("backward: root must be scalar-shaped (1,1,1,1), got " +
         loss.shape().str());
  }
  std::vector<ValueNode<T>*> order;
  detail::topo_collect(loss.node(), order);
  for (ValueNode<T>* n : order) {
    n->grad = Tensor<T>(n->val.shape());
  }
  loss.node()->grad.at(0, 0, 0, 0) = T(1);
  // Post-order puts the root last; walk it in reverse.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    ValueNode<T>* n = *it;
    if (n->backprop && n->requires_grad) {
      n->backprop(*n);
    }
  }
}

template <typename T>
Value<T> make_op(Tensor<T> out, std::vector<Value<T>> parents,
                 std::function<void(ValueNode<T>&)> bp) {
  bool needs = false;
  for (const auto& p : parents) {
    needs = needs || p.requires_grad();
  }
  Value<T> v = Value<T>::constant(std::move(out));
  v.node()->requires_grad = needs;
  if (needs) {
    v.node()->parents.reserve(parents.size());
    for (auto& p : parents) v.node()->parents.push_back(p.node_ptr());
    v.node()->backprop = std::move(bp);
  }
  return v;
}

template void backward<float>(const Value<float>&);
template void backward<double>(const Value<double>&);
template Value<float> make_op<float>(Tensor<float>, std::vector<Value<float>>,
                                     std::function<void(ValueNode<float>&)>);
template Value<double> make_op<double>(Tensor<double>, std::vector<Value<double>>,
                                       std::function<void(ValueNode<double>&)>);

}  // namespace fsfnet
