#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "fsfnet/tensor.hpp"

namespace fsfnet {

template <typename T>
struct ValueNode {
  Tensor<T> val;
  Tensor<T> grad;  // allocated and zeroed by backward() for reachable nodes
  bool requires_grad = false;
  std::vector<std::shared_ptr<ValueNode>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(ValueNode&)> backprop;
};

/// Handle to one node of the computation tape. Copies share the node.
/// Leaves are created with constant() or param(); operations in ops.hpp
/// append new nodes and record how to push gradients back.
template <typename T>
class Value {
 public:
  Value() = default;

  static Value constant(Tensor<T> t) {
    Value v;
    v.n_ = std::make_shared<ValueNode<T>>();
    v.n_->val = std::move(t);
    v.n_->requires_grad = false;
    return v;
  }

  /// Leaf that participates in backward(); used for parameters and for
  /// inputs under gradient checking.
  static Value param(Tensor<T> t) {
    Value v;
    v.n_ = std::make_shared<ValueNode<T>>();
    v.n_->val = std::move(t);
    v.n_->requires_grad = true;
    return v;
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->val.shape(); }
  const Tensor<T>& val() const { return n_->val; }
  Tensor<T>& mutable_val() { return n_->val; }
  const Tensor<T>& grad() const { return n_->grad; }
  Tensor<T>& mutable_grad() { return n_->grad; }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  ValueNode<T>* node() const { return n_.get(); }
  std::shared_ptr<ValueNode<T>> node_ptr() const { return n_; }

 private:
  std::shared_ptr<ValueNode<T>> n_;
};

namespace detail {

template <typename T>
void topo_collect(ValueNode<T>* root, std::vector<ValueNode<T>*>& order);

}  // namespace detail

/// Reverse-mode sweep from a scalar-shaped (1,1,1,1) node. Gradients of every
/// reachable node are zeroed first, so repeated calls do not accumulate.
template <typename T>
void backward(const Value<T>& loss);

/// Builds an op node. `bp` receives the finished node and must accumulate
/// into the grads of the parents it captured.
template <typename T>
Value<T> make_op(Tensor<T> out, std::vector<Value<T>> parents,
                 std::function<void(ValueNode<T>&)> bp);

}  // namespace fsfnet
