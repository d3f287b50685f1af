#include "fsfnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fsfnet/rng.hpp"

namespace fsfnet {

template <typename T>
Value<T> project_to_scalar(const Value<T>& x, std::uint64_t seed) {
  auto coeffs = std::make_shared<Tensor<T>>(x.shape());
  Rng rng(seed);
  for (std::int64_t i = 0; i < coeffs->numel(); ++i) {
    coeffs->data()[i] = static_cast<T>(rng.uniform(-1.0, 1.0));
  }
  Tensor<T> out(Shape{1, 1, 1, 1});
  double acc = 0.0;
  for (std::int64_t i = 0; i < coeffs->numel(); ++i) {
    acc += static_cast<double>(coeffs->data()[i]) *
           static_cast<double>(x.val().data()[i]);
  }
  out.at(0, 0, 0, 0) = static_cast<T>(acc);
  ValueNode<T>* xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, coeffs](ValueNode<T>& node) {
    const T g = node.grad.at(0, 0, 0, 0);
    for (std::int64_t i = 0; i < coeffs->numel(); ++i) {
      xn->grad.data()[i] += g * coeffs->data()[i];
    }
  });
}

template <typename T>
GradCheckReport gradient_check_leaves(
    const std::function<Value<T>()>& build_loss,
    const std::vector<Value<T>>& leaves, T step, T floor,
    const std::vector<std::string>* leaf_names) {
  for (const auto& leaf : leaves) {
    if (!leaf.defined() || !leaf.requires_grad()) {
      fail("gradient_check: every leaf must be a differentiable parameter");
    }
  }
  auto name_of = [&](std::size_t i) {
    return leaf_names ? (*leaf_names)[i] : "input " + std::to_string(i);
  };

  // Analytic pass.
  Value<T> loss = build_loss();
  backward(loss);
  std::vector<Tensor<T>> analytic;
  analytic.reserve(leaves.size());
  for (const auto& leaf : leaves) {
    // A leaf the loss never touched keeps an empty grad; that means zero.
    if (leaf.grad().numel() == leaf.val().numel()) {
      analytic.push_back(leaf.grad());
    } else {
      analytic.push_back(Tensor<T>(leaf.shape()));
    }
  }

  GradCheckReport report;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    // Value is a shared handle; a copy aliases the same node, so the
    // perturbation reaches the graph even though the vector is const.
    Value<T> leaf = leaves[i];
    T* vals = leaf.mutable_val().data();
    for (std::int64_t j = 0; j < leaves[i].val().numel(); ++j) {
      const double a = static_cast<double>(analytic[i].data()[j]);
      const T saved = vals[j];
      vals[j] = saved + step;
      const double up = static_cast<double>(build_loss().val().at(0, 0, 0, 0));
      vals[j] = saved - step;
      const double down =
          static_cast<double>(build_loss().val().at(0, 0, 0, 0));
      vals[j] = saved;
      const double n = (up - down) / (2.0 * static_cast<double>(step));
      if (!std::isfinite(a) || !std::isfinite(n)) {
        report.finite = false;
        report.max_rel_err = std::numeric_limits<double>::infinity();
        report.worst = name_of(i) + ", element " + std::to_string(j) +
                       " (non-finite gradient)";
        return report;
      }
      const double denom =
          std::max({std::abs(a), std::abs(n), static_cast<double>(floor)});
      const double rel = std::abs(a - n) / denom;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = name_of(i) + ", element " + std::to_string(j);
      }
    }
  }
  return report;
}

template <typename T>
GradCheckReport gradient_check(
    const std::function<Value<T>(std::vector<Value<T>>&)>& build_loss,
    const std::vector<Tensor<T>>& inputs, T step, T floor) {
  std::vector<Value<T>> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) leaves.push_back(Value<T>::param(t));
  return gradient_check_leaves<T>(
      [&]() {
        std::vector<Value<T>> handles = leaves;
        return build_loss(handles);
      },
      leaves, step, floor);
}

template GradCheckReport gradient_check<float>(
    const std::function<Value<float>(std::vector<Value<float>>&)>&,
    const std::vector<Tensor<float>>&, float, float);
template GradCheckReport gradient_check<double>(
    const std::function<Value<double>(std::vector<Value<double>>&)>&,
    const std::vector<Tensor<double>>&, double, double);
template GradCheckReport gradient_check_leaves<float>(
    const std::function<Value<float>()>&, const std::vector<Value<float>>&,
    float, float, const std::vector<std::string>*);
template GradCheckReport gradient_check_leaves<double>(
    const std::function<Value<double>()>&, const std::vector<Value<double>>&,
    double, double, const std::vector<std::string>*);
template Value<float> project_to_scalar<float>(const Value<float>&,
                                               std::uint64_t);
template Value<double> project_to_scalar<double>(const Value<double>&,
                                                 std::uint64_t);

}  // namespace fsfnet
