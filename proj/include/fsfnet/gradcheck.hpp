#pragma once

#include <functional>
#include <string>
#include <vector>

#include "fsfnet/autodiff.hpp"
#include "fsfnet/tensor.hpp"

namespace fsfnet {

struct GradCheckReport {
  double max_rel_err = 0.0;
  // Position of the worst element, e.g. "input 1, element 42".
  std::string worst;
  // False when any analytic or numeric gradient came out non-finite;
  // `worst` then names the offending element.
  bool finite = true;
};

/// Compares analytic gradients against central finite differences.
///
/// `build_loss` must construct a scalar (1,1,1,1) loss from the given leaves
/// and be a pure function of their values; it is re-invoked twice per element
/// with perturbed copies. Differentiation runs in the precision of T; use
/// double for trustworthy comparisons.
///
/// Relative error per element: |a - n| / max(|a|, |n|, floor).
template <typename T>
GradCheckReport gradient_check(
    const std::function<Value<T>(std::vector<Value<T>>&)>& build_loss,
    const std::vector<Tensor<T>>& inputs, T step = T(1e-5),
    T floor = T(1e-6));

/// Same comparison over a set of existing differentiable leaves (for whole
/// models, pass every parameter plus the input leaves). `build_loss` must
/// rebuild the loss graph from the leaves' current values on every call;
/// the checker perturbs those values in place and restores them.
template <typename T>
GradCheckReport gradient_check_leaves(
    const std::function<Value<T>()>& build_loss,
    const std::vector<Value<T>>& leaves, T step = T(1e-5), T floor = T(1e-6),
    const std::vector<std::string>* leaf_names = nullptr);

/// Fixed random projection of a tensor output to a scalar, so whole-tensor
/// ops can feed gradient_check with one backward pass. The projection
/// coefficients are drawn deterministically from `seed`, uniform in [-1, 1].
template <typename T>
Value<T> project_to_scalar(const Value<T>& x, std::uint64_t seed);

}  // namespace fsfnet
