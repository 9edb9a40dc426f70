// Central finite-difference gradient checking.
//
// The numeric side never touches the tape: it re-evaluates the scalar
// function on perturbed copies of the parameters, so it is an independent
// oracle for the reverse-mode gradients.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "fpc/graph.hpp"
#include "fpc/tensor.hpp"

namespace fpc {

// build(graph, leaves) constructs the scalar expression under test; the
// harness owns leaf creation so it can read analytic gradients back and
// substitute perturbed values for the numeric pass.
template <class T>
using GradCheckFn =
    std::function<Node<T>*(Graph<T>&, const std::vector<Node<T>*>&)>;

template <class T>
struct GradCheckResult {
  T max_rel_err = 0;
  int worst_param = -1;
  std::int64_t worst_index = -1;
  T analytic = 0;
  T numeric = 0;
};

// Relative error with a floor so near-zero gradient pairs compare on an
// absolute scale.
template <class T>
T grad_rel_err(T a, T b, T floor = T(1e-4)) {
  T denom = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / denom;
}

template <class T>
GradCheckResult<T> grad_check(const GradCheckFn<T>& build,
                              const std::vector<Tensor<T>>& params, T eps) {
  std::vector<Tensor<T>> analytic;
  {
    Graph<T> g;
    std::vector<Node<T>*> leaves;
    leaves.reserve(params.size());
    for (const auto& p : params) leaves.push_back(g.leaf(p, true));
    Node<T>* root = build(g, leaves);
    g.backward(root);
    for (Node<T>* l : leaves)
      analytic.push_back(l->grad.defined() && l->grad.numel() > 0
                             ? l->grad
                             : Tensor<T>(l->value.shape()));
  }

  auto eval_at = [&](const std::vector<Tensor<T>>& values) -> T {
    Graph<T> g(false);
    std::vector<Node<T>*> leaves;
    leaves.reserve(values.size());
    for (const auto& p : values) leaves.push_back(g.leaf(p, false));
    return build(g, leaves)->value.item();
  };

  GradCheckResult<T> result;
  std::vector<Tensor<T>> work = params;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<T> perturbed = params[pi].clone();
    work[pi] = perturbed;
    T* v = perturbed.mut();
    for (std::int64_t i = 0, n = perturbed.numel(); i < n; ++i) {
      const T orig = v[i];
      v[i] = orig + eps;
      const T up = eval_at(work);
      v[i] = orig - eps;
      const T down = eval_at(work);
      v[i] = orig;
      const T numeric = (up - down) / (2 * eps);
      const T a = analytic[pi].data()[i];
      const T err = grad_rel_err(a, numeric);
      if (err > result.max_rel_err) {
        result.max_rel_err = err;
        result.worst_param = static_cast<int>(pi);
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
    work[pi] = params[pi];
  }
  return result;
}

}  // namespace fpc
