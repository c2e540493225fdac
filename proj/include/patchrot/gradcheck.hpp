#pragma once

#include <functional>
#include <vector>

#include "patchrot/tensor.hpp"

namespace patchrot {

// Fourth-order central-difference gradient of a scalar function, evaluated
// by perturbing each element of `x` in place. Second-order differences are
// not enough near a LayerNorm whose input has a tiny variance, such as the
// class token at initialization. Throws if f returns a non-finite value.
Tensor finite_diff_grad(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps = 3e-5);

// ||a - b|| / max(||a||, ||b||), with 0/0 treated as 0.
double relative_error(const Tensor& analytic, const Tensor& numeric);

struct GradCheckResult {
  double max_relative_error = 0.0;
  bool passed = false;
};

// Compares backward() against finite_diff_grad for every tensor in `inputs`
// (each must be f64 with requires_grad set). `loss` recomputes the scalar
// from scratch on every call.
GradCheckResult check_gradients(const std::function<Tensor()>& loss, std::vector<Tensor> inputs,
                                double tolerance = 1e-6, double eps = 3e-5);

}  // namespace patchrot
