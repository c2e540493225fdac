#include "patchrot/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace patchrot {

namespace {

double eval_scalar(const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
  const double v = f(x).item();
  if (!std::isfinite(v)) throw std::domain_error("finite_diff_grad: function returned a non-finite value");
  return v;
}

template <class T>
Tensor central_differences(const std::function<Tensor(const Tensor&)>& f, Tensor& x, double eps) {
  NoGradGuard no_grad;
  std::span<T> values = x.data<T>();
  std::vector<double> grad(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T saved = values[i];
    auto at = [&](double offset) {
      values[i] = static_cast<T>(saved + offset);
      return eval_scalar(f, x);
    };
    const double p1 = at(eps), m1 = at(-eps), p2 = at(2 * eps), m2 = at(-2 * eps);
    values[i] = saved;
    // Five-point stencil: truncation error O(eps^4).
    grad[i] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
  }
  return Tensor::from_list(x.shape(), grad, x.dtype());
}

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

Tensor finite_diff_grad(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps) {
  if (!(eps > 0)) throw std::invalid_argument("finite_diff_grad: eps must be positive");
  if (x.dtype() == DType::f64) return central_differences<double>(f, x, eps);
  return central_differences<float>(f, x, eps);
}

double relative_error(const Tensor& analytic, const Tensor& numeric) {
  if (analytic.shape() != numeric.shape()) throw ShapeError("relative_error: shape mismatch");
  const std::vector<double> a = analytic.to_vector();
  const std::vector<double> n = numeric.to_vector();
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - n[i];
  const double scale = std::max(norm(a), norm(n));
  if (scale == 0.0) return 0.0;
  return norm(d) / scale;
}

GradCheckResult check_gradients(const std::function<Tensor()>& loss, std::vector<Tensor> inputs, double tolerance,
                                double eps) {
  for (auto& t : inputs) {
    if (t.dtype() != DType::f64) throw std::invalid_argument("check_gradients: inputs must be f64");
    t.zero_grad();
  }
  loss().backward();
  GradCheckResult result;
  for (auto& t : inputs) {
    const Tensor analytic = t.grad();
    const Tensor numeric = finite_diff_grad([&](const Tensor&) { return loss(); }, t, eps);
    result.max_relative_error = std::max(result.max_relative_error, relative_error(analytic, numeric));
  }
  result.passed = result.max_relative_error <= tolerance;
  return result;
}

}  // namespace patchrot
