#pragma once

#include "patchrot/tensor.hpp"

#include <cmath>
#include <utility>

namespace patchrot::detail {

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

struct Node {
  std::string name;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
  bool consumed = false;
};

struct TensorImpl {
  Shape shape;
  DType dtype = DType::f32;
  std::shared_ptr<Storage> storage;
  bool requires_grad = false;
  std::unique_ptr<Storage> grad;
  std::shared_ptr<Node> grad_fn;
};

template <class F>
decltype(auto) dispatch(DType dtype, F&& f) {
  if (dtype == DType::f64) {
    return std::forward<F>(f).template operator()<double>();
  }
  return std::forward<F>(f).template operator()<float>();
}

template <class T>
constexpr DType dtype_of() {
  return std::is_same_v<T, double> ? DType::f64 : DType::f32;
}

inline Storage make_storage(DType dtype, std::int64_t n) {
  if (dtype == DType::f64) {
    return std::vector<double>(static_cast<std::size_t>(n), 0.0);
  }
  return std::vector<float>(static_cast<std::size_t>(n), 0.0f);
}

template <class T>
const T* cdata(const Tensor& t) {
  return std::get<std::vector<T>>(*t.impl()->storage).data();
}

template <class T>
T* mdata(Tensor& t) {
  return std::get<std::vector<T>>(*t.impl()->storage).data();
}

// Fresh, graph-free tensor of the given shape, zero-filled.
Tensor make_tensor(Shape shape, DType dtype);

// Attaches a backward node to `out` if recording is enabled and any input
// requires grad. `inputs` are the differentiable operands in the order the
// backward function returns their gradients.
void record(Tensor& out, const char* name, std::vector<Tensor> inputs, BackwardFn backward);

bool any_requires_grad(const std::vector<Tensor>& inputs);

void check_finite(const Tensor& t, const char* op);

int normalize_dim(int dim, int ndim, const char* op);
Shape contiguous_strides(const Shape& shape);

// Raw kernels shared by forward and backward paths (never recorded).
Tensor matmul_raw(const Tensor& a, bool trans_a, const Tensor& b, bool trans_b);
Tensor transpose_raw(const Tensor& x, int d0, int d1);
Tensor broadcast_raw(const Tensor& x, const Shape& shape);
Tensor scatter_add_raw(const Tensor& src, int dim, const Index& index, const Shape& out_shape);
Tensor slice_scatter_raw(const Tensor& g, const Shape& full_shape, int dim, std::int64_t start);

}  // namespace patchrot::detail
