#include "impl.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace patchrot {

using detail::cdata;
using detail::dispatch;
using detail::mdata;
using detail::TensorImpl;

namespace {

thread_local bool g_grad_enabled = true;

struct GradientFault {
  std::string primitive;
  double scale = 1.0;
};

#if defined(__GLIBC__)
// Activation buffers are freed and reallocated every step. Keeping them on
// the heap instead of fresh mmap pages avoids a page-fault storm that
// otherwise costs about a quarter of the training time.
[[maybe_unused]] const bool g_malloc_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
  return true;
}();
#endif

GradientFault& gradient_fault() {
  static GradientFault fault;
  return fault;
}

const TensorImpl& checked(const std::shared_ptr<TensorImpl>& impl) {
  if (!impl) {
    throw std::logic_error("operation on an undefined tensor");
  }
  return *impl;
}

}  // namespace

std::int64_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

const char* dtype_name(DType dtype) { return dtype == DType::f64 ? "f64" : "f32"; }

bool grad_mode_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace debug {
void set_gradient_fault(const std::string& primitive, double scale) {
  gradient_fault() = GradientFault{primitive, scale};
}
}  // namespace debug

// ---- construction ----------------------------------------------------------

Tensor::Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

namespace detail {

Tensor make_tensor(Shape shape, DType dtype) {
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->dtype = dtype;
  impl->storage = std::make_shared<Storage>(make_storage(dtype, numel_of(shape)));
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

bool any_requires_grad(const std::vector<Tensor>& inputs) {
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.defined() && t.requires_grad(); });
}

void record(Tensor& out, const char* name, std::vector<Tensor> inputs, BackwardFn backward) {
  check_finite(out, name);
  if (!g_grad_enabled || !any_requires_grad(inputs)) return;
  auto node = std::make_shared<Node>();
  node->name = name;
  node->inputs.reserve(inputs.size());
  for (auto& t : inputs) node->inputs.push_back(t.impl_ptr());
  node->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(node);
}

void check_finite([[maybe_unused]] const Tensor& t, [[maybe_unused]] const char* op) {
#ifdef PATCHROT_CHECK_FINITE
  dispatch(t.dtype(), [&]<class T>() {
    for (T v : t.data<T>()) {
      if (!std::isfinite(v)) throw std::runtime_error(std::string("non-finite value produced by ") + op);
    }
  });
#endif
}

int normalize_dim(int dim, int ndim, const char* op) {
  int d = dim < 0 ? dim + ndim : dim;
  if (d < 0 || d >= ndim) {
    throw ShapeError(std::string(op) + ": dimension " + std::to_string(dim) + " out of range for rank " +
                     std::to_string(ndim));
  }
  return d;
}

Shape contiguous_strides(const Shape& shape) {
  Shape strides(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    strides[i] = strides[i + 1] * shape[i + 1];
  }
  return strides;
}

}  // namespace detail

Tensor Tensor::zeros(Shape shape, DType dtype) { return detail::make_tensor(std::move(shape), dtype); }

Tensor Tensor::ones(Shape shape, DType dtype) { return full(std::move(shape), 1.0, dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t = detail::make_tensor(std::move(shape), dtype);
  dispatch(dtype, [&]<class T>() { std::fill_n(mdata<T>(t), t.numel(), static_cast<T>(value)); });
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

Tensor Tensor::from_vector(Shape shape, std::vector<float> values) {
  if (numel_of(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("from_vector: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->dtype = DType::f32;
  impl->storage = std::make_shared<Storage>(std::move(values));
  return Tensor(std::move(impl));
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values) {
  if (numel_of(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("from_vector: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->dtype = DType::f64;
  impl->storage = std::make_shared<Storage>(std::move(values));
  return Tensor(std::move(impl));
}

Tensor Tensor::from_list(Shape shape, const std::vector<double>& values, DType dtype) {
  if (dtype == DType::f64) return from_vector(std::move(shape), values);
  return from_vector(std::move(shape), std::vector<float>(values.begin(), values.end()));
}

// ---- accessors -------------------------------------------------------------

const Shape& Tensor::shape() const { return checked(impl_).shape; }

std::int64_t Tensor::dim(int axis) const {
  return shape()[detail::normalize_dim(axis, ndim(), "dim")];
}

int Tensor::ndim() const { return static_cast<int>(shape().size()); }

std::int64_t Tensor::numel() const { return numel_of(shape()); }

DType Tensor::dtype() const { return checked(impl_).dtype; }

template <class T>
std::span<T> Tensor::data() {
  checked(impl_);
  auto* v = std::get_if<std::vector<T>>(impl_->storage.get());
  if (!v) throw std::logic_error(std::string("tensor dtype is ") + dtype_name(impl_->dtype));
  return {v->data(), v->size()};
}

template <class T>
std::span<const T> Tensor::data() const {
  checked(impl_);
  const auto* v = std::get_if<std::vector<T>>(impl_->storage.get());
  if (!v) throw std::logic_error(std::string("tensor dtype is ") + dtype_name(impl_->dtype));
  return {v->data(), v->size()};
}

template std::span<float> Tensor::data<float>();
template std::span<double> Tensor::data<double>();
template std::span<const float> Tensor::data<float>() const;
template std::span<const double> Tensor::data<double>() const;

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return value(0);
}

double Tensor::value(std::int64_t flat_index) const {
  return dispatch(dtype(), [&]<class T>() { return static_cast<double>(cdata<T>(*this)[flat_index]); });
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype(), [&]<class T>() {
    auto d = data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

bool Tensor::requires_grad() const { return checked(impl_).requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  checked(impl_);
  if (impl_->grad_fn && !flag) {
    throw GraphError("cannot clear requires_grad on a non-leaf tensor");
  }
  impl_->requires_grad = flag;
  return *this;
}

bool Tensor::is_leaf() const { return checked(impl_).grad_fn == nullptr; }

bool Tensor::has_grad() const { return checked(impl_).grad != nullptr; }

Tensor Tensor::grad() const {
  checked(impl_);
  Tensor g = detail::make_tensor(impl_->shape, impl_->dtype);
  if (impl_->grad) *g.impl()->storage = *impl_->grad;
  return g;
}

void Tensor::zero_grad() {
  checked(impl_);
  impl_->grad = std::make_unique<Storage>(detail::make_storage(impl_->dtype, numel()));
}

void Tensor::clear_grad() {
  checked(impl_);
  impl_->grad.reset();
}

Tensor Tensor::detach() const {
  const auto& src = checked(impl_);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = src.shape;
  impl->dtype = src.dtype;
  impl->storage = src.storage;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
  const auto& src = checked(impl_);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = src.shape;
  impl->dtype = src.dtype;
  impl->storage = std::make_shared<Storage>(*src.storage);
  return Tensor(std::move(impl));
}

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return clone();
  Tensor out = detail::make_tensor(shape(), target);
  dispatch(dtype(), [&]<class S>() {
    dispatch(target, [&]<class D>() {
      const S* s = cdata<S>(*this);
      D* d = mdata<D>(out);
      for (std::int64_t i = 0, n = numel(); i < n; ++i) d[i] = static_cast<D>(s[i]);
    });
  });
  return out;
}

void Tensor::assign(const Tensor& src) {
  if (src.shape() != shape()) {
    throw ShapeError("assign: shape " + shape_str(src.shape()) + " into " + shape_str(shape()));
  }
  if (src.dtype() == dtype()) {
    *impl_->storage = *src.impl()->storage;
  } else {
    *impl_->storage = *src.to(dtype()).impl()->storage;
  }
}

bool Tensor::shares_storage(const Tensor& other) const {
  return defined() && other.defined() && impl_->storage == other.impl()->storage;
}

// ---- backward --------------------------------------------------------------

namespace {

void accumulate(Storage& into, const Tensor& g) {
  std::visit(
      [&](auto& vec) {
        using T = typename std::decay_t<decltype(vec)>::value_type;
        if (g.dtype() != detail::dtype_of<T>()) {
          throw GraphError("gradient dtype mismatch");
        }
        const T* src = cdata<T>(g);
        for (std::size_t i = 0; i < vec.size(); ++i) vec[i] += src[i];
      },
      into);
}

}  // namespace

void Tensor::backward() const {
  const auto& root = checked(impl_);
  if (numel() != 1) {
    throw GraphError("backward requires a scalar loss, got shape " + shape_str(shape()));
  }
  if (!root.requires_grad) {
    throw GraphError("backward on a tensor that does not require grad");
  }
  if (root.grad_fn && root.grad_fn->consumed) {
    throw GraphError("backward called twice on the same graph; rebuild the forward pass first");
  }

  // Iterative DFS post-order gives a topological order of graph nodes.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack{{impl_.get(), 0}};
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto& fn = node->grad_fn;
    if (fn && fn->consumed) {
      throw GraphError("backward through a freed graph (node '" + fn->name + "')");
    }
    if (fn && next < fn->inputs.size()) {
      TensorImpl* child = fn->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  std::unordered_map<TensorImpl*, Tensor> grads;
  grads.emplace(impl_.get(), Tensor::ones(shape(), dtype()));
  const GradientFault fault = gradient_fault();

  NoGradGuard no_grad;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    Tensor g = std::move(found->second);
    grads.erase(found);

    if (!node->grad_fn) {
      if (!node->grad) node->grad = std::make_unique<Storage>(detail::make_storage(node->dtype, numel_of(node->shape)));
      accumulate(*node->grad, g);
      continue;
    }
    auto& fn = *node->grad_fn;
    std::vector<Tensor> input_grads = fn.backward(g);
    fn.backward = nullptr;
    if (!fault.primitive.empty() && fault.primitive == fn.name) {
      for (auto& ig : input_grads) {
        if (ig.defined()) ig = ig * fault.scale;
      }
    }
    for (std::size_t i = 0; i < fn.inputs.size(); ++i) {
      TensorImpl* in = fn.inputs[i].get();
      if (!in->requires_grad || i >= input_grads.size() || !input_grads[i].defined()) continue;
      const Tensor& ig = input_grads[i];
      if (ig.shape() != in->shape) {
        throw GraphError("backward of '" + fn.name + "' produced gradient " + shape_str(ig.shape()) +
                         " for input " + shape_str(in->shape));
      }
      auto slot = grads.find(in);
      if (slot == grads.end()) {
        // Fresh buffers can be adopted; views of other tensors must be copied.
        const bool exclusive = ig.impl_ptr().use_count() == 1 && ig.impl()->storage.use_count() == 1;
        grads.emplace(in, exclusive ? ig : ig.clone());
      } else {
        accumulate(*slot->second.impl()->storage, ig);
      }
    }
  }

  for (TensorImpl* node : order) {
    if (node->grad_fn) {
      node->grad_fn->consumed = true;
      node->grad_fn->backward = nullptr;
      node->grad_fn->inputs.clear();
    }
  }
}

}  // namespace patchrot
