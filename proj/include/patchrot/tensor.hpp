#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle; copies alias the same storage. Operations
// that see an input with requires_grad() record a node on the graph, and
// Tensor::backward() walks that graph once in reverse topological order.
// All differentiable math in the project is built from the primitives
// declared at the bottom of this header.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace patchrot {

enum class DType : std::uint8_t { f32, f64 };

using Shape = std::vector<std::int64_t>;
using Storage = std::variant<std::vector<float>, std::vector<double>>;

std::int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);
const char* dtype_name(DType dtype);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {
struct TensorImpl;
struct Node;
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl);

  static Tensor zeros(Shape shape, DType dtype = DType::f32);
  static Tensor ones(Shape shape, DType dtype = DType::f32);
  static Tensor full(Shape shape, double value, DType dtype = DType::f32);
  static Tensor scalar(double value, DType dtype = DType::f32);
  static Tensor from_vector(Shape shape, std::vector<float> values);
  static Tensor from_vector(Shape shape, std::vector<double> values);
  static Tensor from_list(Shape shape, const std::vector<double>& values, DType dtype = DType::f32);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(int axis) const;
  int ndim() const;
  std::int64_t numel() const;
  DType dtype() const;

  template <class T>
  std::span<T> data();
  template <class T>
  std::span<const T> data() const;

  double item() const;
  double value(std::int64_t flat_index) const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  // Accumulated gradient; all zeros if nothing has been accumulated yet.
  Tensor grad() const;
  // Allocates (or resets) the gradient buffer to zeros.
  void zero_grad();
  // Releases the gradient buffer; has_grad() becomes false.
  void clear_grad();

  Tensor detach() const;
  Tensor clone() const;
  Tensor to(DType dtype) const;
  // In-place overwrite of values, shapes must match. Not recorded.
  void assign(const Tensor& src);
  bool shares_storage(const Tensor& other) const;

  void backward() const;

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Scoped switch that disables graph recording on the current thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

// Integer index array used by gather.
struct Index {
  Shape shape;
  std::vector<std::int64_t> values;
};

// ---- primitives -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor power(const Tensor& x, double exponent);
Tensor sqrt(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, int dim, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, int dim, bool keepdim = false);
Tensor max(const Tensor& x, int dim, bool keepdim = false);
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x, int dim0, int dim1);
Tensor slice(const Tensor& x, int dim, std::int64_t start, std::int64_t end);
Tensor concat(const std::vector<Tensor>& parts, int dim);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
Tensor gather(const Tensor& x, int dim, const Index& index);

// Rows of x along dim 0, in the given order; a consecutive run is a slice,
// anything else a gather.
Tensor select_rows(const Tensor& x, const std::vector<std::int64_t>& rows);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator+(const Tensor& a, double s);
Tensor operator-(const Tensor& a, double s);
Tensor operator*(const Tensor& a, double s);
Tensor operator/(const Tensor& a, double s);
Tensor operator+(double s, const Tensor& a);
Tensor operator-(double s, const Tensor& a);
Tensor operator*(double s, const Tensor& a);
Tensor operator-(const Tensor& a);

// ---- non-differentiable helpers -------------------------------------------

Shape broadcast_shapes(const Shape& a, const Shape& b);
// Reduces `g` by summation onto `target`, which must broadcast to g's shape.
Tensor sum_to(const Tensor& g, const Shape& target);
bool bit_equal(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

namespace debug {
// Scales the gradient produced by the named primitive's backward. Test hook
// for verifying that gradient checks detect a faulty primitive; pass an
// empty name to clear.
void set_gradient_fault(const std::string& primitive, double scale);
}  // namespace debug

}  // namespace patchrot
