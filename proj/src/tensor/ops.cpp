#include "impl.hpp"

#include <Eigen/Core>
#include <cstring>

#include <algorithm>
#include <limits>

namespace patchrot {

using detail::cdata;
using detail::dispatch;
using detail::make_tensor;
using detail::mdata;
using detail::record;

namespace {

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw std::invalid_argument(std::string(op) + ": dtype mismatch " + dtype_name(a.dtype()) + " vs " +
                                dtype_name(b.dtype()));
  }
}

// Strides of `in` viewed inside an output of rank `rank`, 0 on broadcast axes.
Shape broadcast_strides(const Shape& in, const Shape& out) {
  Shape strides(out.size(), 0);
  Shape own = detail::contiguous_strides(in);
  const std::size_t offset = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) {
    strides[offset + i] = in[i] == 1 && out[offset + i] != 1 ? 0 : own[i];
  }
  return strides;
}

// Walks every element of `shape`, calling body(offset_a, offset_b, count, stride_a,
// stride_b) once per innermost row.
template <class Body>
void for_each_row(const Shape& shape, const Shape& sa, const Shape& sb, Body&& body) {
  const int rank = static_cast<int>(shape.size());
  if (rank == 0) {
    body(0, 0, 1, 0, 0);
    return;
  }
  if (numel_of(shape) == 0) return;
  const std::int64_t inner = shape[rank - 1];
  std::vector<std::int64_t> idx(rank, 0);
  std::int64_t oa = 0;
  std::int64_t ob = 0;
  while (true) {
    body(oa, ob, inner, sa[rank - 1], sb[rank - 1]);
    int d = rank - 2;
    for (; d >= 0; --d) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < shape[d]) break;
      oa -= sa[d] * shape[d];
      ob -= sb[d] * shape[d];
      idx[d] = 0;
    }
    if (d < 0) break;
  }
}

template <class T, class Op>
void binary_kernel(const Tensor& a, const Tensor& b, Tensor& out, Op op) {
  const T* pa = cdata<T>(a);
  const T* pb = cdata<T>(b);
  T* po = mdata<T>(out);
  const Shape& os = out.shape();
  const std::int64_t n = out.numel();
  if (a.shape() == os && b.shape() == os) {
    for (std::int64_t i = 0; i < n; ++i) po[i] = op(pa[i], pb[i]);
    return;
  }
  if (a.shape() == os && b.numel() == 1) {
    const T s = pb[0];
    for (std::int64_t i = 0; i < n; ++i) po[i] = op(pa[i], s);
    return;
  }
  if (b.shape() == os && a.numel() == 1) {
    const T s = pa[0];
    for (std::int64_t i = 0; i < n; ++i) po[i] = op(s, pb[i]);
    return;
  }
  const Shape sa = broadcast_strides(a.shape(), os);
  const Shape sb = broadcast_strides(b.shape(), os);
  std::int64_t o = 0;
  for_each_row(os, sa, sb, [&](std::int64_t oa, std::int64_t ob, std::int64_t count, std::int64_t ia, std::int64_t ib) {
    const T* ra = pa + oa;
    const T* rb = pb + ob;
    T* ro = po + o;
    if (ia == 1 && ib == 1) {
      for (std::int64_t j = 0; j < count; ++j) ro[j] = op(ra[j], rb[j]);
    } else if (ia == 1 && ib == 0) {
      const T s = rb[0];
      for (std::int64_t j = 0; j < count; ++j) ro[j] = op(ra[j], s);
    } else if (ia == 0 && ib == 1) {
      const T s = ra[0];
      for (std::int64_t j = 0; j < count; ++j) ro[j] = op(s, rb[j]);
    } else {
      for (std::int64_t j = 0; j < count; ++j) ro[j] = op(ra[j * ia], rb[j * ib]);
    }
    o += count;
  });
}

template <class Op>
Tensor binary_forward(const Tensor& a, const Tensor& b, const char* name, Op op) {
  require_same_dtype(a, b, name);
  Tensor out = make_tensor(broadcast_shapes(a.shape(), b.shape()), a.dtype());
  dispatch(a.dtype(), [&]<class T>() { binary_kernel<T>(a, b, out, op); });
  return out;
}

template <class Op>
Tensor unary_forward(const Tensor& x, Op op) {
  Tensor out = make_tensor(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = cdata<T>(x);
    T* po = mdata<T>(out);
    for (std::int64_t i = 0, n = x.numel(); i < n; ++i) po[i] = op(px[i]);
  });
  return out;
}

// Splits `shape` around `dim` into (outer, extent, inner) counts.
struct Axes {
  std::int64_t outer = 1;
  std::int64_t extent = 1;
  std::int64_t inner = 1;
};

Axes split_axes(const Shape& shape, int dim) {
  Axes a;
  for (int i = 0; i < dim; ++i) a.outer *= shape[i];
  a.extent = shape[dim];
  for (std::size_t i = dim + 1; i < shape.size(); ++i) a.inner *= shape[i];
  return a;
}

Shape reduced_shape(const Shape& shape, int dim, bool keepdim) {
  Shape out = shape;
  if (keepdim) {
    out[dim] = 1;
  } else {
    out.erase(out.begin() + dim);
  }
  return out;
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

Tensor sum_to(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  if (broadcast_shapes(target, g.shape()) != g.shape()) {
    throw ShapeError("sum_to: " + shape_str(target) + " does not broadcast to " + shape_str(g.shape()));
  }
  Tensor out = make_tensor(target, g.dtype());
  dispatch(g.dtype(), [&]<class T>() {
    const T* pg = cdata<T>(g);
    T* po = mdata<T>(out);
    const Shape st = broadcast_strides(target, g.shape());
    const Shape sg = detail::contiguous_strides(g.shape());
    std::int64_t o = 0;
    for_each_row(g.shape(), st, sg, [&](std::int64_t ot, std::int64_t, std::int64_t count, std::int64_t it, std::int64_t) {
      T* rt = po + ot;
      const T* rg = pg + o;
      if (it == 0) {
        T acc = 0;
        for (std::int64_t j = 0; j < count; ++j) acc += rg[j];
        rt[0] += acc;
      } else {
        for (std::int64_t j = 0; j < count; ++j) rt[j * it] += rg[j];
      }
      o += count;
    });
  });
  return out;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
  return dispatch(a.dtype(), [&]<class T>() {
    return std::equal(cdata<T>(a), cdata<T>(a) + a.numel(), cdata<T>(b),
                      [](T x, T y) { return std::memcmp(&x, &y, sizeof(T)) == 0; });
  });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::int64_t i = 0, n = a.numel(); i < n; ++i) m = std::max(m, std::abs(a.value(i) - b.value(i)));
  return m;
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor out = binary_forward(a, b, "add", [](auto x, auto y) { return x + y; });
  record(out, "add", {a, b}, [sa = a.shape(), sb = b.shape()](const Tensor& g) {
    return std::vector<Tensor>{sum_to(g, sa), sum_to(g, sb)};
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tensor out = binary_forward(a, b, "sub", [](auto x, auto y) { return x - y; });
  record(out, "sub", {a, b}, [sa = a.shape(), sb = b.shape()](const Tensor& g) {
    return std::vector<Tensor>{sum_to(g, sa), -sum_to(g, sb)};
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Tensor out = binary_forward(a, b, "mul", [](auto x, auto y) { return x * y; });
  record(out, "mul", {a, b}, [a = a.detach(), b = b.detach(), ra = a.requires_grad(), rb = b.requires_grad()](const Tensor& g) {
    std::vector<Tensor> grads(2);
    if (ra) grads[0] = sum_to(g * b, a.shape());
    if (rb) grads[1] = sum_to(g * a, b.shape());
    return grads;
  });
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  Tensor out = binary_forward(a, b, "div", [](auto x, auto y) { return x / y; });
  record(out, "div", {a, b}, [a = a.detach(), b = b.detach(), ra = a.requires_grad(), rb = b.requires_grad()](const Tensor& g) {
    std::vector<Tensor> grads(2);
    if (ra) grads[0] = sum_to(g / b, a.shape());
    if (rb) grads[1] = sum_to(-(g * a) / (b * b), b.shape());
    return grads;
  });
  return out;
}

Tensor exp(const Tensor& x) {
  Tensor out = unary_forward(x, [](auto v) { return std::exp(v); });
  record(out, "exp", {x}, [y = out.detach()](const Tensor& g) { return std::vector<Tensor>{g * y}; });
  return out;
}

Tensor log(const Tensor& x) {
  Tensor out = unary_forward(x, [](auto v) { return std::log(v); });
  record(out, "log", {x}, [x = x.detach()](const Tensor& g) { return std::vector<Tensor>{g / x}; });
  return out;
}

Tensor tanh(const Tensor& x) {
  // f32 goes through expf, about 3x faster than tanhf and within 2e-7
  // absolute; the saturated tails give exactly +-1.
  Tensor out = unary_forward(x, [](auto v) {
    if constexpr (std::is_same_v<decltype(v), float>) {
      return 1.0f - 2.0f / (std::exp(2.0f * v) + 1.0f);
    } else {
      return std::tanh(v);
    }
  });
  record(out, "tanh", {x}, [y = out.detach()](const Tensor& g) {
    Tensor d = make_tensor(y.shape(), y.dtype());
    dispatch(y.dtype(), [&]<class T>() {
      const T* py = cdata<T>(y);
      const T* pg = cdata<T>(g);
      T* pd = mdata<T>(d);
      for (std::int64_t i = 0, n = y.numel(); i < n; ++i) pd[i] = pg[i] * (T(1) - py[i] * py[i]);
    });
    return std::vector<Tensor>{d};
  });
  return out;
}

Tensor power(const Tensor& x, double exponent) {
  Tensor out;
  // Small integer exponents skip libm pow, which dominates GELU otherwise.
  if (exponent == 2.0) {
    out = unary_forward(x, [](auto v) { return v * v; });
  } else if (exponent == 3.0) {
    out = unary_forward(x, [](auto v) { return v * v * v; });
  } else {
    out = unary_forward(x, [exponent](auto v) { return static_cast<decltype(v)>(std::pow(v, exponent)); });
  }
  record(out, "power", {x}, [x = x.detach(), exponent](const Tensor& g) {
    Tensor d = make_tensor(x.shape(), x.dtype());
    dispatch(x.dtype(), [&]<class T>() {
      const T* px = cdata<T>(x);
      const T* pg = cdata<T>(g);
      T* pd = mdata<T>(d);
      const T e = static_cast<T>(exponent);
      for (std::int64_t i = 0, n = x.numel(); i < n; ++i) {
        if (exponent == 2.0) {
          pd[i] = pg[i] * T(2) * px[i];
        } else if (exponent == 3.0) {
          pd[i] = pg[i] * T(3) * (px[i] * px[i]);
        } else {
          pd[i] = pg[i] * e * static_cast<T>(std::pow(px[i], exponent - 1.0));
        }
      }
    });
    return std::vector<Tensor>{d};
  });
  return out;
}

Tensor sqrt(const Tensor& x) {
  Tensor out = unary_forward(x, [](auto v) { return std::sqrt(v); });
  record(out, "sqrt", {x}, [y = out.detach()](const Tensor& g) { return std::vector<Tensor>{g * 0.5 / y}; });
  return out;
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x) {
  Tensor out = make_tensor({}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = cdata<T>(x);
    T acc = 0;
    for (std::int64_t i = 0, n = x.numel(); i < n; ++i) acc += px[i];
    mdata<T>(out)[0] = acc;
  });
  record(out, "sum", {x}, [s = x.shape()](const Tensor& g) { return std::vector<Tensor>{detail::broadcast_raw(g, s)}; });
  return out;
}

Tensor sum(const Tensor& x, int dim, bool keepdim) {
  const int d = detail::normalize_dim(dim, x.ndim(), "sum");
  const Axes ax = split_axes(x.shape(), d);
  Tensor out = make_tensor(reduced_shape(x.shape(), d, keepdim), x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = cdata<T>(x);
    T* po = mdata<T>(out);
    for (std::int64_t o = 0; o < ax.outer; ++o) {
      T* row = po + o * ax.inner;
      for (std::int64_t e = 0; e < ax.extent; ++e) {
        const T* src = px + (o * ax.extent + e) * ax.inner;
        for (std::int64_t i = 0; i < ax.inner; ++i) row[i] += src[i];
      }
    }
  });
  record(out, "sum", {x}, [s = x.shape(), d](const Tensor& g) {
    Shape kept = s;
    kept[d] = 1;
    return std::vector<Tensor>{detail::broadcast_raw(reshape(g, kept), s)};
  });
  return out;
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(std::max<std::int64_t>(x.numel(), 1));
  Tensor out = make_tensor({}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = cdata<T>(x);
    T acc = 0;
    for (std::int64_t i = 0, m = x.numel(); i < m; ++i) acc += px[i];
    mdata<T>(out)[0] = static_cast<T>(acc / static_cast<T>(n));
  });
  record(out, "mean", {x}, [s = x.shape(), n](const Tensor& g) {
    return std::vector<Tensor>{detail::broadcast_raw(g / n, s)};
  });
  return out;
}

Tensor mean(const Tensor& x, int dim, bool keepdim) {
  const int d = detail::normalize_dim(dim, x.ndim(), "mean");
  const double n = static_cast<double>(x.shape()[d]);
  Tensor out;
  {
    NoGradGuard guard;
    out = sum(x, d, keepdim) / n;
  }
  record(out, "mean", {x}, [s = x.shape(), d, n](const Tensor& g) {
    Shape kept = s;
    kept[d] = 1;
    return std::vector<Tensor>{detail::broadcast_raw(reshape(g, kept) / n, s)};
  });
  return out;
}

Tensor max(const Tensor& x, int dim, bool keepdim) {
  const int d = detail::normalize_dim(dim, x.ndim(), "max");
  const Axes ax = split_axes(x.shape(), d);
  if (ax.extent == 0) throw ShapeError("max over an empty dimension");
  Shape kept = x.shape();
  kept[d] = 1;
  Tensor out = make_tensor(reduced_shape(x.shape(), d, keepdim), x.dtype());
  Index argmax{kept, std::vector<std::int64_t>(static_cast<std::size_t>(ax.outer * ax.inner), 0)};
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = cdata<T>(x);
    T* po = mdata<T>(out);
    for (std::int64_t o = 0; o < ax.outer; ++o) {
      for (std::int64_t i = 0; i < ax.inner; ++i) {
        const T* base = px + o * ax.extent * ax.inner + i;
        T best = base[0];
        std::int64_t arg = 0;
        for (std::int64_t e = 1; e < ax.extent; ++e) {
          if (base[e * ax.inner] > best) {
            best = base[e * ax.inner];
            arg = e;
          }
        }
        po[o * ax.inner + i] = best;
        argmax.values[o * ax.inner + i] = arg;
      }
    }
  });
  record(out, "max", {x}, [s = x.shape(), kept, d, argmax = std::move(argmax)](const Tensor& g) {
    return std::vector<Tensor>{detail::scatter_add_raw(reshape(g, kept), d, argmax, s)};
  });
  return out;
}

// ---- shape ops -------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one -1 in " + shape_str(shape));
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) shape[infer] = known == 0 ? 0 : x.numel() / known;
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape;
  impl->dtype = x.dtype();
  impl->storage = x.impl()->storage;
  Tensor out(std::move(impl));
  record(out, "reshape", {x}, [s = x.shape()](const Tensor& g) { return std::vector<Tensor>{reshape(g, s)}; });
  return out;
}

Tensor transpose(const Tensor& x, int dim0, int dim1) {
  const int d0 = detail::normalize_dim(dim0, x.ndim(), "transpose");
  const int d1 = detail::normalize_dim(dim1, x.ndim(), "transpose");
  Tensor out = detail::transpose_raw(x, d0, d1);
  record(out, "transpose", {x}, [d0, d1](const Tensor& g) { return std::vector<Tensor>{detail::transpose_raw(g, d0, d1)}; });
  return out;
}

Tensor slice(const Tensor& x, int dim, std::int64_t start, std::int64_t end) {
  const int d = detail::normalize_dim(dim, x.ndim(), "slice");
  const std::int64_t extent = x.shape()[d];
  if (start < 0 || end > extent || start > end) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(end) + ") out of bounds for " +
                     shape_str(x.shape()) + " at dim " + std::to_string(d));
  }
  const Axes ax = split_axes(x.shape(), d);
  Shape os = x.shape();
  os[d] = end - start;
  Tensor out = make_tensor(os, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = cdata<T>(x);
    T* po = mdata<T>(out);
    const std::int64_t chunk = (end - start) * ax.inner;
    for (std::int64_t o = 0; o < ax.outer; ++o) {
      std::copy_n(px + (o * ax.extent + start) * ax.inner, chunk, po + o * chunk);
    }
  });
  record(out, "slice", {x}, [s = x.shape(), d, start](const Tensor& g) {
    return std::vector<Tensor>{detail::slice_scatter_raw(g, s, d, start)};
  });
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int dim) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const int d = detail::normalize_dim(dim, parts[0].ndim(), "concat");
  Shape os = parts[0].shape();
  os[d] = 0;
  for (const auto& p : parts) {
    require_same_dtype(parts[0], p, "concat");
    Shape check = p.shape();
    if (check.size() != os.size()) throw ShapeError("concat: rank mismatch");
    check[d] = 0;
    Shape ref = parts[0].shape();
    ref[d] = 0;
    if (check != ref) {
      throw ShapeError("concat: " + shape_str(p.shape()) + " incompatible with " + shape_str(parts[0].shape()));
    }
    os[d] += p.shape()[d];
  }
  Tensor out = make_tensor(os, parts[0].dtype());
  const Axes oax = split_axes(os, d);
  std::vector<std::int64_t> offsets;
  dispatch(out.dtype(), [&]<class T>() {
    T* po = mdata<T>(out);
    std::int64_t at = 0;
    for (const auto& p : parts) {
      offsets.push_back(at);
      const Axes ax = split_axes(p.shape(), d);
      const T* pp = cdata<T>(p);
      const std::int64_t chunk = ax.extent * ax.inner;
      for (std::int64_t o = 0; o < ax.outer; ++o) {
        std::copy_n(pp + o * chunk, chunk, po + (o * oax.extent + at) * oax.inner);
      }
      at += ax.extent;
    }
  });
  std::vector<std::int64_t> extents;
  for (const auto& p : parts) extents.push_back(p.shape()[d]);
  record(out, "concat", parts, [d, offsets, extents](const Tensor& g) {
    std::vector<Tensor> grads;
    for (std::size_t i = 0; i < offsets.size(); ++i) grads.push_back(slice(g, d, offsets[i], offsets[i] + extents[i]));
    return grads;
  });
  return out;
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  if (broadcast_shapes(x.shape(), shape) != shape) {
    throw ShapeError("broadcast_to: " + shape_str(x.shape()) + " cannot broadcast to " + shape_str(shape));
  }
  Tensor out = detail::broadcast_raw(x, shape);
  record(out, "broadcast", {x}, [s = x.shape()](const Tensor& g) { return std::vector<Tensor>{sum_to(g, s)}; });
  return out;
}

Tensor gather(const Tensor& x, int dim, const Index& index) {
  const int d = detail::normalize_dim(dim, x.ndim(), "gather");
  if (index.shape.size() != x.shape().size()) throw ShapeError("gather: index rank mismatch");
  for (std::size_t i = 0; i < index.shape.size(); ++i) {
    if (static_cast<int>(i) != d && index.shape[i] != x.shape()[i]) {
      throw ShapeError("gather: index shape " + shape_str(index.shape) + " incompatible with " + shape_str(x.shape()));
    }
  }
  if (numel_of(index.shape) != static_cast<std::int64_t>(index.values.size())) {
    throw ShapeError("gather: index has wrong number of values");
  }
  const Axes xa = split_axes(x.shape(), d);
  const Axes ia = split_axes(index.shape, d);
  Tensor out = make_tensor(index.shape, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = cdata<T>(x);
    T* po = mdata<T>(out);
    for (std::int64_t o = 0; o < ia.outer; ++o) {
      for (std::int64_t e = 0; e < ia.extent; ++e) {
        for (std::int64_t i = 0; i < ia.inner; ++i) {
          const std::int64_t at = (o * ia.extent + e) * ia.inner + i;
          const std::int64_t src = index.values[at];
          if (src < 0 || src >= xa.extent) {
            throw std::out_of_range("gather: index " + std::to_string(src) + " out of range [0," +
                                    std::to_string(xa.extent) + ")");
          }
          po[at] = px[(o * xa.extent + src) * xa.inner + i];
        }
      }
    }
  });
  record(out, "gather", {x}, [s = x.shape(), d, index](const Tensor& g) {
    return std::vector<Tensor>{detail::scatter_add_raw(g, d, index, s)};
  });
  return out;
}

Tensor select_rows(const Tensor& x, const std::vector<std::int64_t>& rows) {
  if (rows.empty()) throw std::invalid_argument("select_rows: empty selection");
  if (x.ndim() < 1) throw ShapeError("select_rows: scalar input");
  bool run = true;
  for (std::size_t i = 1; i < rows.size() && run; ++i) run = rows[i] == rows[i - 1] + 1;
  if (run) return slice(x, 0, rows.front(), rows.back() + 1);
  const std::int64_t inner = x.numel() / x.dim(0);
  Index index{{static_cast<std::int64_t>(rows.size()), inner}, {}};
  index.values.reserve(rows.size() * inner);
  for (auto r : rows) index.values.insert(index.values.end(), inner, r);
  Shape shape = x.shape();
  shape[0] = static_cast<std::int64_t>(rows.size());
  return reshape(gather(reshape(x, {x.dim(0), inner}), 0, index), shape);
}

// ---- matmul ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "matmul");
  Tensor out = detail::matmul_raw(a, false, b, false);
  record(out, "matmul", {a, b}, [a = a.detach(), b = b.detach(), ra = a.requires_grad(), rb = b.requires_grad()](const Tensor& g) {
    std::vector<Tensor> grads(2);
    const bool a_vec = a.ndim() == 1;
    const bool b_vec = b.ndim() == 1;
    const Tensor a2 = a_vec ? reshape(a, {1, a.shape()[0]}) : a;
    const Tensor b2 = b_vec ? reshape(b, {b.shape()[0], 1}) : b;
    Shape gs = g.shape();
    if (a_vec) gs.insert(gs.end() - (b_vec ? 0 : 1), 1);
    if (b_vec) gs.push_back(1);
    const Tensor g2 = reshape(g, gs);
    if (ra) {
      Tensor ga = detail::matmul_raw(g2, false, b2, true);
      grads[0] = reshape(sum_to(ga, a2.shape()), a.shape());
    }
    if (rb) {
      Tensor gb;
      if (b2.ndim() == 2 && a2.ndim() > 2) {
        const std::int64_t k = a2.shape().back();
        const std::int64_t n = g2.shape().back();
        gb = detail::matmul_raw(reshape(a2, {-1, k}), true, reshape(g2, {-1, n}), false);
      } else {
        gb = sum_to(detail::matmul_raw(a2, true, g2, false), b2.shape());
      }
      grads[1] = reshape(gb, b.shape());
    }
    return grads;
  });
  return out;
}

// ---- operators -------------------------------------------------------------

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s, a.dtype())); }
Tensor operator-(const Tensor& a, double s) { return sub(a, Tensor::scalar(s, a.dtype())); }
Tensor operator*(const Tensor& a, double s) { return mul(a, Tensor::scalar(s, a.dtype())); }
Tensor operator/(const Tensor& a, double s) { return div(a, Tensor::scalar(s, a.dtype())); }
Tensor operator+(double s, const Tensor& a) { return add(Tensor::scalar(s, a.dtype()), a); }
Tensor operator-(double s, const Tensor& a) { return sub(Tensor::scalar(s, a.dtype()), a); }
Tensor operator*(double s, const Tensor& a) { return mul(Tensor::scalar(s, a.dtype()), a); }
Tensor operator-(const Tensor& a) { return mul(a, Tensor::scalar(-1.0, a.dtype())); }

// ---- raw kernels -----------------------------------------------------------

namespace detail {

Tensor broadcast_raw(const Tensor& x, const Shape& shape) {
  if (x.shape() == shape) return x.clone();
  Tensor out = make_tensor(shape, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = cdata<T>(x);
    T* po = mdata<T>(out);
    const Shape sx = broadcast_strides(x.shape(), shape);
    std::int64_t o = 0;
    for_each_row(shape, sx, sx, [&](std::int64_t ox, std::int64_t, std::int64_t count, std::int64_t ix, std::int64_t) {
      if (ix == 0) {
        std::fill_n(po + o, count, px[ox]);
      } else {
        for (std::int64_t j = 0; j < count; ++j) po[o + j] = px[ox + j * ix];
      }
      o += count;
    });
  });
  return out;
}

Tensor transpose_raw(const Tensor& x, int d0, int d1) {
  Shape os = x.shape();
  std::swap(os[d0], os[d1]);
  Tensor out = make_tensor(os, x.dtype());
  if (d0 == d1) {
    out.assign(x);
    return out;
  }
  Shape in_strides = contiguous_strides(x.shape());
  std::swap(in_strides[d0], in_strides[d1]);
  const Shape out_strides = contiguous_strides(os);
  dispatch(x.dtype(), [&]<class T>() {
    const T* px = cdata<T>(x);
    T* po = mdata<T>(out);
    std::int64_t o = 0;
    for_each_row(os, in_strides, out_strides, [&](std::int64_t oi, std::int64_t, std::int64_t count, std::int64_t ii, std::int64_t) {
      if (ii == 1) {
        std::copy_n(px + oi, count, po + o);
      } else {
        for (std::int64_t j = 0; j < count; ++j) po[o + j] = px[oi + j * ii];
      }
      o += count;
    });
  });
  return out;
}

Tensor scatter_add_raw(const Tensor& src, int dim, const Index& index, const Shape& out_shape) {
  Tensor out = make_tensor(out_shape, src.dtype());
  const Axes oa = split_axes(out_shape, dim);
  const Axes ia = split_axes(index.shape, dim);
  dispatch(src.dtype(), [&]<class T>() {
    const T* ps = cdata<T>(src);
    T* po = mdata<T>(out);
    for (std::int64_t o = 0; o < ia.outer; ++o) {
      for (std::int64_t e = 0; e < ia.extent; ++e) {
        for (std::int64_t i = 0; i < ia.inner; ++i) {
          const std::int64_t at = (o * ia.extent + e) * ia.inner + i;
          po[(o * oa.extent + index.values[at]) * oa.inner + i] += ps[at];
        }
      }
    }
  });
  return out;
}

Tensor slice_scatter_raw(const Tensor& g, const Shape& full_shape, int dim, std::int64_t start) {
  Tensor out = make_tensor(full_shape, g.dtype());
  const Axes oa = split_axes(full_shape, dim);
  const Axes ga = split_axes(g.shape(), dim);
  dispatch(g.dtype(), [&]<class T>() {
    const T* pg = cdata<T>(g);
    T* po = mdata<T>(out);
    const std::int64_t chunk = ga.extent * ga.inner;
    for (std::int64_t o = 0; o < ga.outer; ++o) {
      std::copy_n(pg + o * chunk, chunk, po + (o * oa.extent + start) * oa.inner);
    }
  });
  return out;
}

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// 64-byte vector; on targets without 512-bit registers the compiler splits it.
template <class T>
struct Lanes {
  using type __attribute__((vector_size(64))) = T;
  static constexpr int count = 64 / sizeof(T);
};

// R rows x V vectors of C = A * B; every output element is the same k-ordered
// multiply-add chain no matter which block or row position it falls in, so
// identical rows of A give bit-identical rows of C.
template <class T, int R, int V>
inline void gemm_block(const T* __restrict a, std::int64_t lda, const T* __restrict b, std::int64_t ldb,
                       T* __restrict c, std::int64_t ldc, std::int64_t k) {
  using vec = typename Lanes<T>::type;
  constexpr int L = Lanes<T>::count;
  vec acc[R][V];
  for (int r = 0; r < R; ++r) {
    for (int q = 0; q < V; ++q) acc[r][q] = vec{};
  }
  for (std::int64_t p = 0; p < k; ++p) {
    vec bv[V];
    for (int q = 0; q < V; ++q) std::memcpy(&bv[q], b + p * ldb + q * L, sizeof(vec));
    for (int r = 0; r < R; ++r) {
      const T s = a[r * lda + p];
      for (int q = 0; q < V; ++q) acc[r][q] += s * bv[q];
    }
  }
  for (int r = 0; r < R; ++r) {
    for (int q = 0; q < V; ++q) std::memcpy(c + r * ldc + q * L, &acc[r][q], sizeof(vec));
  }
}

// Fewer than L trailing columns, zero-padded into one vector.
template <class T, int R>
inline void gemm_tail(const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T* c, std::int64_t ldc,
                      std::int64_t k, std::int64_t width) {
  using vec = typename Lanes<T>::type;
  constexpr int L = Lanes<T>::count;
  vec acc[R];
  for (int r = 0; r < R; ++r) acc[r] = vec{};
  for (std::int64_t p = 0; p < k; ++p) {
    vec bv{};
    std::memcpy(&bv, b + p * ldb, sizeof(T) * width);
    for (int r = 0; r < R; ++r) acc[r] += a[r * lda + p] * bv;
  }
  for (int r = 0; r < R; ++r) {
    T tmp[L];
    std::memcpy(tmp, &acc[r], sizeof(vec));
    std::memcpy(c + r * ldc, tmp, sizeof(T) * width);
  }
}

template <class T, int R>
void gemm_rows(const T* a, const T* b, T* c, std::int64_t k, std::int64_t n) {
  constexpr int L = Lanes<T>::count;
  std::int64_t j = 0;
  for (; j + 2 * L <= n; j += 2 * L) gemm_block<T, R, 2>(a, k, b + j, n, c + j, n, k);
  for (; j + L <= n; j += L) gemm_block<T, R, 1>(a, k, b + j, n, c + j, n, k);
  if (j < n) gemm_tail<T, R>(a, k, b + j, n, c + j, n, k, n - j);
}

template <class T>
void gemm(const T* a, bool ta, const T* b, bool tb, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  // a is m×k (or k×m stored when ta), b is k×n (or n×k stored when tb).
  if (!ta) {
    // Row-wise kernel: per-sample rows stay independent of batch position.
    std::vector<T> packed;
    if (tb) {
      packed.resize(static_cast<std::size_t>(k * n));
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t p = 0; p < k; ++p) packed[p * n + i] = b[i * k + p];
      }
      b = packed.data();
    }
    std::int64_t i = 0;
    for (; i + 4 <= m; i += 4) gemm_rows<T, 4>(a + i * k, b, c + i * n, k, n);
    for (; i < m; ++i) gemm_rows<T, 1>(a + i * k, b, c + i * n, k, n);
    return;
  }
  // Transposed left operand only appears in weight gradients, which reduce
  // over samples anyway; use the library kernel there.
  Eigen::Map<RowMat<T>> C(c, m, n);
  Eigen::Map<const RowMat<T>> A(a, k, m);
  Eigen::Map<const RowMat<T>> B(b, tb ? n : k, tb ? k : n);
  if (!tb) {
    C.noalias() = A.transpose() * B;
  } else {
    C.noalias() = A.transpose() * B.transpose();
  }
}

}  // namespace

Tensor matmul_raw(const Tensor& a, bool trans_a, const Tensor& b, bool trans_b) {
  if (a.ndim() < 1 || b.ndim() < 1) throw ShapeError("matmul: scalar operand");
  // Promote vectors to matrices, remember to squeeze afterwards.
  const bool a_vec = a.ndim() == 1;
  const bool b_vec = b.ndim() == 1;
  Shape as = a.shape();
  Shape bs = b.shape();
  if (a_vec) as.insert(as.begin(), 1);
  if (b_vec) bs.push_back(1);
  const std::int64_t m = trans_a ? as[as.size() - 1] : as[as.size() - 2];
  const std::int64_t k = trans_a ? as[as.size() - 2] : as[as.size() - 1];
  const std::int64_t kb = trans_b ? bs[bs.size() - 1] : bs[bs.size() - 2];
  const std::int64_t n = trans_b ? bs[bs.size() - 2] : bs[bs.size() - 1];
  if (k != kb) {
    throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const Shape abatch(as.begin(), as.end() - 2);
  const Shape bbatch(bs.begin(), bs.end() - 2);
  const Shape batch = broadcast_shapes(abatch, bbatch);
  Shape os = batch;
  if (!a_vec) os.push_back(m);
  if (!b_vec) os.push_back(n);
  Tensor out = make_tensor(os, a.dtype());
  const std::int64_t nb = numel_of(batch);
  if (nb == 0 || m == 0 || n == 0) return out;

  dispatch(a.dtype(), [&]<class T>() {
    const T* pa = cdata<T>(a);
    const T* pb = cdata<T>(b);
    T* po = mdata<T>(out);
    if (bbatch.empty() && !trans_a) {
      // Shared right operand: collapse all batch rows into one product.
      gemm(pa, false, pb, trans_b, po, numel_of(abatch) * m, k, n);
      return;
    }
    const Shape sa = broadcast_strides(abatch, batch);
    const Shape sb = broadcast_strides(bbatch, batch);
    const std::int64_t amat = m * k;
    const std::int64_t bmat = k * n;
    std::int64_t o = 0;
    if (batch.empty()) {
      gemm(pa, trans_a, pb, trans_b, po, m, k, n);
      return;
    }
    for_each_row(batch, sa, sb, [&](std::int64_t oa, std::int64_t ob, std::int64_t count, std::int64_t ia, std::int64_t ib) {
      for (std::int64_t j = 0; j < count; ++j) {
        gemm(pa + (oa + j * ia) * amat, trans_a, pb + (ob + j * ib) * bmat, trans_b, po + (o + j) * m * n, m, k, n);
      }
      o += count;
    });
  });
  return out;
}

}  // namespace detail
}  // namespace patchrot
