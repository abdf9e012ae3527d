#pragma once

#include <Eigen/Dense>
#include <cassert>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <utility>

#include "dynser/common.hpp"

namespace dynser {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline std::vector<std::int64_t> row_major_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) {
    st[i] = st[i + 1] * s[i + 1];
  }
  return st;
}

// Dense row-major double tensor with optional gradient buffer. Values are
// immutable after an op produces them; only grad is written later.
class Tensor {
 public:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a backward pass touches it
    bool requires_grad = false;
  };

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), 0.0, requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), 1.0, requires_grad);
  }
  static Tensor filled(Shape shape, double value, bool requires_grad = false) {
    auto impl = std::make_shared<Impl>();
    validate_shape(shape);
    impl->shape = std::move(shape);
    impl->data.assign(shape_numel(impl->shape), value);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }
  static Tensor scalar(double value, bool requires_grad = false) {
    return filled({1}, value, requires_grad);
  }
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false) {
    validate_shape(shape);
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
      throw DimensionError("tensor: shape " + shape_str(shape) + " expects " +
                           std::to_string(shape_numel(shape)) +
                           " values, got " + std::to_string(data.size()));
    }
    auto impl = std::make_shared<Impl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }
  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng,
                        bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.impl_->data) v = rng.uniform(lo, hi);
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int dim() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t dim_size(int i) const { return impl_->shape[i]; }
  std::int64_t size() const {
    return static_cast<std::int64_t>(impl_->data.size());
  }

  double* data() { return impl_->data.data(); }
  const double* data() const { return impl_->data.data(); }
  std::vector<double>& values() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  double item() const {
    if (size() != 1) {
      throw ProtocolError("item(): tensor has " + std::to_string(size()) +
                          " elements, expected 1");
    }
    return impl_->data[0];
  }

  double& at(std::initializer_list<std::int64_t> idx) {
    return impl_->data[flat_index(idx)];
  }
  double at(std::initializer_list<std::int64_t> idx) const {
    return impl_->data[flat_index(idx)];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

  bool has_grad() const { return defined() && !impl_->grad.empty(); }
  const std::vector<double>& grad() const {
    if (!has_grad()) {
      throw ProtocolError("grad(): no gradient has been computed");
    }
    return impl_->grad;
  }
  std::vector<double>& grad_mutable() { return impl_->grad; }

  // Deep copy of values; no graph history, grad not copied.
  Tensor clone() const {
    return from_data(impl_->shape, impl_->data, impl_->requires_grad);
  }

  const std::shared_ptr<Impl>& impl() const { return impl_; }

 private:
  static void validate_shape(const Shape& shape) {
    for (auto d : shape) {
      if (d <= 0) {
        throw DimensionError("tensor: non-positive dimension in " +
                             shape_str(shape));
      }
    }
  }

  std::int64_t flat_index(std::initializer_list<std::int64_t> idx) const {
    const Shape& s = impl_->shape;
    if (idx.size() != s.size()) {
      throw DimensionError("at(): rank mismatch");
    }
    std::int64_t flat = 0;
    std::size_t i = 0;
    for (auto v : idx) {
      assert(v >= 0 && v < s[i]);
      flat = flat * s[i] + v;
      ++i;
    }
    return flat;
  }

  std::shared_ptr<Impl> impl_;
};

using TensorImplPtr = std::shared_ptr<Tensor::Impl>;

inline void ensure_zero_grad(const TensorImplPtr& impl) {
  impl->grad.assign(impl->data.size(), 0.0);
}

// Eager tape. Ops executed while a Tape is active (and touching at least one
// requires-grad tensor) append a node; creation order is topological order.
class Tape {
 public:
  Tape() : prev_(active_) { active_ = this; }
  ~Tape() { active_ = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(TensorImplPtr out, std::vector<TensorImplPtr> inputs,
              std::function<void()> backward_fn) {
    nodes_.push_back(
        Node{std::move(out), std::move(inputs), std::move(backward_fn)});
  }

  std::size_t node_count() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and sweeps the nodes once in reverse order.
  // Grads of every tensor touched by this tape are (re)computed from scratch;
  // leaves not reachable from the loss end up with all-zero grads.
  void backward(const Tensor& loss) {
    if (loss.size() != 1) {
      throw ProtocolError("backward: loss must be scalar, got shape " +
                          shape_str(loss.shape()));
    }
    bool on_tape = false;
    for (const auto& n : nodes_) {
      if (n.out == loss.impl()) {
        on_tape = true;
        break;
      }
    }
    if (!on_tape) {
      throw ProtocolError("backward: loss was not recorded on this tape");
    }
    for (const auto& n : nodes_) {
      ensure_zero_grad(n.out);
      for (const auto& in : n.inputs) ensure_zero_grad(in);
    }
    loss.impl()->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      it->fn();
    }
  }

 private:
  struct Node {
    TensorImplPtr out;
    std::vector<TensorImplPtr> inputs;
    std::function<void()> fn;
  };
  std::vector<Node> nodes_;
  Tape* prev_ = nullptr;
  static thread_local Tape* active_;
};

inline thread_local Tape* Tape::active_ = nullptr;

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

inline bool should_record(std::initializer_list<const Tensor*> ts) {
  return Tape::active() != nullptr && any_requires_grad(ts);
}

inline void check_finite(const Tensor& t, const char* op) {
#ifndef NDEBUG
  for (double v : t.values()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite value in output");
    }
  }
#else
  (void)t;
  (void)op;
#endif
}

using MatRM =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

// Right-aligned numpy-style broadcast of b onto a (and vice versa).
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  std::size_t n = std::max(a.size(), b.size());
  Shape out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::int64_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    std::int64_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a) +
                           " and " + shape_str(b) +
                           " are not broadcast-compatible at axis " +
                           std::to_string(i));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Walks the output index space of `out_shape`, handing the callback flat
// offsets into out, a and b (a/b strides zeroed on broadcast axes).
template <class F>
void broadcast_walk(const Shape& out_shape, const Shape& a_shape,
                    const Shape& b_shape, F&& f) {
  const std::size_t n = out_shape.size();
  std::vector<std::int64_t> sa(n, 0), sb(n, 0);
  {
    auto ra = row_major_strides(a_shape);
    auto rb = row_major_strides(b_shape);
    for (std::size_t i = 0; i < a_shape.size(); ++i) {
      std::size_t oi = i + (n - a_shape.size());
      sa[oi] = a_shape[i] == 1 ? 0 : ra[i];
    }
    for (std::size_t i = 0; i < b_shape.size(); ++i) {
      std::size_t oi = i + (n - b_shape.size());
      sb[oi] = b_shape[i] == 1 ? 0 : rb[i];
    }
  }
  std::vector<std::int64_t> ctr(n, 0);
  std::int64_t total = shape_numel(out_shape);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t io = 0; io < total; ++io) {
    f(io, ia, ib);
    for (int d = static_cast<int>(n) - 1; d >= 0; --d) {
      ++ctr[d];
      ia += sa[d];
      ib += sb[d];
      if (ctr[d] < out_shape[d]) break;
      ia -= sa[d] * out_shape[d];
      ib -= sb[d] * out_shape[d];
      ctr[d] = 0;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

enum class Act { kSigmoid, kTanh, kRelu };

inline Tensor activation(const Tensor& x, Act kind) {
  Tensor y = Tensor::zeros(x.shape());
  const std::int64_t n = x.size();
  const double* xd = x.data();
  double* yd = y.data();
  switch (kind) {
    case Act::kSigmoid:
      for (std::int64_t i = 0; i < n; ++i) yd[i] = 1.0 / (1.0 + std::exp(-xd[i]));
      break;
    case Act::kTanh:
      for (std::int64_t i = 0; i < n; ++i) yd[i] = std::tanh(xd[i]);
      break;
    case Act::kRelu:
      for (std::int64_t i = 0; i < n; ++i) yd[i] = xd[i] > 0.0 ? xd[i] : 0.0;
      break;
  }
  detail::check_finite(y, "activation");
  if (detail::should_record({&x})) {
    y.set_requires_grad(true);
    auto xi = x.impl(), yi = y.impl();
    Tape::active()->record(yi, {xi}, [xi, yi, kind, n]() {
      const double* g = yi->grad.data();
      const double* yv = yi->data.data();
      const double* xv = xi->data.data();
      double* gx = xi->grad.data();
      switch (kind) {
        case Act::kSigmoid:
          for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * yv[i] * (1.0 - yv[i]);
          break;
        case Act::kTanh:
          for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * (1.0 - yv[i] * yv[i]);
          break;
        case Act::kRelu:
          for (std::int64_t i = 0; i < n; ++i) gx[i] += xv[i] > 0.0 ? g[i] : 0.0;
          break;
      }
    });
  }
  return y;
}

inline Tensor sigmoid(const Tensor& x) { return activation(x, Act::kSigmoid); }
inline Tensor tanh_op(const Tensor& x) { return activation(x, Act::kTanh); }
inline Tensor relu(const Tensor& x) { return activation(x, Act::kRelu); }

enum class Ew { kMul, kAdd };

// Elementwise add/mul with numpy-style broadcasting; gradients sum over the
// broadcast axes.
inline Tensor elementwise(const Tensor& a, const Tensor& b, Ew op) {
  const char* name = op == Ew::kMul ? "mul" : "add";
  Shape out_shape = detail::broadcast_shape(a.shape(), b.shape(), name);
  Tensor y = Tensor::zeros(out_shape);
  const double* ad = a.data();
  const double* bd = b.data();
  double* yd = y.data();
  if (a.shape() == b.shape()) {
    const std::int64_t n = y.size();
    if (op == Ew::kMul) {
      for (std::int64_t i = 0; i < n; ++i) yd[i] = ad[i] * bd[i];
    } else {
      for (std::int64_t i = 0; i < n; ++i) yd[i] = ad[i] + bd[i];
    }
  } else if (op == Ew::kMul) {
    detail::broadcast_walk(out_shape, a.shape(), b.shape(),
                           [&](std::int64_t io, std::int64_t ia,
                               std::int64_t ib) { yd[io] = ad[ia] * bd[ib]; });
  } else {
    detail::broadcast_walk(out_shape, a.shape(), b.shape(),
                           [&](std::int64_t io, std::int64_t ia,
                               std::int64_t ib) { yd[io] = ad[ia] + bd[ib]; });
  }
  detail::check_finite(y, name);
  if (detail::should_record({&a, &b})) {
    y.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    Shape os = out_shape;
    Tape::active()->record(yi, {ai, bi}, [ai, bi, yi, op, os]() {
      const double* g = yi->grad.data();
      double* ga = ai->grad.data();
      double* gb = bi->grad.data();
      const double* av = ai->data.data();
      const double* bv = bi->data.data();
      if (op == Ew::kMul) {
        detail::broadcast_walk(os, ai->shape, bi->shape,
                               [&](std::int64_t io, std::int64_t ia,
                                   std::int64_t ib) {
                                 ga[ia] += g[io] * bv[ib];
                                 gb[ib] += g[io] * av[ia];
                               });
      } else {
        detail::broadcast_walk(os, ai->shape, bi->shape,
                               [&](std::int64_t io, std::int64_t ia,
                                   std::int64_t ib) {
                                 ga[ia] += g[io];
                                 gb[ib] += g[io];
                               });
      }
    });
  }
  return y;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise(a, b, Ew::kMul);
}
inline Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise(a, b, Ew::kAdd);
}

// y = scale * x + shift, elementwise with scalars.
inline Tensor affine(const Tensor& x, double scale, double shift) {
  Tensor y = Tensor::zeros(x.shape());
  const std::int64_t n = x.size();
  const double* xd = x.data();
  double* yd = y.data();
  for (std::int64_t i = 0; i < n; ++i) yd[i] = scale * xd[i] + shift;
  detail::check_finite(y, "affine");
  if (detail::should_record({&x})) {
    y.set_requires_grad(true);
    auto xi = x.impl(), yi = y.impl();
    Tape::active()->record(yi, {xi}, [xi, yi, scale, n]() {
      const double* g = yi->grad.data();
      double* gx = xi->grad.data();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += scale * g[i];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

// y = x W^T + b over the last axis: x [..., in], W [out, in], b [out].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.dim() != 2) {
    throw DimensionError("linear: weight must be 2-d, got " +
                         shape_str(w.shape()));
  }
  const std::int64_t in = w.dim_size(1);
  const std::int64_t out = w.dim_size(0);
  if (x.dim() < 1 || x.shape().back() != in) {
    throw DimensionError("linear: x last axis " +
                         std::to_string(x.shape().back()) +
                         " does not match weight input axis " +
                         std::to_string(in));
  }
  if (b.defined() && (b.dim() != 1 || b.dim_size(0) != out)) {
    throw DimensionError("linear: bias shape " + shape_str(b.shape()) +
                         " does not match weight output axis " +
                         std::to_string(out));
  }
  const std::int64_t rows = x.size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out;
  Tensor y = Tensor::zeros(out_shape);

  detail::CMapRM xm(x.data(), rows, in);
  detail::CMapRM wm(w.data(), out, in);
  detail::MapRM ym(y.data(), rows, out);
  ym.noalias() = xm * wm.transpose();
  if (b.defined()) {
    Eigen::Map<const Eigen::VectorXd> bv(b.data(), out);
    ym.rowwise() += bv.transpose();
  }
  detail::check_finite(y, "linear");

  if (detail::should_record({&x, &w, &b})) {
    y.set_requires_grad(true);
    auto xi = x.impl(), wi = w.impl(), yi = y.impl();
    auto bi = b.defined() ? b.impl() : nullptr;
    std::vector<TensorImplPtr> inputs{xi, wi};
    if (bi) inputs.push_back(bi);
    Tape::active()->record(yi, std::move(inputs),
                           [xi, wi, bi, yi, rows, in, out]() {
      detail::CMapRM g(yi->grad.data(), rows, out);
      detail::CMapRM xm(xi->data.data(), rows, in);
      detail::CMapRM wm(wi->data.data(), out, in);
      if (xi->requires_grad) {
        detail::MapRM gx(xi->grad.data(), rows, in);
        gx.noalias() += g * wm;
      }
      if (wi->requires_grad) {
        detail::MapRM gw(wi->grad.data(), out, in);
        gw.noalias() += g.transpose() * xm;
      }
      if (bi && bi->requires_grad) {
        Eigen::Map<Eigen::VectorXd> gb(bi->grad.data(), out);
        gb.noalias() += g.colwise().sum().transpose();
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) +
                         " as " + shape_str(new_shape));
  }
  Tensor y = Tensor::from_data(std::move(new_shape), x.values());
  if (detail::should_record({&x})) {
    y.set_requires_grad(true);
    auto xi = x.impl(), yi = y.impl();
    Tape::active()->record(yi, {xi}, [xi, yi]() {
      const std::int64_t n = static_cast<std::int64_t>(xi->grad.size());
      for (std::int64_t i = 0; i < n; ++i) xi->grad[i] += yi->grad[i];
    });
  }
  return y;
}

inline Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  const int n = x.dim();
  if (static_cast<int>(axes.size()) != n) {
    throw DimensionError("permute: need " + std::to_string(n) + " axes");
  }
  std::vector<bool> seen(n, false);
  Shape out_shape(n);
  for (int i = 0; i < n; ++i) {
    if (axes[i] < 0 || axes[i] >= n || seen[axes[i]]) {
      throw ParameterError("permute: invalid axis list");
    }
    seen[axes[i]] = true;
    out_shape[i] = x.dim_size(axes[i]);
  }
  Tensor y = Tensor::zeros(out_shape);
  auto xstr = row_major_strides(x.shape());
  // stride of out axis i in the input layout
  std::vector<std::int64_t> map_stride(n);
  for (int i = 0; i < n; ++i) map_stride[i] = xstr[axes[i]];
  const double* xd = x.data();
  double* yd = y.data();
  std::vector<std::int64_t> ctr(n, 0);
  std::int64_t ix = 0;
  const std::int64_t total = y.size();
  for (std::int64_t io = 0; io < total; ++io) {
    yd[io] = xd[ix];
    for (int d = n - 1; d >= 0; --d) {
      ++ctr[d];
      ix += map_stride[d];
      if (ctr[d] < out_shape[d]) break;
      ix -= map_stride[d] * out_shape[d];
      ctr[d] = 0;
    }
  }
  if (detail::should_record({&x})) {
    y.set_requires_grad(true);
    auto xi = x.impl(), yi = y.impl();
    Shape os = out_shape;
    Tape::active()->record(yi, {xi}, [xi, yi, os, map_stride, n]() {
      std::vector<std::int64_t> c(n, 0);
      std::int64_t ix2 = 0;
      const std::int64_t total2 = static_cast<std::int64_t>(yi->grad.size());
      for (std::int64_t io = 0; io < total2; ++io) {
        xi->grad[ix2] += yi->grad[io];
        for (int d = n - 1; d >= 0; --d) {
          ++c[d];
          ix2 += map_stride[d];
          if (c[d] < os[d]) break;
          ix2 -= map_stride[d] * os[d];
          c[d] = 0;
        }
      }
    });
  }
  return y;
}

// Contiguous slice [start, start+len) along one axis.
inline Tensor narrow(const Tensor& x, int axis, std::int64_t start,
                     std::int64_t len) {
  if (axis < 0 || axis >= x.dim()) {
    throw ParameterError("narrow: axis out of range");
  }
  if (start < 0 || len < 1 || start + len > x.dim_size(axis)) {
    throw ParameterError("narrow: slice [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") out of bounds for axis size " +
                         std::to_string(x.dim_size(axis)));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  Tensor y = Tensor::zeros(out_shape);
  auto xstr = row_major_strides(x.shape());
  const std::int64_t outer = std::accumulate(
      x.shape().begin(), x.shape().begin() + axis, std::int64_t{1},
      std::multiplies<>());
  const std::int64_t inner = xstr[axis];
  const std::int64_t x_block = x.dim_size(axis) * inner;
  const std::int64_t y_block = len * inner;
  const double* xd = x.data();
  double* yd = y.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    std::memcpy(yd + o * y_block, xd + o * x_block + start * inner,
                sizeof(double) * y_block);
  }
  if (detail::should_record({&x})) {
    y.set_requires_grad(true);
    auto xi = x.impl(), yi = y.impl();
    Tape::active()->record(yi, {xi},
                           [xi, yi, outer, inner, x_block, y_block, start]() {
      for (std::int64_t o = 0; o < outer; ++o) {
        double* gx = xi->grad.data() + o * x_block + start * inner;
        const double* gy = yi->grad.data() + o * y_block;
        for (std::int64_t i = 0; i < y_block; ++i) gx[i] += gy[i];
      }
    });
  }
  return y;
}

// Reverses the order of slices along one axis.
inline Tensor flip(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.dim()) {
    throw ParameterError("flip: axis out of range");
  }
  const std::int64_t k = x.dim_size(axis);
  auto xstr = row_major_strides(x.shape());
  const std::int64_t outer = std::accumulate(
      x.shape().begin(), x.shape().begin() + axis, std::int64_t{1},
      std::multiplies<>());
  const std::int64_t inner = xstr[axis];
  Tensor y = Tensor::zeros(x.shape());
  const double* xd = x.data();
  double* yd = y.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t j = 0; j < k; ++j) {
      std::memcpy(yd + (o * k + j) * inner, xd + (o * k + (k - 1 - j)) * inner,
                  sizeof(double) * inner);
    }
  }
  if (detail::should_record({&x})) {
    y.set_requires_grad(true);
    auto xi = x.impl(), yi = y.impl();
    Tape::active()->record(yi, {xi}, [xi, yi, outer, inner, k]() {
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t j = 0; j < k; ++j) {
          double* gx = xi->grad.data() + (o * k + (k - 1 - j)) * inner;
          const double* gy = yi->grad.data() + (o * k + j) * inner;
          for (std::int64_t i = 0; i < inner; ++i) gx[i] += gy[i];
        }
      }
    });
  }
  return y;
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ParameterError("concat: no inputs");
  const int n = parts[0].dim();
  if (axis < 0 || axis >= n) throw ParameterError("concat: axis out of range");
  Shape out_shape = parts[0].shape();
  std::int64_t axis_total = 0;
  for (const Tensor& p : parts) {
    if (p.dim() != n) throw DimensionError("concat: rank mismatch");
    for (int d = 0; d < n; ++d) {
      if (d != axis && p.dim_size(d) != out_shape[d]) {
        throw DimensionError("concat: shape mismatch at axis " +
                             std::to_string(d) + ": " + shape_str(p.shape()) +
                             " vs " + shape_str(out_shape));
      }
    }
    axis_total += p.dim_size(axis);
  }
  out_shape[axis] = axis_total;
  Tensor y = Tensor::zeros(out_shape);
  auto ystr = row_major_strides(out_shape);
  const std::int64_t outer = std::accumulate(
      out_shape.begin(), out_shape.begin() + axis, std::int64_t{1},
      std::multiplies<>());
  const std::int64_t inner = ystr[axis];
  const std::int64_t y_block = axis_total * inner;
  double* yd = y.data();
  std::int64_t axis_off = 0;
  std::vector<std::int64_t> offsets;
  for (const Tensor& p : parts) {
    const std::int64_t p_block = p.dim_size(axis) * inner;
    const double* pd = p.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::memcpy(yd + o * y_block + axis_off * inner, pd + o * p_block,
                  sizeof(double) * p_block);
    }
    offsets.push_back(axis_off);
    axis_off += p.dim_size(axis);
  }
  std::vector<const Tensor*> refs;
  for (const Tensor& p : parts) refs.push_back(&p);
  bool rec = Tape::active() != nullptr &&
             std::any_of(parts.begin(), parts.end(),
                         [](const Tensor& t) { return t.requires_grad(); });
  if (rec) {
    y.set_requires_grad(true);
    std::vector<TensorImplPtr> inputs;
    for (const Tensor& p : parts) inputs.push_back(p.impl());
    auto yi = y.impl();
    std::vector<std::int64_t> blocks;
    for (const Tensor& p : parts) blocks.push_back(p.dim_size(axis) * inner);
    Tape::active()->record(yi, inputs,
                           [inputs, yi, offsets, blocks, outer, inner,
                            y_block]() {
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        double* gp = inputs[k]->grad.data();
        const double* gy = yi->grad.data();
        for (std::int64_t o = 0; o < outer; ++o) {
          const double* src = gy + o * y_block + offsets[k] * inner;
          double* dst = gp + o * blocks[k];
          for (std::int64_t i = 0; i < blocks[k]; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Tensor y = Tensor::scalar(acc);
  if (detail::should_record({&x})) {
    y.set_requires_grad(true);
    auto xi = x.impl(), yi = y.impl();
    Tape::active()->record(yi, {xi}, [xi, yi]() {
      const double g = yi->grad[0];
      for (auto& v : xi->grad) v += g;
    });
  }
  return y;
}

inline Tensor mean(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.size());
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Tensor y = Tensor::scalar(acc * inv);
  if (detail::should_record({&x})) {
    y.set_requires_grad(true);
    auto xi = x.impl(), yi = y.impl();
    Tape::active()->record(yi, {xi}, [xi, yi, inv]() {
      const double g = yi->grad[0] * inv;
      for (auto& v : xi->grad) v += g;
    });
  }
  return y;
}

enum class Reduce { kSum, kMean, kMax };

// Reduce one axis, keeping it as size 1. Max routes gradient to the first
// (lowest index) maximal element along the axis.
inline Tensor reduce_axis(const Tensor& x, int axis, Reduce op) {
  if (axis < 0 || axis >= x.dim()) {
    throw ParameterError("reduce_axis: axis out of range");
  }
  Shape out_shape = x.shape();
  const std::int64_t k = out_shape[axis];
  out_shape[axis] = 1;
  Tensor y = Tensor::zeros(out_shape);
  auto xstr = row_major_strides(x.shape());
  const std::int64_t outer = std::accumulate(
      x.shape().begin(), x.shape().begin() + axis, std::int64_t{1},
      std::multiplies<>());
  const std::int64_t inner = xstr[axis];
  const double* xd = x.data();
  double* yd = y.data();
  std::vector<std::int64_t> argmax;
  if (op == Reduce::kMax) argmax.resize(y.size());
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const double* base = xd + o * k * inner + i;
      const std::int64_t yo = o * inner + i;
      if (op == Reduce::kMax) {
        double best = base[0];
        std::int64_t bj = 0;
        for (std::int64_t j = 1; j < k; ++j) {
          if (base[j * inner] > best) {
            best = base[j * inner];
            bj = j;
          }
        }
        yd[yo] = best;
        argmax[yo] = bj;
      } else {
        double acc = 0.0;
        for (std::int64_t j = 0; j < k; ++j) acc += base[j * inner];
        yd[yo] = op == Reduce::kMean ? acc / static_cast<double>(k) : acc;
      }
    }
  }
  if (detail::should_record({&x})) {
    y.set_requires_grad(true);
    auto xi = x.impl(), yi = y.impl();
    Tape::active()->record(yi, {xi},
                           [xi, yi, outer, inner, k, op, argmax]() {
      const double* gy = yi->grad.data();
      double* gx = xi->grad.data();
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t i = 0; i < inner; ++i) {
          const std::int64_t yo = o * inner + i;
          double* base = gx + o * k * inner + i;
          switch (op) {
            case Reduce::kSum:
              for (std::int64_t j = 0; j < k; ++j) base[j * inner] += gy[yo];
              break;
            case Reduce::kMean:
              for (std::int64_t j = 0; j < k; ++j) {
                base[j * inner] += gy[yo] / static_cast<double>(k);
              }
              break;
            case Reduce::kMax:
              base[argmax[yo] * inner] += gy[yo];
              break;
          }
        }
      }
    });
  }
  return y;
}

// Softmax over the last axis, log-sum-exp stabilized.
inline Tensor softmax(const Tensor& x) {
  const std::int64_t k = x.shape().back();
  const std::int64_t rows = x.size() / k;
  Tensor y = Tensor::zeros(x.shape());
  const double* xd = x.data();
  double* yd = y.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = xd + r * k;
    double* yr = yd + r * k;
    double m = xr[0];
    for (std::int64_t i = 1; i < k; ++i) m = std::max(m, xr[i]);
    double z = 0.0;
    for (std::int64_t i = 0; i < k; ++i) {
      yr[i] = std::exp(xr[i] - m);
      z += yr[i];
    }
    for (std::int64_t i = 0; i < k; ++i) yr[i] /= z;
  }
  detail::check_finite(y, "softmax");
  if (detail::should_record({&x})) {
    y.set_requires_grad(true);
    auto xi = x.impl(), yi = y.impl();
    Tape::active()->record(yi, {xi}, [xi, yi, rows, k]() {
      const double* g = yi->grad.data();
      const double* yv = yi->data.data();
      double* gx = xi->grad.data();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* gr = g + r * k;
        const double* yr = yv + r * k;
        double dot = 0.0;
        for (std::int64_t i = 0; i < k; ++i) dot += gr[i] * yr[i];
        for (std::int64_t i = 0; i < k; ++i) {
          gx[r * k + i] += yr[i] * (gr[i] - dot);
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace detail {

struct ConvDims {
  std::int64_t batch, cin, h, w;      // input, h==1 for rank 1
  std::int64_t cout, kh, kw;          // kernel
  std::int64_t sh, sw, ph, pw;        // stride / zero padding
  std::int64_t oh, ow;                // output spatial dims
  bool batched_input;                 // caller passed a batch axis
  bool per_example_kernel;            // kernel has a leading batch axis
};

inline void im2col(const double* x, const ConvDims& d, double* cols) {
  // cols is column-major (CKK x OH*OW): one output position per column.
  const std::int64_t ckk = d.cin * d.kh * d.kw;
  for (std::int64_t oh = 0; oh < d.oh; ++oh) {
    for (std::int64_t ow = 0; ow < d.ow; ++ow) {
      double* col = cols + (oh * d.ow + ow) * ckk;
      const std::int64_t ih0 = oh * d.sh - d.ph;
      const std::int64_t iw0 = ow * d.sw - d.pw;
      std::int64_t r = 0;
      for (std::int64_t c = 0; c < d.cin; ++c) {
        for (std::int64_t kh = 0; kh < d.kh; ++kh) {
          const std::int64_t ih = ih0 + kh;
          const double* row = x + (c * d.h + ih) * d.w;
          for (std::int64_t kw = 0; kw < d.kw; ++kw) {
            const std::int64_t iw = iw0 + kw;
            col[r++] = (ih >= 0 && ih < d.h && iw >= 0 && iw < d.w)
                           ? row[iw]
                           : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* cols, const ConvDims& d, double* gx) {
  const std::int64_t ckk = d.cin * d.kh * d.kw;
  for (std::int64_t oh = 0; oh < d.oh; ++oh) {
    for (std::int64_t ow = 0; ow < d.ow; ++ow) {
      const double* col = cols + (oh * d.ow + ow) * ckk;
      const std::int64_t ih0 = oh * d.sh - d.ph;
      const std::int64_t iw0 = ow * d.sw - d.pw;
      std::int64_t r = 0;
      for (std::int64_t c = 0; c < d.cin; ++c) {
        for (std::int64_t kh = 0; kh < d.kh; ++kh) {
          const std::int64_t ih = ih0 + kh;
          double* row = gx + (c * d.h + ih) * d.w;
          for (std::int64_t kw = 0; kw < d.kw; ++kw, ++r) {
            const std::int64_t iw = iw0 + kw;
            if (ih >= 0 && ih < d.h && iw >= 0 && iw < d.w) row[iw] += col[r];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation (no kernel flip) with zero padding.
//   rank 2: x [C,H,W] or [B,C,H,W]; kernel [O,C,KH,KW] or [B,O,C,KH,KW]
//   rank 1: x [C,L]   or [B,C,L];   kernel [O,C,K]     or [B,O,C,K]
// A kernel with the extra leading batch axis applies a distinct kernel to
// each example (used by dynamic convolutions). Bias is [O] or undefined.
inline Tensor convolution(const Tensor& x, const Tensor& kernel,
                          const Tensor& bias, std::int64_t stride,
                          std::int64_t padding, int rank) {
  if (rank != 1 && rank != 2) {
    throw ParameterError("convolution: rank must be 1 or 2");
  }
  if (stride < 1) throw ParameterError("convolution: stride must be >= 1");
  if (padding < 0) throw ParameterError("convolution: padding must be >= 0");
  const int spatial = rank;
  const int base_x_dim = 1 + spatial;        // C + spatial
  const int base_k_dim = 2 + spatial;        // O, C + spatial
  detail::ConvDims d{};
  d.batched_input = x.dim() == base_x_dim + 1;
  if (!d.batched_input && x.dim() != base_x_dim) {
    throw DimensionError("convolution: rank " + std::to_string(rank) +
                         " expects x of " + std::to_string(base_x_dim) +
                         " or " + std::to_string(base_x_dim + 1) +
                         " dims, got " + shape_str(x.shape()));
  }
  d.per_example_kernel = kernel.dim() == base_k_dim + 1;
  if (!d.per_example_kernel && kernel.dim() != base_k_dim) {
    throw DimensionError("convolution: rank " + std::to_string(rank) +
                         " expects kernel of " + std::to_string(base_k_dim) +
                         " or " + std::to_string(base_k_dim + 1) +
                         " dims, got " + shape_str(kernel.shape()));
  }
  if (d.per_example_kernel && !d.batched_input) {
    throw DimensionError("convolution: per-example kernel needs batched x");
  }
  const int xb = d.batched_input ? 1 : 0;
  const int kb = d.per_example_kernel ? 1 : 0;
  d.batch = d.batched_input ? x.dim_size(0) : 1;
  d.cin = x.dim_size(xb);
  d.h = rank == 2 ? x.dim_size(xb + 1) : 1;
  d.w = x.dim_size(xb + spatial);
  d.cout = kernel.dim_size(kb);
  d.kh = rank == 2 ? kernel.dim_size(kb + 2) : 1;
  d.kw = kernel.dim_size(kb + 1 + spatial);
  if (kernel.dim_size(kb + 1) != d.cin) {
    throw DimensionError("convolution: kernel input channels " +
                         std::to_string(kernel.dim_size(kb + 1)) +
                         " do not match x channels " + std::to_string(d.cin));
  }
  if (d.per_example_kernel && kernel.dim_size(0) != d.batch) {
    throw DimensionError("convolution: kernel batch axis " +
                         std::to_string(kernel.dim_size(0)) +
                         " does not match x batch " + std::to_string(d.batch));
  }
  d.sh = rank == 2 ? stride : 1;
  d.sw = stride;
  d.ph = rank == 2 ? padding : 0;
  d.pw = padding;
  d.oh = (d.h + 2 * d.ph - d.kh) / d.sh + 1;
  d.ow = (d.w + 2 * d.pw - d.kw) / d.sw + 1;
  if (d.kh > d.h + 2 * d.ph || d.kw > d.w + 2 * d.pw || d.oh < 1 || d.ow < 1) {
    throw DimensionError("convolution: kernel " + shape_str(kernel.shape()) +
                         " larger than padded input " + shape_str(x.shape()));
  }
  if (bias.defined() && (bias.dim() != 1 || bias.dim_size(0) != d.cout)) {
    throw DimensionError("convolution: bias shape " + shape_str(bias.shape()) +
                         " does not match output channels " +
                         std::to_string(d.cout));
  }

  Shape out_shape;
  if (d.batched_input) out_shape.push_back(d.batch);
  out_shape.push_back(d.cout);
  if (rank == 2) out_shape.push_back(d.oh);
  out_shape.push_back(d.ow);
  Tensor y = Tensor::zeros(out_shape);

  const std::int64_t ckk = d.cin * d.kh * d.kw;
  const std::int64_t ohw = d.oh * d.ow;
  const std::int64_t x_stride = d.cin * d.h * d.w;
  const std::int64_t k_stride = d.cout * ckk;  // per-example kernel stride
  const std::int64_t y_stride = d.cout * ohw;

  {
    Eigen::MatrixXd cols(ckk, ohw);  // column-major
    for (std::int64_t b = 0; b < d.batch; ++b) {
      detail::im2col(x.data() + b * x_stride, d, cols.data());
      detail::CMapRM km(kernel.data() + (d.per_example_kernel ? b * k_stride : 0),
                        d.cout, ckk);
      detail::MapRM ym(y.data() + b * y_stride, d.cout, ohw);
      ym.noalias() = km * cols;
      if (bias.defined()) {
        Eigen::Map<const Eigen::VectorXd> bv(bias.data(), d.cout);
        ym.colwise() += bv;
      }
    }
  }
  detail::check_finite(y, "convolution");

  if (detail::should_record({&x, &kernel, &bias})) {
    y.set_requires_grad(true);
    auto xi = x.impl(), ki = kernel.impl(), yi = y.impl();
    auto bi = bias.defined() ? bias.impl() : nullptr;
    std::vector<TensorImplPtr> inputs{xi, ki};
    if (bi) inputs.push_back(bi);
    Tape::active()->record(yi, std::move(inputs),
                           [xi, ki, bi, yi, d, ckk, ohw, x_stride, k_stride,
                            y_stride]() {
      Eigen::MatrixXd cols(ckk, ohw);
      Eigen::MatrixXd dcols(ckk, ohw);
      for (std::int64_t b = 0; b < d.batch; ++b) {
        detail::CMapRM gy(yi->grad.data() + b * y_stride, d.cout, ohw);
        detail::CMapRM km(
            ki->data.data() + (d.per_example_kernel ? b * k_stride : 0),
            d.cout, ckk);
        if (xi->requires_grad) {
          dcols.noalias() = km.transpose() * gy;
          detail::col2im_add(dcols.data(), d, xi->grad.data() + b * x_stride);
        }
        if (ki->requires_grad) {
          detail::im2col(xi->data.data() + b * x_stride, d, cols.data());
          detail::MapRM gk(
              ki->grad.data() + (d.per_example_kernel ? b * k_stride : 0),
              d.cout, ckk);
          gk.noalias() += gy * cols.transpose();
        }
        if (bi && bi->requires_grad) {
          Eigen::Map<Eigen::VectorXd> gb(bi->grad.data(), d.cout);
          gb.noalias() += gy.rowwise().sum();
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

enum class PoolKind { kMax, kAvg };
enum class PoolScope { kWindowed, kGlobal };

// Windowed pooling uses a square window over 1 or 2 spatial dims with the
// floor output-size rule and no padding. Global pooling collapses all
// spatial dims per channel to [.., C]. Max ties route the gradient to the
// first (lowest flat index) maximal element.
inline Tensor pool(const Tensor& x, PoolKind kind, std::int64_t window,
                   std::int64_t stride, PoolScope scope) {
  const int nd = x.dim();
  if (nd < 2 || nd > 4) {
    throw DimensionError("pool: expected [C,spatial...] or [B,C,spatial...]");
  }
  if (scope == PoolScope::kGlobal) {
    // flatten spatial dims and reduce each channel fully
    const bool batched = nd >= 3;
    // heuristic-free: [C,S] => 2d unbatched; [B,C,S] / [B,C,H,W] batched;
    // [C,H,W] is 3d unbatched, distinguished by the caller's data layout --
    // we treat 3d as [B,C,S] only when pooling windowed. For global scope a
    // 3d tensor is ambiguous, so we require 2d/4d to be explicit and accept
    // 3d as [C,H,W].
    std::int64_t batch = 1, ch = 0, sp = 0;
    if (nd == 2) {
      ch = x.dim_size(0);
      sp = x.dim_size(1);
    } else if (nd == 3) {
      ch = x.dim_size(0);
      sp = x.dim_size(1) * x.dim_size(2);
    } else {
      batch = x.dim_size(0);
      ch = x.dim_size(1);
      sp = x.dim_size(2) * x.dim_size(3);
    }
    Shape out_shape = nd == 4 ? Shape{batch, ch} : Shape{ch};
    Tensor y = Tensor::zeros(out_shape);
    const double* xd = x.data();
    double* yd = y.data();
    std::vector<std::int64_t> argmax;
    if (kind == PoolKind::kMax) argmax.resize(batch * ch);
    for (std::int64_t b = 0; b < batch; ++b) {
      for (std::int64_t c = 0; c < ch; ++c) {
        const double* base = xd + (b * ch + c) * sp;
        if (kind == PoolKind::kMax) {
          double best = base[0];
          std::int64_t bj = 0;
          for (std::int64_t j = 1; j < sp; ++j) {
            if (base[j] > best) {
              best = base[j];
              bj = j;
            }
          }
          yd[b * ch + c] = best;
          argmax[b * ch + c] = bj;
        } else {
          double acc = 0.0;
          for (std::int64_t j = 0; j < sp; ++j) acc += base[j];
          yd[b * ch + c] = acc / static_cast<double>(sp);
        }
      }
    }
    if (detail::should_record({&x})) {
      y.set_requires_grad(true);
      auto xi = x.impl(), yi = y.impl();
      Tape::active()->record(yi, {xi},
                             [xi, yi, batch, ch, sp, kind, argmax]() {
        const double* gy = yi->grad.data();
        double* gx = xi->grad.data();
        for (std::int64_t b = 0; b < batch; ++b) {
          for (std::int64_t c = 0; c < ch; ++c) {
            double* base = gx + (b * ch + c) * sp;
            if (kind == PoolKind::kMax) {
              base[argmax[b * ch + c]] += gy[b * ch + c];
            } else {
              const double g = gy[b * ch + c] / static_cast<double>(sp);
              for (std::int64_t j = 0; j < sp; ++j) base[j] += g;
            }
          }
        }
      });
    }
    return y;
  }

  if (window < 1 || stride < 1) {
    throw ParameterError("pool: window and stride must be >= 1");
  }
  // windowed: [C,L], [B,C,L], [C,H,W] ambiguity resolved as [B,C,L] for 3d
  // tensors only when told so by callers; here 3d means [B,C,L] (1-d pooling)
  // and 4d means [B,C,H,W]. 2d means [C,L].
  const bool two_d = nd == 4;
  std::int64_t batch = 1, ch, h = 1, w;
  if (nd == 2) {
    ch = x.dim_size(0);
    w = x.dim_size(1);
  } else if (nd == 3) {
    batch = x.dim_size(0);
    ch = x.dim_size(1);
    w = x.dim_size(2);
  } else {
    batch = x.dim_size(0);
    ch = x.dim_size(1);
    h = x.dim_size(2);
    w = x.dim_size(3);
  }
  const std::int64_t wh = two_d ? window : 1;
  if (wh > h || window > w) {
    throw DimensionError("pool: window " + std::to_string(window) +
                         " exceeds spatial extent of " + shape_str(x.shape()));
  }
  const std::int64_t oh = two_d ? (h - window) / stride + 1 : 1;
  const std::int64_t ow = (w - window) / stride + 1;
  Shape out_shape;
  if (nd == 2) {
    out_shape = {ch, ow};
  } else if (nd == 3) {
    out_shape = {batch, ch, ow};
  } else {
    out_shape = {batch, ch, oh, ow};
  }
  Tensor y = Tensor::zeros(out_shape);
  const double* xd = x.data();
  double* yd = y.data();
  std::vector<std::int64_t> argmax;  // flat index into the channel plane
  if (kind == PoolKind::kMax) argmax.resize(y.size());
  const std::int64_t plane = h * w;
  const std::int64_t oplane = oh * ow;
  for (std::int64_t bc = 0; bc < batch * ch; ++bc) {
    const double* in = xd + bc * plane;
    double* out = yd + bc * oplane;
    for (std::int64_t i = 0; i < oh; ++i) {
      for (std::int64_t j = 0; j < ow; ++j) {
        const std::int64_t r0 = two_d ? i * stride : 0;
        const std::int64_t c0 = j * stride;
        if (kind == PoolKind::kMax) {
          double best = -std::numeric_limits<double>::infinity();
          std::int64_t bidx = 0;
          for (std::int64_t u = 0; u < wh; ++u) {
            for (std::int64_t v = 0; v < window; ++v) {
              const std::int64_t fi = (r0 + u) * w + (c0 + v);
              if (in[fi] > best) {
                best = in[fi];
                bidx = fi;
              }
            }
          }
          out[i * ow + j] = best;
          argmax[bc * oplane + i * ow + j] = bidx;
        } else {
          double acc = 0.0;
          for (std::int64_t u = 0; u < wh; ++u) {
            for (std::int64_t v = 0; v < window; ++v) {
              acc += in[(r0 + u) * w + (c0 + v)];
            }
          }
          out[i * ow + j] = acc / static_cast<double>(wh * window);
        }
      }
    }
  }
  if (detail::should_record({&x})) {
    y.set_requires_grad(true);
    auto xi = x.impl(), yi = y.impl();
    const std::int64_t bcs = batch * ch;
    Tape::active()->record(yi, {xi},
                           [xi, yi, bcs, plane, oplane, oh, ow, wh, window,
                            stride, two_d, w, kind, argmax]() {
      const double* gy = yi->grad.data();
      double* gx = xi->grad.data();
      const double inv = 1.0 / static_cast<double>(wh * window);
      for (std::int64_t bc = 0; bc < bcs; ++bc) {
        double* gin = gx + bc * plane;
        const double* gout = gy + bc * oplane;
        for (std::int64_t i = 0; i < oh; ++i) {
          for (std::int64_t j = 0; j < ow; ++j) {
            const double g = gout[i * ow + j];
            if (kind == PoolKind::kMax) {
              gin[argmax[bc * oplane + i * ow + j]] += g;
            } else {
              const std::int64_t r0 = two_d ? i * stride : 0;
              const std::int64_t c0 = j * stride;
              for (std::int64_t u = 0; u < wh; ++u) {
                for (std::int64_t v = 0; v < window; ++v) {
                  gin[(r0 + u) * w + (c0 + v)] += g * inv;
                }
              }
            }
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

struct BatchNormState {
  std::vector<double> running_mean, running_var;
  double momentum = 0.1;

  void ensure(std::int64_t channels) {
    if (running_mean.empty()) {
      running_mean.assign(channels, 0.0);
      running_var.assign(channels, 1.0);
    } else if (static_cast<std::int64_t>(running_mean.size()) != channels) {
      throw DimensionError("batchnorm: state holds " +
                           std::to_string(running_mean.size()) +
                           " channels, input has " + std::to_string(channels));
    }
  }
};

// Per-channel normalization over [B, C, spatial...]. Train mode uses biased
// batch statistics and folds them into the running stats with `momentum`;
// eval mode uses the running stats. Variance is biased throughout.
inline Tensor batchnorm(const Tensor& x, const Tensor& gamma,
                        const Tensor& beta, BatchNormState& state, Mode mode,
                        double eps = 1e-5) {
  if (x.dim() < 2) {
    throw DimensionError("batchnorm: expected [B,C,...], got " +
                         shape_str(x.shape()));
  }
  const std::int64_t batch = x.dim_size(0);
  const std::int64_t ch = x.dim_size(1);
  const std::int64_t sp = x.size() / (batch * ch);
  if (gamma.size() != ch || beta.size() != ch) {
    throw DimensionError("batchnorm: gamma/beta length " +
                         std::to_string(gamma.size()) + "/" +
                         std::to_string(beta.size()) +
                         " does not match channel count " +
                         std::to_string(ch));
  }
  if (mode == Mode::kTrain && batch < 2) {
    throw ProtocolError("batchnorm: train mode needs batch size >= 2");
  }
  state.ensure(ch);

  std::vector<double> mu(ch), var(ch);
  if (mode == Mode::kTrain) {
    const double inv_n = 1.0 / static_cast<double>(batch * sp);
    for (std::int64_t c = 0; c < ch; ++c) {
      double s = 0.0, s2 = 0.0;
      for (std::int64_t b = 0; b < batch; ++b) {
        const double* base = x.data() + (b * ch + c) * sp;
        for (std::int64_t j = 0; j < sp; ++j) {
          s += base[j];
          s2 += base[j] * base[j];
        }
      }
      mu[c] = s * inv_n;
      var[c] = std::max(0.0, s2 * inv_n - mu[c] * mu[c]);
    }
    for (std::int64_t c = 0; c < ch; ++c) {
      state.running_mean[c] =
          (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mu[c];
      state.running_var[c] =
          (1.0 - state.momentum) * state.running_var[c] + state.momentum * var[c];
    }
  } else {
    mu = state.running_mean;
    var = state.running_var;
  }

  Tensor y = Tensor::zeros(x.shape());
  std::vector<double> invstd(ch);
  for (std::int64_t c = 0; c < ch; ++c) invstd[c] = 1.0 / std::sqrt(var[c] + eps);
  {
    const double* xd = x.data();
    const double* gd = gamma.data();
    const double* bd = beta.data();
    double* yd = y.data();
    for (std::int64_t b = 0; b < batch; ++b) {
      for (std::int64_t c = 0; c < ch; ++c) {
        const double* in = xd + (b * ch + c) * sp;
        double* out = yd + (b * ch + c) * sp;
        const double m = mu[c], is = invstd[c], g = gd[c], bb = bd[c];
        for (std::int64_t j = 0; j < sp; ++j) out[j] = g * (in[j] - m) * is + bb;
      }
    }
  }
  detail::check_finite(y, "batchnorm");

  if (detail::should_record({&x, &gamma, &beta})) {
    y.set_requires_grad(true);
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), yi = y.impl();
    const bool train = mode == Mode::kTrain;
    Tape::active()->record(yi, {xi, gi, bi},
                           [xi, gi, bi, yi, batch, ch, sp, mu, invstd,
                            train]() {
      const double n = static_cast<double>(batch * sp);
      for (std::int64_t c = 0; c < ch; ++c) {
        const double m = mu[c], is = invstd[c], g = gi->data[c];
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::int64_t b = 0; b < batch; ++b) {
          const double* dy = yi->grad.data() + (b * ch + c) * sp;
          const double* xv = xi->data.data() + (b * ch + c) * sp;
          for (std::int64_t j = 0; j < sp; ++j) {
            sum_dy += dy[j];
            sum_dy_xhat += dy[j] * (xv[j] - m) * is;
          }
        }
        if (gi->requires_grad) gi->grad[c] += sum_dy_xhat;
        if (bi->requires_grad) bi->grad[c] += sum_dy;
        if (xi->requires_grad) {
          for (std::int64_t b = 0; b < batch; ++b) {
            const double* dy = yi->grad.data() + (b * ch + c) * sp;
            const double* xv = xi->data.data() + (b * ch + c) * sp;
            double* dx = xi->grad.data() + (b * ch + c) * sp;
            if (train) {
              // gradient through the batch statistics
              for (std::int64_t j = 0; j < sp; ++j) {
                const double xhat = (xv[j] - m) * is;
                dx[j] += g * is *
                         (dy[j] - sum_dy / n - xhat * sum_dy_xhat / n);
              }
            } else {
              for (std::int64_t j = 0; j < sp; ++j) dx[j] += g * is * dy[j];
            }
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

// Central finite-difference check of reverse-mode gradients. Returns the max
// over all input entries of |analytic - numeric| / max(1, |analytic|).
// `fn` must be deterministic and reduce to a scalar.
inline double gradient_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& fn,
    std::vector<Tensor> inputs, double eps = 1e-5) {
  if (eps < 1e-7 || eps > 1e-3) {
    throw ParameterError("gradient_check: eps must be in [1e-7, 1e-3]");
  }
  for (auto& t : inputs) t.set_requires_grad(true);

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor out = fn(inputs);
    if (out.size() != 1) {
      throw ProtocolError("gradient_check: fn must return a scalar");
    }
    tape.backward(out);
    for (auto& t : inputs) {
      analytic.push_back(t.has_grad() ? t.grad()
                                      : std::vector<double>(t.size(), 0.0));
    }
  }

  auto eval = [&]() {
    Tensor out = fn(inputs);
    if (out.size() != 1) {
      throw ProtocolError("gradient_check: fn must return a scalar");
    }
    return out.item();
  };

  double max_err = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    double* d = inputs[i].data();
    for (std::int64_t j = 0; j < inputs[i].size(); ++j) {
      const double keep = d[j];
      d[j] = keep + eps;
      const double fp = eval();
      d[j] = keep - eps;
      const double fm = eval();
      d[j] = keep;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[i][j];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

// Kaiming-style uniform fan-in init: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
inline Tensor kaiming_uniform(Shape shape, std::int64_t fan_in, Rng& rng,
                              bool requires_grad = true) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  return Tensor::uniform(std::move(shape), -bound, bound, rng, requires_grad);
}

}  // namespace dynser
