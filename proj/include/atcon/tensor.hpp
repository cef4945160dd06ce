#pragma once

// Dense row-major tensors of doubles with a dynamic reverse-mode tape.
//
// Every op returns a fresh Tensor. When any input requires a gradient the
// result records its parents and a closure that pushes the result's gradient
// into them. backward() orders the reachable graph topologically and runs each
// closure exactly once.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace atcon {

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
  using Error::Error;
};

class NumericError : public Error {
public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return parents.empty() && !backward; }
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::vector<double>& grad_of(Node& node) {
  if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
  return node.grad;
}

}  // namespace detail

class Tensor {
public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    for (auto e : shape)
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    if (detail::numel(shape) != values.size())
      throw ShapeError("tensor of shape " + to_string(shape) + " cannot hold " +
                       std::to_string(values.size()) + " values");
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    Tensor t(std::move(node));
    t.check_finite("from");
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = detail::numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor filled(Shape shape, double v) {
    auto n = detail::numel(shape);
    return from(std::move(shape), std::vector<double>(n, v));
  }

  static Tensor scalar(double v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  static Tensor vector(std::initializer_list<double> v, bool requires_grad = false) {
    return from({v.size()}, std::vector<double>(v), requires_grad);
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows, bool requires_grad = false) {
    std::vector<double> values;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw ShapeError("ragged matrix literal");
      values.insert(values.end(), r.begin(), r.end());
    }
    return from({rows.size(), cols}, std::move(values), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }

  // 2-D view: leading axes collapse into rows.
  std::size_t cols() const { return node_->shape.back(); }
  std::size_t rows() const { return size() / cols(); }

  std::span<const double> data() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }

  // Writable storage, leaves only (optimizer steps, loading checkpoints).
  std::span<double> mutable_data() {
    if (!node_->is_leaf()) throw Error("mutable_data() on a non-leaf tensor");
    return node_->value;
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) {
    if (!node_->is_leaf()) throw Error("set_requires_grad() on a non-leaf tensor");
    node_->requires_grad = v;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Same values, no history, no gradient.
  Tensor detach() const { return from(shape(), node_->value); }
  // Independent leaf with copied values and the same requires_grad flag.
  Tensor clone() const { return from(shape(), node_->value, requires_grad()); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

  void check_finite(const char* op) const {
    for (double v : node_->value)
      if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {
inline thread_local bool grad_recording = true;
}  // namespace detail

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
  NoGradGuard() : previous_(detail::grad_recording) { detail::grad_recording = false; }
  ~NoGradGuard() { detail::grad_recording = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
  bool previous_;
};

namespace detail {

using BackwardFn = std::function<void(Node&)>;

inline Tensor make_result_n(const char* op, Shape shape, std::vector<double> value,
                            const std::vector<Tensor>& inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool any = false;
  if (grad_recording)
    for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(fn);
  }
  Tensor out(std::move(node));
  out.check_finite(op);
  return out;
}

inline Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                          std::initializer_list<Tensor> inputs, BackwardFn fn) {
  return make_result_n(op, std::move(shape), std::move(value), std::vector<Tensor>(inputs), std::move(fn));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
}

inline void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + to_string(a.shape()));
}

template <class Fwd, class Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
  std::vector<double> out(a.size());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  return make_result(op, a.shape(), std::move(out), {a}, [deriv](Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = grad_of(p);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(p.value[i], self.value[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = detail::grad_of(*p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result("sub", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = detail::grad_of(*self.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = detail::grad_of(*self.parents[1]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Tensor elementwise_mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "elementwise_mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result("elementwise_mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = detail::grad_of(pa);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = detail::grad_of(pb);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary("scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

// d|x|/dx taken as 0 at the kink.
inline Tensor abs(const Tensor& a) {
  return detail::unary(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Tensor square(const Tensor& a) {
  return detail::unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

// (x + eps)^(-1/2)
inline Tensor inv_sqrt(const Tensor& a, double eps = 0.0) {
  return detail::unary(
      "inv_sqrt", a, [eps](double x) { return 1.0 / std::sqrt(x + eps); },
      [eps](double x, double y) { return -0.5 * y / (x + eps); });
}

// ---------------------------------------------------------------------------
// Broadcasts used by affine layers and normalization. `row` is 1×n (or n),
// `col` is m×1 (or m).

inline Tensor add_row(const Tensor& a, const Tensor& row) {
  detail::require_matrix(a, "add_row");
  const std::size_t m = a.rows(), n = a.cols();
  if (row.size() != n) throw ShapeError("add_row: row of " + to_string(row.shape()) + " vs " + to_string(a.shape()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] + row[j];
  return detail::make_result("add_row", a.shape(), std::move(out), {a, row}, [m, n](detail::Node& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = detail::grad_of(*self.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = detail::grad_of(*self.parents[1]);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

inline Tensor mul_row(const Tensor& a, const Tensor& row) {
  detail::require_matrix(a, "mul_row");
  const std::size_t m = a.rows(), n = a.cols();
  if (row.size() != n) throw ShapeError("mul_row: row of " + to_string(row.shape()) + " vs " + to_string(a.shape()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] * row[j];
  return detail::make_result("mul_row", a.shape(), std::move(out), {a, row}, [m, n](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pr = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = detail::grad_of(pa);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i * n + j] * pr.value[j];
    }
    if (pr.requires_grad) {
      auto& g = detail::grad_of(pr);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j] * pa.value[i * n + j];
    }
  });
}

inline Tensor mul_col(const Tensor& a, const Tensor& col) {
  detail::require_matrix(a, "mul_col");
  const std::size_t m = a.rows(), n = a.cols();
  if (col.size() != m) throw ShapeError("mul_col: col of " + to_string(col.shape()) + " vs " + to_string(a.shape()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] * col[i];
  return detail::make_result("mul_col", a.shape(), std::move(out), {a, col}, [m, n](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pc = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = detail::grad_of(pa);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i * n + j] * pc.value[i];
    }
    if (pc.requires_grad) {
      auto& g = detail::grad_of(pc);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i] += self.grad[i * n + j] * pa.value[i * n + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: inner extents differ " + to_string(a.shape()) + " x " + to_string(b.shape()));
  std::vector<double> out(m * n, 0.0);
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* c = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
    }
  }
  return detail::make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const double* G = self.grad.data();
    if (pa.requires_grad) {
      auto& g = detail::grad_of(pa);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double* grow = G + i * n;
          const double* brow = pb.value.data() + p * n;
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
          g[i * k + p] += s;
        }
    }
    if (pb.requires_grad) {
      auto& g = detail::grad_of(pb);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = pa.value[i * k + p];
          const double* grow = G + i * n;
          double* dst = g.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) dst[j] += av * grow[j];
        }
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return detail::make_result("transpose", {n, m}, std::move(out), {a}, [m, n](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = detail::grad_of(p);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (detail::numel(shape) != a.size())
    throw ShapeError("reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = detail::grad_of(p);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Row/column assembly

// Concatenate matrices with equal row counts along the last axis.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t m = parts[0].rows();
  std::vector<std::size_t> offsets;
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat");
    if (p.rows() != m) throw ShapeError("concat: row counts differ");
    offsets.push_back(n);
    n += p.cols();
  }
  std::vector<double> out(m * n);
  for (std::size_t t = 0; t < parts.size(); ++t) {
    const std::size_t w = parts[t].cols();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(parts[t].data().data() + i * w, w, out.data() + i * n + offsets[t]);
  }
  return detail::make_result_n("concat", {m, n}, std::move(out), parts, [m, n, offsets](detail::Node& self) {
    for (std::size_t t = 0; t < self.parents.size(); ++t) {
      auto& p = *self.parents[t];
      if (!p.requires_grad) continue;
      auto& g = detail::grad_of(p);
      const std::size_t w = p.shape.back();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * n + offsets[t] + j];
    }
  });
}

// Rows `indices` of a matrix, repeats allowed; gradients scatter-add back.
inline Tensor gather_rows(const Tensor& a, std::vector<std::size_t> indices) {
  detail::require_matrix(a, "gather_rows");
  const std::size_t n = a.cols(), m = a.rows();
  if (indices.empty()) throw ShapeError("gather_rows: no indices");
  std::vector<double> out(indices.size() * n);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= m) throw ShapeError("gather_rows: index " + std::to_string(indices[i]) + " out of range");
    std::copy_n(a.data().data() + indices[i] * n, n, out.data() + i * n);
  }
  const Shape shape{indices.size(), n};
  return detail::make_result("gather_rows", shape, std::move(out), {a},
                             [n, idx = std::move(indices)](detail::Node& self) {
                               auto& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               auto& g = detail::grad_of(p);
                               for (std::size_t i = 0; i < idx.size(); ++i)
                                 for (std::size_t j = 0; j < n; ++j) g[idx[i] * n + j] += self.grad[i * n + j];
                             });
}

inline Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  detail::require_matrix(a, "slice_rows");
  if (count == 0 || start + count > a.rows()) throw ShapeError("slice_rows: range out of bounds");
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), start);
  return gather_rows(a, std::move(idx));
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result("sum", {1}, {s}, {a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = detail::grad_of(p);
    for (auto& v : g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// Sum over axis 0 of a matrix -> 1×n.
inline Tensor sum_rows(const Tensor& a) {
  detail::require_matrix(a, "sum_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += a[i * n + j];
  return detail::make_result("sum_rows", {1, n}, std::move(out), {a}, [m, n](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = detail::grad_of(p);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j];
  });
}

// Sum over the last axis -> m×1.
inline Tensor sum_cols(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += a[i * n + j];
  return detail::make_result("sum_cols", {m, 1}, std::move(out), {a}, [m, n](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = detail::grad_of(p);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i];
  });
}

inline Tensor mean_rows(const Tensor& a) { return scale(sum_rows(a), 1.0 / static_cast<double>(a.rows())); }

// Population variance over axis 0 -> 1×n.
inline Tensor variance(const Tensor& a) {
  detail::require_matrix(a, "variance");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> mu(n, 0.0), out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) mu[j] += a[i * n + j];
  for (auto& v : mu) v /= static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double d = a[i * n + j] - mu[j];
      out[j] += d * d;
    }
  for (auto& v : out) v /= static_cast<double>(m);
  return detail::make_result("variance", {1, n}, std::move(out), {a}, [m, n, mu](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = detail::grad_of(p);
    const double k = 2.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j] * k * (p.value[i * n + j] - mu[j]);
  });
}

// ---------------------------------------------------------------------------
// Softmax family over the last axis, max-subtracted.

inline Tensor log_softmax(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = a.data().data() + i * n;
    const double mx = *std::max_element(x, x + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(x[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[j] - lse;
  }
  return detail::make_result("log_softmax", a.shape(), std::move(out), {a}, [m, n](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = detail::grad_of(p);
    for (std::size_t i = 0; i < m; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < n; ++j) gs += self.grad[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        g[i * n + j] += self.grad[i * n + j] - std::exp(self.value[i * n + j]) * gs;
    }
  });
}

inline Tensor softmax(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = a.data().data() + i * n;
    const double mx = *std::max_element(x, x + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(x[j] - mx);
      s += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= s;
  }
  return detail::make_result("softmax", a.shape(), std::move(out), {a}, [m, n](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = detail::grad_of(p);
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * self.value[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        g[i * n + j] += self.value[i * n + j] * (self.grad[i * n + j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Reverse pass

enum class GraphMode {
  retain,   // graph may be traversed again; leaf gradients keep accumulating
  consume,  // closures are released after one traversal
};

inline void backward(const Tensor& loss, GraphMode mode = GraphMode::retain) {
  if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, got " + to_string(loss.shape()));
  auto root = loss.node();
  if (root->consumed) throw Error("backward: graph already consumed");
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.contains(p)) {
        if (p->consumed) throw Error("backward: graph already consumed");
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are per-traversal; leaf gradients accumulate.
  for (auto* n : order)
    if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
  detail::grad_of(*root)[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward) n->backward(*n);
  }

  for (auto* n : order) {
    if (n->is_leaf()) continue;
    n->grad.clear();
    if (mode == GraphMode::consume) {
      n->backward = nullptr;
      n->parents.clear();
      n->consumed = true;
    }
  }
}

}  // namespace atcon
