#pragma once

#include <algorithm>
#include <atomic>
#include <cblas.h>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <type_traits>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "lewel/common.hpp"

// Dense row-major tensors with reverse-mode autodiff. A Tensor is a shared
// handle to a Node; ops create fresh nodes and, while gradients are enabled
// and some input requires grad, record a backward closure. backward() walks
// the tape once, frees it, and returns a GradientTable keyed by leaf id.
// Matmul/conv inner products are delegated to BLAS gemm; everything else is
// plain loops.

namespace lewel {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

namespace detail {

inline std::uint64_t next_tensor_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // materialized only during backward
  bool requires_grad = false;
  bool is_leaf = true;
  bool wd_exempt = false;  // optimizer may skip weight decay (biases, BN affine)
  std::uint64_t id = next_tensor_id();
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

// Gradient tracking is per-thread: one graph per thread of execution.
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>, "Tensor supports float and double");

 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return from_data(std::move(shape), {}, /*fill*/ true, T(0));
  }
  static Tensor full(Shape shape, T value) {
    return from_data(std::move(shape), {}, true, value);
  }
  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }
  static Tensor scalar(T value) { return full(Shape{}, value); }

  static Tensor from_data(Shape shape, std::vector<T> data, bool fill = false, T fill_value = T(0)) {
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    const std::size_t n = shape_numel(node->shape);
    if (fill) {
      node->data.assign(n, fill_value);
    } else {
      if (data.size() != n)
        throw ShapeError(cat("from_data: buffer size ", data.size(), " != numel of ", shape_str(node->shape)));
      node->data = std::move(data);
    }
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  // Trainable leaf.
  static Tensor param(Shape shape, std::vector<T> data, bool wd_exempt = false) {
    Tensor t = from_data(std::move(shape), std::move(data));
    t.node_->requires_grad = true;
    t.node_->wd_exempt = wd_exempt;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }

  std::span<const T> data() const { return node_->data; }
  // In-place mutation is only legal between steps (graph already freed).
  std::span<T> mutable_data() { return node_->data; }

  T item() const {
    if (numel() != 1) throw ShapeError(cat("item() on tensor of shape ", shape_str(shape())));
    return node_->data[0];
  }

  T at(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != ndim()) throw ShapeError("at(): rank mismatch");
    std::size_t off = 0, axis = 0;
    for (auto i : idx) {
      off = off * node_->shape[axis] + i;
      ++axis;
    }
    return node_->data[off];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }
  bool wd_exempt() const { return node_->wd_exempt; }
  std::uint64_t id() const { return node_->id; }

  // Same values, detached from the graph (shares nothing backward).
  Tensor detach() const {
    Tensor t = from_data(node_->shape, node_->data);
    return t;
  }

  Tensor clone() const { return detach(); }

  template <typename U>
  Tensor<U> astype() const {
    std::vector<U> out(node_->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(node_->data[i]);
    return Tensor<U>::from_data(node_->shape, std::move(out));
  }

  std::shared_ptr<detail::Node<T>> node() const { return node_; }

  static Tensor wrap(std::shared_ptr<detail::Node<T>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

namespace detail {

template <typename T>
void check_finite(const std::vector<T>& data, const char* op) {
  if (!runtime::flags().check_finite) return;
  for (const T v : data) {
    if (!std::isfinite(v)) throw NumericError(cat("non-finite value produced by op '", op, "'"));
  }
}

// Create an op output and attach it to the tape when needed.
template <typename T>
Tensor<T> make_op(const char* op, Shape shape, std::vector<T> data,
                  std::vector<Tensor<T>> inputs, std::function<void(Node<T>&)> backward) {
  check_finite(data, op);
  auto out = Tensor<T>::from_data(std::move(shape), std::move(data));
  auto node = out.node();
  node->op = op;
  bool track = grad_enabled_flag();
  if (track) {
    track = false;
    for (const auto& in : inputs)
      if (in.requires_grad()) track = true;
  }
  if (track) {
    node->requires_grad = true;
    node->is_leaf = false;
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return out;
}

template <typename T>
void accumulate(Node<T>& target, const std::vector<T>& delta) {
  target.ensure_grad();
  for (std::size_t i = 0; i < delta.size(); ++i) target.grad[i] += delta[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// GradientTable: leaf-id -> gradient. Parameters unreachable from the loss
// read back as zeros.
// ---------------------------------------------------------------------------

template <typename T>
class GradientTable {
 public:
  void insert(std::uint64_t id, Tensor<T> grad) { grads_.emplace(id, std::move(grad)); }

  bool contains(const Tensor<T>& param) const { return grads_.count(param.id()) > 0; }
  bool contains_id(std::uint64_t id) const { return grads_.count(id) > 0; }
  std::size_t size() const { return grads_.size(); }

  Tensor<T> grad_for(const Tensor<T>& param) const {
    if (!param.requires_grad())
      throw ShapeError("grad_for: tensor does not require grad");
    auto it = grads_.find(param.id());
    if (it == grads_.end()) return Tensor<T>::zeros(param.shape());
    return it->second;
  }

 private:
  std::unordered_map<std::uint64_t, Tensor<T>> grads_;
};

// Reverse sweep from a scalar loss. The visited tape is freed afterwards.
template <typename T>
GradientTable<T> backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw ShapeError(cat("backward: loss must be scalar, got ", shape_str(loss.shape())));
  GradientTable<T> table;
  auto root = loss.node();
  if (!root->requires_grad) return table;

  // Iterative post-order DFS; construction order makes this deterministic.
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> visited;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad.assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* node = *it;
    node->ensure_grad();
    if (node->backward) node->backward(*node);
  }

  for (detail::Node<T>* node : order) {
    if (node->is_leaf && node->requires_grad)
      table.insert(node->id, Tensor<T>::from_data(node->shape, node->grad));
    node->grad.clear();
    node->grad.shrink_to_fit();
    node->backward = nullptr;
    node->parents.clear();
  }
  return table;
}

// ---------------------------------------------------------------------------
// Broadcasting helpers (numpy trailing-dim rules).
// ---------------------------------------------------------------------------

namespace detail {

inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::size_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const std::size_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(cat(op, ": shapes ", shape_str(a), " and ", shape_str(b), " do not broadcast"));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides padded/zeroed for broadcasting against `out`.
inline std::vector<std::size_t> broadcast_strides(const Shape& shape, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t s = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    const std::size_t oi = i + (out.size() - shape.size());
    strides[oi] = (shape[i] == 1 && out[oi] != 1) ? 0 : s;
    s *= shape[i];
  }
  return strides;
}

template <typename T, typename F>
std::vector<T> ew_binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, Shape& out_shape, F f) {
  out_shape = broadcast_shape(op, a.shape(), b.shape());
  const std::size_t n = shape_numel(out_shape);
  std::vector<T> out(n);
  const auto& da = a.node()->data;
  const auto& db = b.node()->data;
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(da[i], db[i]);
  } else if (b.numel() == 1) {
    const T s = db[0];
    for (std::size_t i = 0; i < n; ++i) out[i] = f(da[i], s);
  } else if (a.numel() == 1) {
    const T s = da[0];
    for (std::size_t i = 0; i < n; ++i) out[i] = f(s, db[i]);
  } else {
    // odometer walk with incremental offsets
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    std::vector<std::size_t> idx(out_shape.size(), 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = f(da[oa], db[ob]);
      for (std::size_t ax = out_shape.size(); ax-- > 0;) {
        oa += sa[ax];
        ob += sb[ax];
        if (++idx[ax] < out_shape[ax]) break;
        oa -= sa[ax] * out_shape[ax];
        ob -= sb[ax] * out_shape[ax];
        idx[ax] = 0;
      }
    }
  }
  return out;
}

// Sum `grad` (shaped like `from`) down to `to` for broadcast backward.
template <typename T>
std::vector<T> reduce_to_shape(const std::vector<T>& grad, const Shape& from, const Shape& to) {
  if (from == to) return grad;
  std::vector<T> out(shape_numel(to), T(0));
  const auto st = broadcast_strides(to, from);
  std::vector<std::size_t> idx(from.size(), 0);
  std::size_t ot = 0;
  const std::size_t n = grad.size();
  for (std::size_t i = 0; i < n; ++i) {
    out[ot] += grad[i];
    for (std::size_t ax = from.size(); ax-- > 0;) {
      ot += st[ax];
      if (++idx[ax] < from[ax]) break;
      ot -= st[ax] * from[ax];
      idx[ax] = 0;
    }
  }
  return out;
}

template <typename T>
void accumulate_reduced(Node<T>& target, const std::vector<T>& grad, const Shape& grad_shape) {
  if (target.shape == grad_shape) {
    accumulate(target, grad);
  } else {
    accumulate(target, reduce_to_shape(grad, grad_shape, target.shape));
  }
}

inline void gemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda,
                 const float* b, int ldb, float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
              k, alpha, a, lda, b, ldb, beta, c, ldc);
}
inline void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, int lda,
                 const double* b, int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
              k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

#define LEWEL_BINARY_OP(NAME, FWD, BWD_A, BWD_B)                                                 \
  template <typename T>                                                                          \
  Tensor<T> NAME(const Tensor<T>& a, const Tensor<T>& b) {                                       \
    Shape out_shape;                                                                             \
    auto data = detail::ew_binary(#NAME, a, b, out_shape, [](T x, T y) {                         \
      (void)x;                                                                                   \
      (void)y;                                                                                   \
      return FWD;                                                                                \
    });                                                                                          \
    auto an = a.node();                                                                          \
    auto bn = b.node();                                                                          \
    auto shape = out_shape;                                                                      \
    return detail::make_op<T>(#NAME, std::move(out_shape), std::move(data), {a, b},              \
                              [an, bn, shape](detail::Node<T>& out) {                            \
                                Shape tmp_shape;                                                 \
                                Tensor<T> aw = Tensor<T>::wrap(an), bw = Tensor<T>::wrap(bn);    \
                                if (an->requires_grad) {                                         \
                                  std::vector<T> ga(out.grad.size());                            \
                                  auto fa = [](T x, T y) {                                       \
                                    (void)x;                                                     \
                                    (void)y;                                                     \
                                    return BWD_A;                                                \
                                  };                                                             \
                                  auto full = detail::ew_binary("bwd", aw, bw, tmp_shape, fa);   \
                                  for (std::size_t i = 0; i < ga.size(); ++i)                    \
                                    ga[i] = out.grad[i] * full[i];                               \
                                  detail::accumulate_reduced(*an, ga, shape);                    \
                                }                                                                \
                                if (bn->requires_grad) {                                         \
                                  std::vector<T> gb(out.grad.size());                            \
                                  auto fb = [](T x, T y) {                                       \
                                    (void)x;                                                     \
                                    (void)y;                                                     \
                                    return BWD_B;                                                \
                                  };                                                             \
                                  auto full = detail::ew_binary("bwd", aw, bw, tmp_shape, fb);   \
                                  for (std::size_t i = 0; i < gb.size(); ++i)                    \
                                    gb[i] = out.grad[i] * full[i];                               \
                                  detail::accumulate_reduced(*bn, gb, shape);                    \
                                }                                                                \
                              });                                                                \
  }

// d(a+b)/da = 1, d(a*b)/da = b, etc.
LEWEL_BINARY_OP(add, x + y, T(1), T(1))
LEWEL_BINARY_OP(sub, x - y, T(1), T(-1))
LEWEL_BINARY_OP(mul, x* y, y, x)
LEWEL_BINARY_OP(div, x / y, T(1) / y, -x / (y * y))

#undef LEWEL_BINARY_OP

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

namespace detail {

template <typename T, typename FwdF, typename BwdF>
Tensor<T> unary_op(const char* op, const Tensor<T>& a, FwdF fwd, BwdF bwd_from_in_out) {
  const auto& in = a.node()->data;
  std::vector<T> data(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) data[i] = fwd(in[i]);
  auto an = a.node();
  auto out_vals = data;  // captured copy for backward rules using the output
  return make_op<T>(op, a.shape(), std::move(data), {a},
                    [an, bwd_from_in_out, out_vals = std::move(out_vals)](Node<T>& out) {
                      if (!an->requires_grad) return;
                      std::vector<T> g(out.grad.size());
                      for (std::size_t i = 0; i < g.size(); ++i)
                        g[i] = out.grad[i] * bwd_from_in_out(an->data[i], out_vals[i]);
                      accumulate(*an, g);
                    });
}

}  // namespace detail

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return detail::unary_op(
      "neg", a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  // subgradient at 0 is taken as 0
  return detail::unary_op(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary_op(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::unary_op(
      "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return detail::unary_op(
      "sqrt", a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(1) / (T(2) * y); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return detail::unary_op(
      "scale", a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> power(const Tensor<T>& a, T p) {
  return detail::unary_op(
      "power", a, [p](T x) { return std::pow(x, p); },
      [p](T x, T) { return p * std::pow(x, p - T(1)); });
}

template <typename T>
Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }

// Forward identity; contributes nothing to any ancestor's gradient.
template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& a) {
  return a.detach();
}

// ---------------------------------------------------------------------------
// matmul / conv2d (BLAS-backed)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.size(1) != b.size(0))
    throw ShapeError(cat("matmul: ", shape_str(a.shape()), " x ", shape_str(b.shape())));
  const int m = static_cast<int>(a.size(0)), k = static_cast<int>(a.size(1)),
            n = static_cast<int>(b.size(1));
  std::vector<T> data(static_cast<std::size_t>(m) * n);
  detail::gemm(false, false, m, n, k, T(1), a.node()->data.data(), k, b.node()->data.data(), n,
               T(0), data.data(), n);
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op<T>("matmul", {std::size_t(m), std::size_t(n)}, std::move(data), {a, b},
                            [an, bn, m, n, k](detail::Node<T>& out) {
                              if (an->requires_grad) {
                                std::vector<T> ga(an->data.size());
                                // dA = G * B^T
                                detail::gemm(false, true, m, k, n, T(1), out.grad.data(), n,
                                             bn->data.data(), n, T(0), ga.data(), k);
                                detail::accumulate(*an, ga);
                              }
                              if (bn->requires_grad) {
                                std::vector<T> gb(bn->data.size());
                                // dB = A^T * G
                                detail::gemm(true, false, k, n, m, T(1), an->data.data(), k,
                                             out.grad.data(), n, T(0), gb.data(), n);
                                detail::accumulate(*bn, gb);
                              }
                            });
}

// a (m,k) x b(n,k)^T -> (m,n); avoids materializing transposes for similarity matrices.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.size(1) != b.size(1))
    throw ShapeError(cat("matmul_nt: ", shape_str(a.shape()), " x ", shape_str(b.shape()), "^T"));
  const int m = static_cast<int>(a.size(0)), k = static_cast<int>(a.size(1)),
            n = static_cast<int>(b.size(0));
  std::vector<T> data(static_cast<std::size_t>(m) * n);
  detail::gemm(false, true, m, n, k, T(1), a.node()->data.data(), k, b.node()->data.data(), k,
               T(0), data.data(), n);
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op<T>("matmul_nt", {std::size_t(m), std::size_t(n)}, std::move(data), {a, b},
                            [an, bn, m, n, k](detail::Node<T>& out) {
                              if (an->requires_grad) {
                                std::vector<T> ga(an->data.size());
                                detail::gemm(false, false, m, k, n, T(1), out.grad.data(), n,
                                             bn->data.data(), k, T(0), ga.data(), k);
                                detail::accumulate(*an, ga);
                              }
                              if (bn->requires_grad) {
                                std::vector<T> gb(bn->data.size());
                                detail::gemm(true, false, n, k, m, T(1), out.grad.data(), n,
                                             an->data.data(), k, T(0), gb.data(), k);
                                detail::accumulate(*bn, gb);
                              }
                            });
}

namespace detail {

// col buffer layout: (C*kh*kw) x (oh*ow)
template <typename T>
void im2col(const T* img, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow,
            T* col) {
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        T* dst = col + ((c * kh + ky) * kw + kx) * (oh * ow);
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) {
            std::fill(dst + oy * ow, dst + (oy + 1) * ow, T(0));
            continue;
          }
          const T* src_row = img + (c * H + iy) * W;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                      static_cast<std::ptrdiff_t>(pad);
            dst[oy * ow + ox] =
                (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) ? T(0) : src_row[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
                std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh,
                std::size_t ow, T* img) {
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const T* src = col + ((c * kh + ky) * kw + kx) * (oh * ow);
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          T* dst_row = img + (c * H + iy) * W;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(W)) dst_row[ix] += src[oy * ow + ox];
          }
        }
      }
    }
  }
}

template <typename T>
std::vector<T>& conv_scratch() {
  thread_local std::vector<T> buf;
  return buf;
}

}  // namespace detail

// x: (N,C,H,W), w: (O,C,kh,kw), bias: (O) or undefined. Zero padding, no dilation.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t pad = 0) {
  if (x.ndim() != 4 || w.ndim() != 4 || x.size(1) != w.size(1))
    throw ShapeError(cat("conv2d: input ", shape_str(x.shape()), " weight ", shape_str(w.shape())));
  const std::size_t N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  const std::size_t O = w.size(0), kh = w.size(2), kw = w.size(3);
  if (H + 2 * pad < kh || W + 2 * pad < kw)
    throw ShapeError("conv2d: kernel larger than padded input");
  const std::size_t oh = (H + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (W + 2 * pad - kw) / stride + 1;
  const std::size_t K = C * kh * kw, P = oh * ow;
  const bool has_bias = bias.defined();
  if (has_bias && (bias.ndim() != 1 || bias.size(0) != O))
    throw ShapeError(cat("conv2d: bias ", shape_str(bias.shape()), " vs ", O, " filters"));

  std::vector<T> data(N * O * P);
  auto& col = detail::conv_scratch<T>();
  col.resize(K * P);
  for (std::size_t n = 0; n < N; ++n) {
    detail::im2col(x.node()->data.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, oh, ow,
                   col.data());
    detail::gemm(false, false, static_cast<int>(O), static_cast<int>(P), static_cast<int>(K),
                 T(1), w.node()->data.data(), static_cast<int>(K), col.data(),
                 static_cast<int>(P), T(0), data.data() + n * O * P, static_cast<int>(P));
    if (has_bias) {
      T* out_n = data.data() + n * O * P;
      const auto& b = bias.node()->data;
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t p = 0; p < P; ++p) out_n[o * P + p] += b[o];
    }
  }

  auto xn = x.node();
  auto wn = w.node();
  auto bnode = has_bias ? bias.node() : nullptr;
  std::vector<Tensor<T>> inputs = {x, w};
  if (has_bias) inputs.push_back(bias);
  return detail::make_op<T>(
      "conv2d", {N, O, oh, ow}, std::move(data), std::move(inputs),
      [xn, wn, bnode, N, C, H, W, O, kh, kw, stride, pad, oh, ow, K, P](detail::Node<T>& out) {
        auto& col = detail::conv_scratch<T>();
        col.resize(K * P);
        std::vector<T> gw, gx, dcol;
        if (wn->requires_grad) gw.assign(wn->data.size(), T(0));
        if (xn->requires_grad) {
          gx.assign(xn->data.size(), T(0));
          dcol.resize(K * P);
        }
        for (std::size_t n = 0; n < N; ++n) {
          const T* g_n = out.grad.data() + n * O * P;
          if (wn->requires_grad || xn->requires_grad) {
            if (wn->requires_grad) {
              detail::im2col(xn->data.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, oh,
                             ow, col.data());
              // dW += G_n * col^T
              detail::gemm(false, true, static_cast<int>(O), static_cast<int>(K),
                           static_cast<int>(P), T(1), g_n, static_cast<int>(P), col.data(),
                           static_cast<int>(P), T(1), gw.data(), static_cast<int>(K));
            }
            if (xn->requires_grad) {
              // dcol = W^T * G_n
              detail::gemm(true, false, static_cast<int>(K), static_cast<int>(P),
                           static_cast<int>(O), T(1), wn->data.data(), static_cast<int>(K), g_n,
                           static_cast<int>(P), T(0), dcol.data(), static_cast<int>(P));
              detail::col2im_add(dcol.data(), C, H, W, kh, kw, stride, pad, oh, ow,
                                 gx.data() + n * C * H * W);
            }
          }
        }
        if (wn->requires_grad) detail::accumulate(*wn, gw);
        if (xn->requires_grad) detail::accumulate(*xn, gx);
        if (bnode && bnode->requires_grad) {
          std::vector<T> gb(O, T(0));
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < O; ++o) {
              const T* g_row = out.grad.data() + (n * O + o) * P;
              T s = 0;
              for (std::size_t p = 0; p < P; ++p) s += g_row[p];
              gb[o] += s;
            }
          detail::accumulate(*bnode, gb);
        }
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride = 1,
                 std::size_t pad = 0) {
  return conv2d(x, w, Tensor<T>(), stride, pad);
}

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

namespace detail {

inline void validate_axes(const char* op, const Shape& shape, const std::vector<std::size_t>& axes) {
  if (axes.empty()) throw ShapeError(cat(op, ": empty axis list"));
  for (auto a : axes)
    if (a >= shape.size()) throw ShapeError(cat(op, ": axis ", a, " out of range for ", shape_str(shape)));
  for (std::size_t i = 1; i < axes.size(); ++i)
    if (axes[i] <= axes[i - 1]) throw ShapeError(cat(op, ": axes must be strictly increasing"));
}

inline Shape reduced_shape(const Shape& shape, const std::vector<std::size_t>& axes, bool keepdims) {
  Shape out;
  std::size_t j = 0;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (j < axes.size() && axes[j] == i) {
      if (keepdims) out.push_back(1);
      ++j;
    } else {
      out.push_back(shape[i]);
    }
  }
  return out;
}

// Decompose a reduction into (outer, red, inner) when possible; otherwise the
// generic odometer is used. For trailing-axes reductions inner == 1 and the
// reduced block is contiguous.
struct ReducePlan {
  std::size_t n_out = 1;       // number of kept-index groups
  std::size_t n_red = 1;       // elements reduced per group
  bool contiguous = false;     // reduced axes form a trailing block
  std::vector<std::size_t> out_strides_in;  // stride in input for each kept axis
  std::vector<std::size_t> red_strides_in;  // stride in input for each reduced axis
  std::vector<std::size_t> out_dims, red_dims;
};

inline ReducePlan make_reduce_plan(const Shape& shape, const std::vector<std::size_t>& axes) {
  ReducePlan plan;
  std::vector<std::size_t> strides(shape.size());
  std::size_t s = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    strides[i] = s;
    s *= shape[i];
  }
  std::size_t j = 0;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (j < axes.size() && axes[j] == i) {
      plan.red_dims.push_back(shape[i]);
      plan.red_strides_in.push_back(strides[i]);
      plan.n_red *= shape[i];
      ++j;
    } else {
      plan.out_dims.push_back(shape[i]);
      plan.out_strides_in.push_back(strides[i]);
      plan.n_out *= shape[i];
    }
  }
  plan.contiguous = axes.size() == shape.size() ||
                    (axes.front() == shape.size() - axes.size() && axes.back() == shape.size() - 1);
  return plan;
}

// Iterate groups: call fn(group_index, base_offset_fn) where the group's
// elements are at base + sum(red_idx * red_stride).
template <typename Body>
void for_each_group(const ReducePlan& plan, Body body) {
  std::vector<std::size_t> idx(plan.out_dims.size(), 0);
  std::size_t base = 0;
  for (std::size_t g = 0; g < plan.n_out; ++g) {
    body(g, base);
    for (std::size_t ax = plan.out_dims.size(); ax-- > 0;) {
      base += plan.out_strides_in[ax];
      if (++idx[ax] < plan.out_dims[ax]) break;
      base -= plan.out_strides_in[ax] * plan.out_dims[ax];
      idx[ax] = 0;
    }
  }
}

template <typename T, typename Body>
void for_each_red(const ReducePlan& plan, std::size_t base, Body body) {
  if (plan.contiguous) {
    for (std::size_t r = 0; r < plan.n_red; ++r) body(base + r);
    return;
  }
  std::vector<std::size_t> idx(plan.red_dims.size(), 0);
  std::size_t off = base;
  for (std::size_t r = 0; r < plan.n_red; ++r) {
    body(off);
    for (std::size_t ax = plan.red_dims.size(); ax-- > 0;) {
      off += plan.red_strides_in[ax];
      if (++idx[ax] < plan.red_dims[ax]) break;
      off -= plan.red_strides_in[ax] * plan.red_dims[ax];
      idx[ax] = 0;
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> sum_axes(const Tensor<T>& a, std::vector<std::size_t> axes, bool keepdims = false) {
  detail::validate_axes("sum_axes", a.shape(), axes);
  auto plan = detail::make_reduce_plan(a.shape(), axes);
  Shape out_shape = detail::reduced_shape(a.shape(), axes, keepdims);
  std::vector<T> data(plan.n_out, T(0));
  const auto& in = a.node()->data;
  detail::for_each_group(plan, [&](std::size_t g, std::size_t base) {
    T acc = 0;
    detail::for_each_red<T>(plan, base, [&](std::size_t off) { acc += in[off]; });
    data[g] = acc;
  });
  auto an = a.node();
  return detail::make_op<T>("sum_axes", std::move(out_shape), std::move(data), {a},
                            [an, plan](detail::Node<T>& out) {
                              if (!an->requires_grad) return;
                              std::vector<T> g(an->data.size(), T(0));
                              detail::for_each_group(plan, [&](std::size_t gi, std::size_t base) {
                                const T gv = out.grad[gi];
                                detail::for_each_red<T>(plan, base,
                                                        [&](std::size_t off) { g[off] += gv; });
                              });
                              detail::accumulate(*an, g);
                            });
}

template <typename T>
Tensor<T> mean_axes(const Tensor<T>& a, std::vector<std::size_t> axes, bool keepdims = false) {
  auto plan = detail::make_reduce_plan(a.shape(), axes);
  return scale(sum_axes(a, std::move(axes), keepdims), T(1) / static_cast<T>(plan.n_red));
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  if (a.ndim() == 0) return reshape(a, Shape{});
  std::vector<std::size_t> axes(a.ndim());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  return sum_axes(a, std::move(axes));
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  if (a.ndim() == 0) return reshape(a, Shape{});
  return scale(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> max_axes(const Tensor<T>& a, std::vector<std::size_t> axes, bool keepdims = false) {
  detail::validate_axes("max_axes", a.shape(), axes);
  auto plan = detail::make_reduce_plan(a.shape(), axes);
  Shape out_shape = detail::reduced_shape(a.shape(), axes, keepdims);
  std::vector<T> data(plan.n_out);
  std::vector<std::size_t> argmax(plan.n_out);  // first max wins; deterministic
  const auto& in = a.node()->data;
  detail::for_each_group(plan, [&](std::size_t g, std::size_t base) {
    T best = -std::numeric_limits<T>::infinity();
    std::size_t best_off = base;
    detail::for_each_red<T>(plan, base, [&](std::size_t off) {
      if (in[off] > best) {
        best = in[off];
        best_off = off;
      }
    });
    data[g] = best;
    argmax[g] = best_off;
  });
  auto an = a.node();
  return detail::make_op<T>("max_axes", std::move(out_shape), std::move(data), {a},
                            [an, argmax = std::move(argmax)](detail::Node<T>& out) {
                              if (!an->requires_grad) return;
                              std::vector<T> g(an->data.size(), T(0));
                              for (std::size_t i = 0; i < argmax.size(); ++i)
                                g[argmax[i]] += out.grad[i];
                              detail::accumulate(*an, g);
                            });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel())
    throw ShapeError(cat("reshape: ", shape_str(a.shape()), " -> ", shape_str(new_shape)));
  auto an = a.node();
  std::vector<T> data = an->data;
  return detail::make_op<T>("reshape", std::move(new_shape), std::move(data), {a},
                            [an](detail::Node<T>& out) {
                              if (an->requires_grad) detail::accumulate(*an, out.grad);
                            });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, std::vector<std::size_t> order) {
  const std::size_t nd = a.ndim();
  if (order.size() != nd) throw ShapeError("permute: order rank mismatch");
  std::vector<bool> seen(nd, false);
  for (auto o : order) {
    if (o >= nd || seen[o]) throw ShapeError("permute: invalid axis order");
    seen[o] = true;
  }
  Shape out_shape(nd);
  for (std::size_t i = 0; i < nd; ++i) out_shape[i] = a.shape()[order[i]];

  std::vector<std::size_t> in_strides(nd), walk(nd);
  std::size_t s = 1;
  for (std::size_t i = nd; i-- > 0;) {
    in_strides[i] = s;
    s *= a.shape()[i];
  }
  for (std::size_t i = 0; i < nd; ++i) walk[i] = in_strides[order[i]];

  const auto& in = a.node()->data;
  std::vector<T> data(in.size());
  if (nd == 4) {
    std::size_t i = 0;
    for (std::size_t a0 = 0; a0 < out_shape[0]; ++a0)
      for (std::size_t a1 = 0; a1 < out_shape[1]; ++a1)
        for (std::size_t a2 = 0; a2 < out_shape[2]; ++a2) {
          std::size_t off = a0 * walk[0] + a1 * walk[1] + a2 * walk[2];
          for (std::size_t a3 = 0; a3 < out_shape[3]; ++a3, off += walk[3]) data[i++] = in[off];
        }
  } else {
    std::vector<std::size_t> idx(nd, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      data[i] = in[off];
      for (std::size_t ax = nd; ax-- > 0;) {
        off += walk[ax];
        if (++idx[ax] < out_shape[ax]) break;
        off -= walk[ax] * out_shape[ax];
        idx[ax] = 0;
      }
    }
  }
  auto an = a.node();
  std::vector<std::size_t> inverse(nd);
  for (std::size_t i = 0; i < nd; ++i) inverse[order[i]] = i;
  auto out_shape_copy = out_shape;
  return detail::make_op<T>(
      "permute", std::move(out_shape), std::move(data), {a},
      [an, inverse, out_shape_copy](detail::Node<T>& out) {
        if (!an->requires_grad) return;
        // scatter: walk output in order, write into input offsets
        const std::size_t nd = inverse.size();
        std::vector<std::size_t> out_strides(nd), walk(nd);
        std::size_t s = 1;
        for (std::size_t i = nd; i-- > 0;) {
          out_strides[i] = s;
          s *= out_shape_copy[i];
        }
        for (std::size_t i = 0; i < nd; ++i) walk[i] = out_strides[inverse[i]];
        std::vector<T> g(an->data.size());
        std::vector<std::size_t> idx(nd, 0);
        std::size_t off = 0;
        for (std::size_t i = 0; i < g.size(); ++i) {
          g[i] = out.grad[off];
          for (std::size_t ax = nd; ax-- > 0;) {
            off += walk[ax];
            if (++idx[ax] < an->shape[ax]) break;
            off -= walk[ax] * an->shape[ax];
            idx[ax] = 0;
          }
        }
        detail::accumulate(*an, g);
      });
}

template <typename T>
Tensor<T> slice_axis(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= a.ndim() || start + len > a.size(axis))
    throw ShapeError(cat("slice_axis: [", start, ",", start + len, ") on axis ", axis, " of ",
                         shape_str(a.shape())));
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.shape()[i];
  for (std::size_t i = axis + 1; i < a.ndim(); ++i) inner *= a.shape()[i];
  const std::size_t in_axis = a.size(axis);
  const auto& in = a.node()->data;
  std::vector<T> data(outer * len * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::memcpy(data.data() + o * len * inner, in.data() + (o * in_axis + start) * inner,
                len * inner * sizeof(T));
  auto an = a.node();
  return detail::make_op<T>("slice_axis", std::move(out_shape), std::move(data), {a},
                            [an, outer, inner, len, in_axis, start](detail::Node<T>& out) {
                              if (!an->requires_grad) return;
                              std::vector<T> g(an->data.size(), T(0));
                              for (std::size_t o = 0; o < outer; ++o) {
                                const T* src = out.grad.data() + o * len * inner;
                                T* dst = g.data() + (o * in_axis + start) * inner;
                                for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                              }
                              detail::accumulate(*an, g);
                            });
}

template <typename T>
Tensor<T> concat_axis(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat_axis: no inputs");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) throw ShapeError("concat_axis: axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != ref.size()) throw ShapeError("concat_axis: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i)
      if (i != axis && p.shape()[i] != ref[i])
        throw ShapeError(cat("concat_axis: shape mismatch ", shape_str(p.shape()), " vs ",
                             shape_str(ref)));
    total += p.size(axis);
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];

  std::vector<T> data(shape_numel(out_shape));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t pa = p.size(axis);
    const auto& src = p.node()->data;
    for (std::size_t o = 0; o < outer; ++o)
      std::memcpy(data.data() + (o * total + offset) * inner, src.data() + o * pa * inner,
                  pa * inner * sizeof(T));
    offset += pa;
  }

  std::vector<std::shared_ptr<detail::Node<T>>> pnodes;
  std::vector<std::size_t> sizes;
  pnodes.reserve(parts.size());
  for (const auto& p : parts) {
    pnodes.push_back(p.node());
    sizes.push_back(p.size(axis));
  }
  return detail::make_op<T>("concat_axis", std::move(out_shape), std::move(data), parts,
                            [pnodes, sizes, outer, inner, total](detail::Node<T>& out) {
                              std::size_t offset = 0;
                              for (std::size_t pi = 0; pi < pnodes.size(); ++pi) {
                                auto& pn = *pnodes[pi];
                                const std::size_t pa = sizes[pi];
                                if (pn.requires_grad) {
                                  std::vector<T> g(pn.data.size());
                                  for (std::size_t o = 0; o < outer; ++o)
                                    std::memcpy(g.data() + o * pa * inner,
                                                out.grad.data() + (o * total + offset) * inner,
                                                pa * inner * sizeof(T));
                                  detail::accumulate(pn, g);
                                }
                                offset += pa;
                              }
                            });
}

template <typename T>
Tensor<T> concat_axis(std::initializer_list<Tensor<T>> parts, std::size_t axis) {
  return concat_axis(std::vector<Tensor<T>>(parts), axis);
}

// ---------------------------------------------------------------------------
// l2_normalize_axis / softmax_axes
// ---------------------------------------------------------------------------

// Slices with norm <= eps map to the zero vector and propagate zero gradient.
template <typename T>
inline constexpr T kL2NormFloor = T(1e-12);

template <typename T>
Tensor<T> l2_normalize_axis(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.ndim()) throw ShapeError(cat("l2_normalize_axis: axis ", axis, " of ", shape_str(a.shape())));
  auto plan = detail::make_reduce_plan(a.shape(), {axis});
  const auto& in = a.node()->data;
  std::vector<T> data(in.size());
  std::vector<T> norms(plan.n_out);
  detail::for_each_group(plan, [&](std::size_t g, std::size_t base) {
    T acc = 0;
    detail::for_each_red<T>(plan, base, [&](std::size_t off) { acc += in[off] * in[off]; });
    const T r = std::sqrt(acc);
    norms[g] = r;
    if (r <= kL2NormFloor<T>) {
      detail::for_each_red<T>(plan, base, [&](std::size_t off) { data[off] = T(0); });
    } else {
      detail::for_each_red<T>(plan, base, [&](std::size_t off) { data[off] = in[off] / r; });
    }
  });
  auto an = a.node();
  auto out_vals = data;
  return detail::make_op<T>(
      "l2_normalize_axis", a.shape(), std::move(data), {a},
      [an, plan, norms = std::move(norms), out_vals = std::move(out_vals)](detail::Node<T>& out) {
        if (!an->requires_grad) return;
        std::vector<T> g(an->data.size(), T(0));
        detail::for_each_group(plan, [&](std::size_t gi, std::size_t base) {
          const T r = norms[gi];
          if (r <= kL2NormFloor<T>) return;  // zero gradient on degenerate slices
          T dot = 0;
          detail::for_each_red<T>(plan, base,
                                  [&](std::size_t off) { dot += out.grad[off] * out_vals[off]; });
          detail::for_each_red<T>(plan, base, [&](std::size_t off) {
            g[off] = (out.grad[off] - out_vals[off] * dot) / r;
          });
        });
        detail::accumulate(*an, g);
      });
}

template <typename T>
Tensor<T> softmax_axes(const Tensor<T>& a, std::vector<std::size_t> axes) {
  detail::validate_axes("softmax_axes", a.shape(), axes);
  auto plan = detail::make_reduce_plan(a.shape(), axes);
  if (plan.n_red == 0) throw ShapeError("softmax_axes: empty reduction");
  const auto& in = a.node()->data;
  std::vector<T> data(in.size());
  detail::for_each_group(plan, [&](std::size_t, std::size_t base) {
    T mx = -std::numeric_limits<T>::infinity();
    detail::for_each_red<T>(plan, base, [&](std::size_t off) { mx = std::max(mx, in[off]); });
    T denom = 0;
    detail::for_each_red<T>(plan, base, [&](std::size_t off) {
      const T e = std::exp(in[off] - mx);
      data[off] = e;
      denom += e;
    });
    detail::for_each_red<T>(plan, base, [&](std::size_t off) { data[off] /= denom; });
  });
  auto an = a.node();
  auto out_vals = data;
  return detail::make_op<T>(
      "softmax_axes", a.shape(), std::move(data), {a},
      [an, plan, out_vals = std::move(out_vals)](detail::Node<T>& out) {
        if (!an->requires_grad) return;
        std::vector<T> g(an->data.size(), T(0));
        detail::for_each_group(plan, [&](std::size_t, std::size_t base) {
          T dot = 0;
          detail::for_each_red<T>(plan, base,
                                  [&](std::size_t off) { dot += out.grad[off] * out_vals[off]; });
          detail::for_each_red<T>(plan, base, [&](std::size_t off) {
            g[off] = out_vals[off] * (out.grad[off] - dot);
          });
        });
        detail::accumulate(*an, g);
      });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking (double precision).
// ---------------------------------------------------------------------------

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
inline double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                         const Tensor<double>& point, double eps = 1e-5) {
  Tensor<double> x = Tensor<double>::param(point.shape(), {point.data().begin(), point.data().end()});
  Tensor<double> y = f(x);
  if (y.numel() != 1) throw ShapeError("grad_check: f must return a scalar");
  auto table = backward(y);
  Tensor<double> analytic = table.grad_for(x);

  double max_err = 0.0;
  std::vector<double> base(point.data().begin(), point.data().end());
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto probe = [&](double v) {
      std::vector<double> vals = base;
      vals[i] = v;
      NoGradGuard ng;
      const double out = f(Tensor<double>::from_data(point.shape(), std::move(vals))).item();
      if (!std::isfinite(out)) throw NumericError("grad_check: non-finite f near point");
      return out;
    };
    const double fd = (probe(base[i] + eps) - probe(base[i] - eps)) / (2.0 * eps);
    const double a = analytic.data()[i];
    const double err = std::abs(a - fd) / std::max(1.0, std::abs(a));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace lewel
