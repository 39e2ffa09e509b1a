#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "duovid/error.hpp"
#include "duovid/tensor.hpp"

// Reverse-mode automatic differentiation over Tensor<T>.
//
// A Var is a shared handle to a graph node. Ops build new nodes that remember
// their inputs only when at least one input requires a gradient, so inference
// through frozen modules never retains a graph.

namespace duovid {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }

  // Gradient sink for input i, or nullptr when that input is not differentiable.
  T* sink(std::size_t i) {
    Node& in = *inputs[i];
    return in.requires_grad ? in.grad_buffer().data().data() : nullptr;
  }
  const T* in_value(std::size_t i) const { return inputs[i]->value.data().data(); }
  const T* out_grad() const { return grad.data().data(); }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  static Var leaf(Tensor<T> value, bool requires_grad) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return Var(std::move(node));
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor<T>& value() const& { return node_->value; }
  // A temporary Var may hold the last reference to its node.
  Tensor<T> value() && { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  bool has_grad() const { return node_->grad.shape() == node_->value.shape() && !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  void zero_grad() { node_->grad = Tensor<T>(); }

  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  std::size_t size() const { return node_->value.size(); }
  T item() const { return node_->value[0]; }

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// While a NoGradGuard is alive on this thread, ops record no graph.
inline bool& grad_mode_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_mode_enabled()) { grad_mode_enabled() = false; }
  ~NoGradGuard() { grad_mode_enabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T, class Backward>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs, Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  const bool any = grad_mode_enabled() &&
                   std::any_of(inputs.begin(), inputs.end(), [](const Var<T>& v) { return v.requires_grad(); });
  if (any) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward = std::forward<Backward>(backward);
  }
  return Var<T>(std::move(node));
}

// Accumulates d(root)/d(leaf) into every reachable leaf that requires a gradient.
template <class T>
void backward(const Var<T>& root) {
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer().fill(T{1});
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && node->grad.shape() == node->value.shape()) node->backward(*node);
  }
}

namespace kernel {

// C[M,N] += A[M,K] * B[K,N]
template <class T>
void gemm_nn(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T a = A[i * K + k];
      if (a == T{}) continue;
      const T* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <class T>
void gemm_nt(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* a = A + i * K;
    for (std::size_t j = 0; j < N; ++j) {
      const T* b = B + j * K;
      T acc{};
      for (std::size_t k = 0; k < K; ++k) acc += a[k] * b[k];
      C[i * N + j] += acc;
    }
  }
}

// C[P,Q] += A[M,P]^T * B[M,Q]
template <class T>
void gemm_tn(std::size_t M, std::size_t P, std::size_t Q, const T* A, const T* B, T* C) {
  for (std::size_t m = 0; m < M; ++m) {
    const T* a = A + m * P;
    const T* b = B + m * Q;
    for (std::size_t p = 0; p < P; ++p) {
      const T av = a[p];
      if (av == T{}) continue;
      T* c = C + p * Q;
      for (std::size_t q = 0; q < Q; ++q) c[q] += av * b[q];
    }
  }
}

}  // namespace kernel

namespace ops {

namespace detail {

inline void expect_rank(const Shape& s, std::size_t rank, const char* op) {
  require(s.size() == rank, ErrorKind::shape_mismatch,
          std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
}

}  // namespace detail

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::expect_rank(a.shape(), 2, "matmul");
  detail::expect_rank(b.shape(), 2, "matmul");
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  require(b.dim(0) == K, ErrorKind::shape_mismatch, "matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor<T> out({M, N});
  kernel::gemm_nn(M, K, N, a.value().data().data(), b.value().data().data(), out.data().data());
  return make_op(std::move(out), {a, b}, [M, K, N](Node<T>& self) {
    if (T* da = self.sink(0)) kernel::gemm_nt(M, N, K, self.out_grad(), self.in_value(1), da);
    if (T* db = self.sink(1)) kernel::gemm_tn(M, K, N, self.in_value(0), self.out_grad(), db);
  });
}

// a[M,K] * b[N,K]^T
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  detail::expect_rank(a.shape(), 2, "matmul_nt");
  detail::expect_rank(b.shape(), 2, "matmul_nt");
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(0);
  require(b.dim(1) == K, ErrorKind::shape_mismatch, "matmul_nt " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  Tensor<T> out({M, N});
  kernel::gemm_nt(M, K, N, a.value().data().data(), b.value().data().data(), out.data().data());
  return make_op(std::move(out), {a, b}, [M, K, N](Node<T>& self) {
    if (T* da = self.sink(0)) kernel::gemm_nn(M, N, K, self.out_grad(), self.in_value(1), da);
    if (T* db = self.sink(1)) kernel::gemm_tn(M, N, K, self.out_grad(), self.in_value(0), db);
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), ErrorKind::shape_mismatch, "add " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const std::size_t n = out.size();
  return make_op(std::move(out), {a, b}, [n](Node<T>& self) {
    const T* g = self.out_grad();
    for (std::size_t k = 0; k < 2; ++k)
      if (T* d = self.sink(k))
        for (std::size_t i = 0; i < n; ++i) d[i] += g[i];
  });
}

// a[..., N] + b[N], broadcasting b over the leading axes.
template <class T>
Var<T> add_row(const Var<T>& a, const Var<T>& b) {
  detail::expect_rank(b.shape(), 1, "add_row");
  const std::size_t N = b.dim(0);
  require(a.shape().back() == N, ErrorKind::shape_mismatch, "add_row " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  const std::size_t rows = out.size() / N;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < N; ++j) out[r * N + j] += b.value()[j];
  return make_op(std::move(out), {a, b}, [rows, N](Node<T>& self) {
    const T* g = self.out_grad();
    if (T* da = self.sink(0))
      for (std::size_t i = 0; i < rows * N; ++i) da[i] += g[i];
    if (T* db = self.sink(1))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < N; ++j) db[j] += g[r * N + j];
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), ErrorKind::shape_mismatch, "mul " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t n = out.size();
  return make_op(std::move(out), {a, b}, [n](Node<T>& self) {
    const T* g = self.out_grad();
    if (T* da = self.sink(0)) {
      const T* bv = self.in_value(1);
      for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * bv[i];
    }
    if (T* db = self.sink(1)) {
      const T* av = self.in_value(0);
      for (std::size_t i = 0; i < n; ++i) db[i] += g[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= factor;
  const std::size_t n = out.size();
  return make_op(std::move(out), {a}, [n, factor](Node<T>& self) {
    const T* g = self.out_grad();
    if (T* d = self.sink(0))
      for (std::size_t i = 0; i < n; ++i) d[i] += factor * g[i];
  });
}

// Tanh-approximated GELU.
template <class T>
Var<T> gelu(const Var<T>& a) {
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = static_cast<T>(0.044715);
  Tensor<T> out = a.value();
  for (auto& x : out.data()) x = T{0.5} * x * (T{1} + std::tanh(c * (x + k * x * x * x)));
  const std::size_t n = out.size();
  return make_op(std::move(out), {a}, [n](Node<T>& self) {
    T* d = self.sink(0);
    if (!d) return;
    const T* xs = self.in_value(0);
    const T* g = self.out_grad();
    for (std::size_t i = 0; i < n; ++i) {
      const T x = xs[i];
      const T t = std::tanh(c * (x + k * x * x * x));
      const T dt = c * (T{1} + T{3} * k * x * x);
      d[i] += g[i] * (T{0.5} * (T{1} + t) + T{0.5} * x * (T{1} - t * t) * dt);
    }
  });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  const std::size_t n = out.size();
  return make_op(std::move(out), {a}, [n](Node<T>& self) {
    const T* g = self.out_grad();
    if (T* d = self.sink(0))
      for (std::size_t i = 0; i < n; ++i) d[i] += g[i];
  });
}

// Row-wise layer normalization of x[M,D] with affine gamma[D], beta[D].
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  detail::expect_rank(x.shape(), 2, "layer_norm");
  const std::size_t M = x.dim(0), D = x.dim(1);
  require(gamma.shape() == Shape{D} && beta.shape() == Shape{D}, ErrorKind::shape_mismatch, "layer_norm affine width");
  Tensor<T> out({M, D});
  std::vector<T> xhat(M * D), rstd(M);
  const T* xv = x.value().data().data();
  for (std::size_t i = 0; i < M; ++i) {
    T mu{};
    for (std::size_t j = 0; j < D; ++j) mu += xv[i * D + j];
    mu /= static_cast<T>(D);
    T var{};
    for (std::size_t j = 0; j < D; ++j) var += (xv[i * D + j] - mu) * (xv[i * D + j] - mu);
    var /= static_cast<T>(D);
    rstd[i] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < D; ++j) {
      xhat[i * D + j] = (xv[i * D + j] - mu) * rstd[i];
      out[i * D + j] = xhat[i * D + j] * gamma.value()[j] + beta.value()[j];
    }
  }
  return make_op(std::move(out), {x, gamma, beta}, [M, D, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
    const T* g = self.out_grad();
    const T* gm = self.in_value(1);
    if (T* dg = self.sink(1))
      for (std::size_t i = 0; i < M * D; ++i) dg[i % D] += g[i] * xhat[i];
    if (T* db = self.sink(2))
      for (std::size_t i = 0; i < M * D; ++i) db[i % D] += g[i];
    if (T* dx = self.sink(0)) {
      for (std::size_t i = 0; i < M; ++i) {
        T mean_dxhat{}, mean_dxhat_xhat{};
        for (std::size_t j = 0; j < D; ++j) {
          const T dxh = g[i * D + j] * gm[j];
          mean_dxhat += dxh;
          mean_dxhat_xhat += dxh * xhat[i * D + j];
        }
        mean_dxhat /= static_cast<T>(D);
        mean_dxhat_xhat /= static_cast<T>(D);
        for (std::size_t j = 0; j < D; ++j) {
          const T dxh = g[i * D + j] * gm[j];
          dx[i * D + j] += rstd[i] * (dxh - mean_dxhat - xhat[i * D + j] * mean_dxhat_xhat);
        }
      }
    }
  });
}

// Softmax over each row of x[M,N]. With `causal`, column j of row i is masked
// out (probability exactly zero) whenever j > i.
template <class T>
Var<T> softmax_rows(const Var<T>& x, bool causal = false) {
  detail::expect_rank(x.shape(), 2, "softmax_rows");
  const std::size_t M = x.dim(0), N = x.dim(1);
  Tensor<T> out({M, N});
  const T* xv = x.value().data().data();
  for (std::size_t i = 0; i < M; ++i) {
    const std::size_t valid = causal ? std::min(N, i + 1) : N;
    T mx = xv[i * N];
    for (std::size_t j = 1; j < valid; ++j) mx = std::max(mx, xv[i * N + j]);
    T sum{};
    for (std::size_t j = 0; j < valid; ++j) sum += (out[i * N + j] = std::exp(xv[i * N + j] - mx));
    for (std::size_t j = 0; j < valid; ++j) out[i * N + j] /= sum;
  }
  return make_op(std::move(out), {x}, [M, N](Node<T>& self) {
    T* dx = self.sink(0);
    if (!dx) return;
    const T* y = self.value.data().data();
    const T* g = self.out_grad();
    for (std::size_t i = 0; i < M; ++i) {
      T dot{};
      for (std::size_t j = 0; j < N; ++j) dot += y[i * N + j] * g[i * N + j];
      for (std::size_t j = 0; j < N; ++j) dx[i * N + j] += y[i * N + j] * (g[i * N + j] - dot);
    }
  });
}

// Columns [start, start + count) of x[M,N].
template <class T>
Var<T> slice_cols(const Var<T>& x, std::size_t start, std::size_t count) {
  detail::expect_rank(x.shape(), 2, "slice_cols");
  const std::size_t M = x.dim(0), N = x.dim(1);
  require(start + count <= N, ErrorKind::invalid_argument, "slice_cols out of range");
  Tensor<T> out({M, count});
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x.value()[i * N + start + j];
  return make_op(std::move(out), {x}, [M, N, start, count](Node<T>& self) {
    T* dx = self.sink(0);
    if (!dx) return;
    const T* g = self.out_grad();
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < count; ++j) dx[i * N + start + j] += g[i * count + j];
  });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), ErrorKind::invalid_argument, "concat_cols of nothing");
  const std::size_t M = parts[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t N = 0;
  for (const auto& p : parts) {
    detail::expect_rank(p.shape(), 2, "concat_cols");
    require(p.dim(0) == M, ErrorKind::shape_mismatch, "concat_cols row mismatch");
    widths.push_back(p.dim(1));
    N += p.dim(1);
  }
  Tensor<T> out({M, N});
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * N + col + j] = parts[k].value()[i * widths[k] + j];
    col += widths[k];
  }
  return make_op(std::move(out), parts, [M, N, widths](Node<T>& self) {
    const T* g = self.out_grad();
    std::size_t c = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (T* d = self.sink(k))
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) d[i * widths[k] + j] += g[i * N + c + j];
      c += widths[k];
    }
  });
}

// Entries [start, start + count) along axis 0, any rank.
template <class T>
Var<T> slice_rows(const Var<T>& x, std::size_t start, std::size_t count) {
  Tensor<T> out = slice_front(x.value(), start, count);
  const std::size_t stride = x.size() / std::max<std::size_t>(x.dim(0), 1);
  return make_op(std::move(out), {x}, [start, count, stride](Node<T>& self) {
    T* dx = self.sink(0);
    if (!dx) return;
    const T* g = self.out_grad();
    for (std::size_t i = 0; i < count * stride; ++i) dx[start * stride + i] += g[i];
  });
}

// Concatenation along axis 0; trailing dimensions must agree.
template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), ErrorKind::invalid_argument, "concat_rows of nothing");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::vector<std::size_t> sizes;
  std::size_t rows = 0;
  std::vector<T> data;
  for (const auto& p : parts) {
    require(Shape(p.shape().begin() + 1, p.shape().end()) == tail, ErrorKind::shape_mismatch,
            "concat_rows trailing shape " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    rows += p.dim(0);
    sizes.push_back(p.size());
    data.insert(data.end(), p.value().storage().begin(), p.value().storage().end());
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return make_op(Tensor<T>(std::move(shape), std::move(data)), parts, [sizes](Node<T>& self) {
    const T* g = self.out_grad();
    std::size_t off = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      if (T* d = self.sink(k))
        for (std::size_t i = 0; i < sizes[k]; ++i) d[i] += g[off + i];
      off += sizes[k];
    }
  });
}

// Rows of table[V,D] selected by ids.
template <class T>
Var<T> embedding(const Var<T>& table, std::span<const int> ids) {
  detail::expect_rank(table.shape(), 2, "embedding");
  const std::size_t V = table.dim(0), D = table.dim(1);
  Tensor<T> out({ids.size(), D});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < V, ErrorKind::invalid_argument,
            "token id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(V));
    std::copy_n(table.value().data().data() + static_cast<std::size_t>(ids[i]) * D, D, out.data().data() + i * D);
  }
  std::vector<int> rows(ids.begin(), ids.end());
  return make_op(std::move(out), {table}, [D, rows = std::move(rows)](Node<T>& self) {
    T* dt = self.sink(0);
    if (!dt) return;
    const T* g = self.out_grad();
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < D; ++j) dt[static_cast<std::size_t>(rows[i]) * D + j] += g[i * D + j];
  });
}

template <class T>
Var<T> sum(const Var<T>& x) {
  long double acc = 0;
  for (T v : x.value().data()) acc += v;
  const std::size_t n = x.size();
  return make_op(Tensor<T>({1}, {static_cast<T>(acc)}), {x}, [n](Node<T>& self) {
    const T g = self.grad[0];
    if (T* d = self.sink(0))
      for (std::size_t i = 0; i < n; ++i) d[i] += g;
  });
}

// Scalar <x, weights> against a constant weight tensor of the same shape.
template <class T>
Var<T> dot_const(const Var<T>& x, const Tensor<T>& weights) {
  require(x.shape() == weights.shape(), ErrorKind::shape_mismatch, "dot_const shape");
  long double acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += static_cast<long double>(x.value()[i]) * weights[i];
  return make_op(Tensor<T>({1}, {static_cast<T>(acc)}), {x}, [weights](Node<T>& self) {
    const T g = self.grad[0];
    if (T* d = self.sink(0))
      for (std::size_t i = 0; i < weights.size(); ++i) d[i] += g * weights[i];
  });
}

}  // namespace ops

}  // namespace duovid
