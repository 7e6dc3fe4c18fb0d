#pragma once

// Dense row-major tensors with tape-free reverse-mode autodiff.
//
// Every op returns a new Tensor whose node remembers its parents and a
// backward closure. backward() walks the reachable subgraph in reverse
// topological order, accumulates gradients into leaf nodes and releases the
// interior graph.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace whc {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t id = detail::next_node_id();
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::span<T> ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }

  static Tensor from_node(std::shared_ptr<Node<T>> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rows() const { return rank() == 1 ? 1 : node_->shape.front(); }
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const T> data() const { return node_->value; }
  /// Direct write access; only for initialization and optimizer updates.
  std::span<T> mutable_data() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  T at(std::size_t i) const { return node_->value.at(i); }
  T at(std::size_t r, std::size_t c) const { return node_->value.at(r * cols() + c); }

  bool requires_grad() const { return node_->requires_grad; }
  /// Leaves only. Frozen leaves are not recorded into new graphs.
  void set_requires_grad(bool on) {
    if (!is_leaf()) throw Error("set_requires_grad on a non-leaf tensor");
    node_->requires_grad = on;
  }
  std::uint64_t id() const { return node_->id; }
  bool is_leaf() const { return !node_->backward_fn; }

  /// Deep copy of the values as a fresh leaf.
  Tensor clone(bool requires_grad) const {
    return Tensor(shape(), node_->value, requires_grad);
  }
  /// Same values, detached from the graph.
  Tensor detach() const { return clone(false); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Parameter node_id -> gradient of identical shape.
template <typename T>
using GradientMap = std::map<std::uint64_t, Tensor<T>>;

namespace detail {

/// Builds a result tensor; the backward closure runs only if some parent
/// requires a gradient.
template <typename T, typename F>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::vector<Tensor<T>> parents, F&& backward) {
  Tensor<T> out(std::move(shape), std::move(value));
  bool track = false;
  if (grad_mode()) {
    for (auto& p : parents)
      if (p.requires_grad()) track = true;
  }
  if (track) {
    auto& n = *out.node();
    n.requires_grad = true;
    for (auto& p : parents) n.parents.push_back(p.node());
    n.backward_fn = std::forward<F>(backward);
  }
  return out;
}

template <typename T>
std::span<T> grad_of(Node<T>& self, std::size_t parent) {
  auto& p = *self.parents[parent];
  if (!p.requires_grad) return {};
  return p.ensure_grad();
}

template <typename T>
void check_finite(std::span<const T> v, const char* op) {
  for (T x : v)
    if (!std::isfinite(x)) throw NonFiniteError(std::string(op) + ": non-finite input");
}

// C[rows x n] += A * B[k x n] where A(r, p) = a[r * rs + p * cs]. Each output
// element sums its k products in order, so results match the naive loop.
template <typename T>
void gemm_strided(const T* __restrict a, std::size_t rs, std::size_t cs,
                  const T* __restrict b, T* __restrict c, std::size_t rows,
                  std::size_t k, std::size_t n) {
  typedef T Vec __attribute__((vector_size(64)));
  constexpr std::size_t L = 64 / sizeof(T), R = 8, NV = 1, W = NV * L;
  const std::size_t nw = n / W * W;
  std::size_t i = 0;
  for (; i + R <= rows; i += R) {
    for (std::size_t j = 0; j < nw; j += W) {
      Vec acc[R][NV];
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t v = 0; v < NV; ++v) std::memcpy(&acc[r][v], c + (i + r) * n + j + v * L, 64);
      for (std::size_t p = 0; p < k; ++p) {
        Vec bv[NV];
        for (std::size_t v = 0; v < NV; ++v) std::memcpy(&bv[v], b + p * n + j + v * L, 64);
        for (std::size_t r = 0; r < R; ++r) {
          const T av = a[(i + r) * rs + p * cs];
          for (std::size_t v = 0; v < NV; ++v) acc[r][v] += av * bv[v];
        }
      }
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t v = 0; v < NV; ++v) std::memcpy(c + (i + r) * n + j + v * L, &acc[r][v], 64);
    }
  }
  // Remainder columns of the blocked rows, then the leftover rows.
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t j0 = r < i ? nw : 0;
    if (j0 == n) continue;
    T* crow = c + r * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[r * rs + p * cs];
      const T* brow = b + p * n;
      for (std::size_t j = j0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm_strided(a, k, 1, b, c, m, k, n);
}

// out[n x m] = in[m x n]^T
template <typename T>
void transpose(const T* __restrict in, T* __restrict out, std::size_t m,
               std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
}

// C[k x n] += A[m x k]^T * B[m x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm_strided(a, 1, k, b, c, k, m, n);
}

// C[m x k] += A[m x n] * B[k x n]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n) {
  std::vector<T> bt(n * k);
  transpose(b, bt.data(), k, n);
  gemm_nn(a, bt.data(), c, m, n, k);
}

enum class Broadcast { same, row, scalar };

template <typename T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::same;
  if (b.numel() == 1) return Broadcast::scalar;
  if (b.rank() == 1 && a.rank() >= 1 && b.dim(0) == a.cols()) return Broadcast::row;
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) +
                   " onto " + shape_str(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a[..., m, k] x b[..., k, n]; leading dimensions must match exactly, or b
/// may be rank 2 and is shared across the batch.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.dim(a.rank() - 1) != b.dim(b.rank() - 2)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(a.rank() - 2), k = a.cols(), n = b.cols();
  Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  const bool shared_b = lead_b.empty();
  if (!shared_b && lead_a != lead_b) {
    throw ShapeError("matmul: batch dimensions differ " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  const std::size_t batch = shape_numel(lead_a);
  Shape out_shape = lead_a;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(batch * m * n, T(0));
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (std::size_t s = 0; s < batch; ++s) {
    detail::gemm_nn(ad + s * m * k, bd + (shared_b ? 0 : s * k * n), out.data() + s * m * n,
                    m, k, n);
  }
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {a, b},
      [m, k, n, batch, shared_b](Node<T>& self) {
        const T* g = self.grad.data();
        const T* av = self.parents[0]->value.data();
        const T* bv = self.parents[1]->value.data();
        auto ga = detail::grad_of(self, 0);
        auto gb = detail::grad_of(self, 1);
        std::vector<T> bt;
        for (std::size_t s = 0; s < batch; ++s) {
          const T* bs = bv + (shared_b ? 0 : s * k * n);
          if (!ga.empty()) {
            bt.resize(n * k);
            detail::transpose(bs, bt.data(), k, n);
            detail::gemm_nn(g + s * m * n, bt.data(), ga.data() + s * m * k, m, n, k);
          }
          if (!gb.empty()) {
            detail::gemm_tn(av + s * m * k, g + s * m * n,
                            gb.data() + (shared_b ? 0 : s * k * n), m, k, n);
          }
        }
      });
}

/// a[m x k] x b[n x k]^T -> [m x n].
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.cols(), n = b.dim(0);
  std::vector<T> out(m * n, T(0));
  detail::gemm_nt(a.data().data(), b.data().data(), out.data(), m, n, k);
  return detail::make_result<T>(
      {m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
        const T* g = self.grad.data();
        auto ga = detail::grad_of(self, 0);
        auto gb = detail::grad_of(self, 1);
        // dA[m x k] = G[m x n] B[n x k]
        if (!ga.empty()) detail::gemm_nn(g, self.parents[1]->value.data(), ga.data(), m, n, k);
        // dB[n x k] = G^T[n x m] A[m x k]
        if (!gb.empty()) detail::gemm_tn(g, self.parents[0]->value.data(), gb.data(), m, n, k);
      });
}

// ---------------------------------------------------------------------------
// Elementwise

/// a + b where b has a's shape, is a last-dimension vector, or has one element.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const auto kind = detail::broadcast_kind(a, b, "add");
  const std::size_t n = a.numel(), c = std::max<std::size_t>(b.numel(), 1);
  std::vector<T> out(a.data().begin(), a.data().end());
  const T* bv = b.data().data();
  switch (kind) {
    case detail::Broadcast::same:
      for (std::size_t i = 0; i < n; ++i) out[i] += bv[i];
      break;
    case detail::Broadcast::row:
      for (std::size_t i = 0; i < n; i += c)
        for (std::size_t j = 0; j < c; ++j) out[i + j] += bv[j];
      break;
    case detail::Broadcast::scalar:
      for (auto& x : out) x += bv[0];
      break;
  }
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [kind, n, c](Node<T>& self) {
    const T* g = self.grad.data();
    auto ga = detail::grad_of(self, 0);
    auto gb = detail::grad_of(self, 1);
    if (!ga.empty())
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    if (gb.empty()) return;
    switch (kind) {
      case detail::Broadcast::same:
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
        break;
      case detail::Broadcast::row:
        for (std::size_t i = 0; i < n; i += c)
          for (std::size_t j = 0; j < c; ++j) gb[j] += g[i + j];
        break;
      case detail::Broadcast::scalar: {
        T s = 0;
        for (std::size_t i = 0; i < n; ++i) s += g[i];
        gb[0] += s;
        break;
      }
    }
  });
}

/// a * b with the same broadcasting rules as add().
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto kind = detail::broadcast_kind(a, b, "mul");
  const std::size_t n = a.numel(), c = std::max<std::size_t>(b.numel(), 1);
  std::vector<T> out(n);
  const T* av = a.data().data();
  const T* bv = b.data().data();
  auto bidx = [kind, c](std::size_t i) {
    switch (kind) {
      case detail::Broadcast::same: return i;
      case detail::Broadcast::row: return i % c;
      default: return std::size_t{0};
    }
  };
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[bidx(i)];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [n, bidx](Node<T>& self) {
    const T* g = self.grad.data();
    const T* av = self.parents[0]->value.data();
    const T* bv = self.parents[1]->value.data();
    auto ga = detail::grad_of(self, 0);
    auto gb = detail::grad_of(self, 1);
    if (!ga.empty())
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[bidx(i)];
    if (!gb.empty())
      for (std::size_t i = 0; i < n; ++i) gb[bidx(i)] += g[i] * av[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& x : out) x *= s;
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [s](Node<T>& self) {
    auto ga = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * s;
  });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.data()[i]);
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
    auto ga = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const T y = self.value[i];
      ga[i] += self.grad[i] * (T(1) - y * y);
    }
  });
}

/// GELU, tanh approximation:
///   gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T kAlpha = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kBeta = T(0.044715);
  std::vector<T> out(a.numel());
  const T* x = a.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T u = kAlpha * (x[i] + kBeta * x[i] * x[i] * x[i]);
    out[i] = T(0.5) * x[i] * (T(1) + std::tanh(u));
  }
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
    auto ga = detail::grad_of(self, 0);
    const T* x = self.parents[0]->value.data();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const T x2 = x[i] * x[i];
      const T th = std::tanh(kAlpha * (x[i] + kBeta * x2 * x[i]));
      const T du = kAlpha * (T(1) + T(3) * kBeta * x2);
      const T d = T(0.5) * (T(1) + th) + T(0.5) * x[i] * (T(1) - th * th) * du;
      ga[i] += self.grad[i] * d;
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and normalization

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T x : a.data()) s += x;
  return detail::make_result<T>({1}, {s}, {a}, [](Node<T>& self) {
    auto ga = detail::grad_of(self, 0);
    for (auto& g : ga) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Mean of rows [start, start+len) of a 2-D tensor -> [cols].
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& a, std::size_t start, std::size_t len) {
  if (a.rank() != 2 || len == 0 || start + len > a.dim(0)) {
    throw ShapeError("mean_rows: range [" + std::to_string(start) + ", +" +
                     std::to_string(len) + ") outside " + shape_str(a.shape()));
  }
  const std::size_t c = a.cols();
  std::vector<T> out(c, T(0));
  const T inv = T(1) / static_cast<T>(len);
  for (std::size_t r = start; r < start + len; ++r)
    for (std::size_t j = 0; j < c; ++j) out[j] += a.data()[r * c + j];
  for (auto& x : out) x *= inv;
  return detail::make_result<T>({c}, std::move(out), {a}, [start, len, c, inv](Node<T>& self) {
    auto ga = detail::grad_of(self, 0);
    for (std::size_t r = start; r < start + len; ++r)
      for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += self.grad[j] * inv;
  });
}

/// Softmax over the last dimension, max-subtracted.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& a) {
  if (a.rank() == 0 || a.cols() == 0) throw ShapeError("softmax: empty last dimension");
  detail::check_finite(a.data(), "softmax");
  const std::size_t c = a.cols(), rows = a.numel() / c;
  std::vector<T> out(a.numel());
  const T* x = a.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * c;
    T* yr = out.data() + r * c;
    const T mx = *std::max_element(xr, xr + c);
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      z += yr[j];
    }
    const T inv = T(1) / z;
    for (std::size_t j = 0; j < c; ++j) yr[j] *= inv;
  }
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [c, rows](Node<T>& self) {
    auto ga = detail::grad_of(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * c;
      const T* g = self.grad.data() + r * c;
      T dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += y[j] * (g[j] - dot);
    }
  });
}

/// Layer normalization over the last dimension.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  if (!(eps > 0)) throw Error("layer_norm: eps must be positive");
  const std::size_t d = x.cols();
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: affine parameters " + shape_str(gamma.shape()) +
                     " do not match width " + std::to_string(d));
  }
  const std::size_t rows = d ? x.numel() / d : 0;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  const T* xv = x.data().data();
  const T* gv = gamma.data().data();
  const T* bv = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        auto gx = detail::grad_of(self, 0);
        auto gg = detail::grad_of(self, 1);
        auto gb = detail::grad_of(self, 2);
        const T* gamma = self.parents[1]->value.data();
        std::vector<T> dh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* g = self.grad.data() + r * d;
          const T* h = xhat.data() + r * d;
          if (!gg.empty())
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[j] * h[j];
          if (!gb.empty())
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[j];
          if (gx.empty()) continue;
          T mean_dh = 0, mean_dh_h = 0;
          for (std::size_t j = 0; j < d; ++j) {
            dh[j] = g[j] * gamma[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * h[j];
          }
          mean_dh /= static_cast<T>(d);
          mean_dh_h /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j)
            gx[r * d + j] += inv_std[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
        }
      });
}

// ---------------------------------------------------------------------------
// Structural ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  return detail::make_result<T>(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()),
                                {a}, [](Node<T>& self) {
                                  auto ga = detail::grad_of(self, 0);
                                  for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
                                });
}

/// Concatenation along `axis`; all other dimensions must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_str(ref));
  if (parts.size() == 1) return parts.front();
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i)
      if (i != axis && s[i] != ref[i]) ok = false;
    if (!ok) {
      throw ShapeError("concat: ragged shapes " + shape_str(ref) + " and " + shape_str(s) +
                       " off axis " + std::to_string(axis));
    }
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  Shape out_shape = ref;
  out_shape[axis] = total;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.shape()[axis] * inner);
  const std::size_t row = total * inner;
  std::vector<T> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const T* src = parts[k].data().data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src + o * widths[k], widths[k], out.data() + o * row + offset);
    offset += widths[k];
  }
  return detail::make_result<T>(std::move(out_shape), std::move(out), parts,
                                [outer, row, widths](Node<T>& self) {
                                  std::size_t offset = 0;
                                  for (std::size_t k = 0; k < widths.size(); ++k) {
                                    auto gp = detail::grad_of(self, k);
                                    if (!gp.empty()) {
                                      for (std::size_t o = 0; o < outer; ++o)
                                        for (std::size_t j = 0; j < widths[k]; ++j)
                                          gp[o * widths[k] + j] += self.grad[o * row + offset + j];
                                    }
                                    offset += widths[k];
                                  }
                                });
}

/// Sub-range [start, start+len) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
  const Shape& s = a.shape();
  if (axis >= s.size() || start + len > s[axis]) {
    throw ShapeError("slice: [" + std::to_string(start) + ", +" + std::to_string(len) +
                     ") out of range on axis " + std::to_string(axis) + " of " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t src_row = s[axis] * inner, dst_row = len * inner, off = start * inner;
  Shape out_shape = s;
  out_shape[axis] = len;
  std::vector<T> out(outer * dst_row);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(a.data().data() + o * src_row + off, dst_row, out.data() + o * dst_row);
  return detail::make_result<T>(std::move(out_shape), std::move(out), {a},
                                [outer, src_row, dst_row, off](Node<T>& self) {
                                  auto ga = detail::grad_of(self, 0);
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t j = 0; j < dst_row; ++j)
                                      ga[o * src_row + off + j] += self.grad[o * dst_row + j];
                                });
}

/// Row gather: out[i] = table[ids[i]].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be 2-D");
  const std::size_t v = table.dim(0), d = table.cols();
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw Error("embedding: token id " + std::to_string(ids[i]) +
                  " outside vocabulary of size " + std::to_string(v));
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  return detail::make_result<T>({ids.size(), d}, std::move(out), {table},
                                [idv = std::move(idv), d](Node<T>& self) {
                                  auto gt = detail::grad_of(self, 0);
                                  for (std::size_t i = 0; i < idv.size(); ++i) {
                                    T* dst = gt.data() + static_cast<std::size_t>(idv[i]) * d;
                                    const T* src = self.grad.data() + i * d;
                                    for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Loss

/// Mean over rows of -log softmax(logits)[target].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(targets.size()) + " targets");
  }
  const std::size_t n = logits.dim(0), c = logits.cols();
  for (auto t : targets)
    if (t >= c) {
      throw Error("cross_entropy: target " + std::to_string(t) + " out of range for " +
                  std::to_string(c) + " classes");
    }
  detail::check_finite(logits.data(), "cross_entropy");
  std::vector<T> probs(n * c);
  T loss = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const T* x = logits.data().data() + r * c;
    const T mx = *std::max_element(x, x + c);
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[r * c + j] = std::exp(x[j] - mx);
      z += probs[r * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= z;
    loss += -(x[targets[r]] - mx - std::log(z));
  }
  loss /= static_cast<T>(n);
  std::vector<std::size_t> tv(targets.begin(), targets.end());
  return detail::make_result<T>({1}, {loss}, {logits},
                                [n, c, tv = std::move(tv), probs = std::move(probs)](Node<T>& self) {
                                  auto gl = detail::grad_of(self, 0);
                                  const T g = self.grad[0] / static_cast<T>(n);
                                  for (std::size_t r = 0; r < n; ++r)
                                    for (std::size_t j = 0; j < c; ++j)
                                      gl[r * c + j] +=
                                          g * (probs[r * c + j] - (j == tv[r] ? T(1) : T(0)));
                                });
}

// ---------------------------------------------------------------------------
// Backward

/// Reverse sweep from a scalar loss. Leaf gradients accumulate; the interior
/// graph reachable from `loss` is released afterwards. Returns the gradient of
/// every leaf reached.
template <typename T>
GradientMap<T> backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  GradientMap<T> result;
  if (!loss.requires_grad()) return result;
  std::vector<Node<T>*> order;
  std::vector<std::shared_ptr<Node<T>>> leaves;
  std::unordered_set<Node<T>*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward_fn) {
      node->ensure_grad();
      node->backward_fn(*node);
    }
  }
  for (Node<T>* node : order) {
    if (!node->backward_fn) {
      Tensor<T> g(node->shape, node->grad.empty() ? std::vector<T>(node->value.size(), T(0))
                                                   : node->grad);
      result.emplace(node->id, std::move(g));
    }
  }
  // Release the interior graph; leaves keep their accumulated gradients.
  for (Node<T>* node : order) {
    if (node->backward_fn) {
      node->backward_fn = nullptr;
      node->grad.clear();
      node->grad.shrink_to_fit();
      node->parents.clear();
    }
  }
  return result;
}

/// backward() restricted to `params`; parameters off the loss path get zeros.
template <typename T>
GradientMap<T> backward(const Tensor<T>& loss, std::span<const Tensor<T>> params) {
  auto reached = backward(loss);
  GradientMap<T> out;
  for (const auto& p : params) {
    auto it = reached.find(p.id());
    out.emplace(p.id(), it != reached.end() ? it->second : Tensor<T>::zeros(p.shape()));
  }
  return out;
}

}  // namespace whc
