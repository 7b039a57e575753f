#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "tracformer/error.hpp"
#include "tracformer/masks.hpp"
#include "tracformer/rng.hpp"

namespace tracformer {

template <typename S>
class Tape;

// Dense row-major tensor. Storage is shared between copies; ops never write
// through their inputs. `tape`/`slot` tie a value to the gradient tape that
// recorded it (slot -1 = untracked).
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape)
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<S>>(checked_numel(shape_), S{0})) {}

  Tensor(std::vector<int> shape, std::vector<S> values) : shape_(std::move(shape)) {
    if (values.size() != checked_numel(shape_)) throw ShapeError("Tensor: value count does not match shape");
    data_ = std::make_shared<std::vector<S>>(std::move(values));
  }

  static Tensor scalar(S v) { return Tensor({1}, {v}); }

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  size_t size() const { return data_ ? data_->size() : 0; }
  bool defined() const { return static_cast<bool>(data_); }

  S* data() { return data_->data(); }
  const S* data() const { return data_->data(); }

  S& operator[](size_t i) { return (*data_)[i]; }
  const S& operator[](size_t i) const { return (*data_)[i]; }

  S& operator()(int i, int j) { return (*data_)[static_cast<size_t>(i) * dim(1) + j]; }
  const S& operator()(int i, int j) const { return (*data_)[static_cast<size_t>(i) * dim(1) + j]; }

  std::shared_ptr<std::vector<S>> storage() const { return data_; }

  // rows = product of all dims but the last
  int rows() const {
    size_t r = 1;
    for (int i = 0; i + 1 < ndim(); ++i) r *= static_cast<size_t>(dim(i));
    return static_cast<int>(r);
  }
  int cols() const { return ndim() == 0 ? 0 : dim(ndim() - 1); }

  Tape<S>* tape = nullptr;
  int slot = -1;

 private:
  static size_t checked_numel(const std::vector<int>& shape) {
    if (shape.empty()) throw ShapeError("Tensor: empty shape");
    size_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw ShapeError("Tensor: non-positive dimension");
      n *= static_cast<size_t>(d);
    }
    return n;
  }

  std::vector<int> shape_;
  std::shared_ptr<std::vector<S>> data_;
};

// Reverse-mode gradient tape. Ops append nodes in execution order (which is
// topological); backward() replays them once in reverse. Gradients accumulate
// additively across fan-out.
template <typename S>
class Tape {
 public:
  int new_slot(size_t size) {
    slots_.push_back(Slot{size, {}});
    return static_cast<int>(slots_.size()) - 1;
  }

  // Register a leaf (parameter) so ops report gradients into it. Lookup is
  // by storage address, which keeps the tensors themselves immutable and
  // shareable across threads.
  void watch(const Tensor<S>& t) {
    watched_[static_cast<const void*>(t.data())] = new_slot(t.size());
  }

  int slot_of(const Tensor<S>& t) const {
    if (t.tape == this && t.slot >= 0) return t.slot;
    auto it = watched_.find(static_cast<const void*>(t.data()));
    return it == watched_.end() ? -1 : it->second;
  }

  // Gradient buffer, allocated (zero-filled) on first touch.
  std::vector<S>& grad_buffer(int slot) {
    Slot& s = slots_[static_cast<size_t>(slot)];
    if (s.grad.empty()) s.grad.assign(s.size, S{0});
    return s.grad;
  }

  // Read-only view; empty vector means "never contributed to" (i.e. zero).
  const std::vector<S>& grad_if_any(int slot) const { return slots_[static_cast<size_t>(slot)].grad; }

  void add_node(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

  void backward(const Tensor<S>& loss) {
    if (loss.size() != 1) throw DomainError("backward: loss must be a scalar");
    const int ls = slot_of(loss);
    if (ls < 0) throw DomainError("backward: loss is not recorded on this tape");
    grad_buffer(ls).assign(1, S{1});
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  // Gradient of a watched/recorded tensor, shaped like it (zeros if unused).
  Tensor<S> grad(const Tensor<S>& t) const {
    const int s = slot_of(t);
    if (s < 0) throw DomainError("grad: tensor is not tracked by this tape");
    const auto& g = grad_if_any(s);
    Tensor<S> out(t.shape());
    if (!g.empty()) std::copy(g.begin(), g.end(), out.data());
    return out;
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Slot {
    size_t size;
    std::vector<S> grad;
  };
  std::vector<Slot> slots_;
  std::vector<std::function<void()>> nodes_;
  std::unordered_map<const void*, int> watched_;
};

namespace detail {

template <typename S>
inline Tape<S>*& current_tape_slot() {
  thread_local Tape<S>* t = nullptr;
  return t;
}

}  // namespace detail

template <typename S>
inline Tape<S>* active_tape() {
  return detail::current_tape_slot<S>();
}

// Installs a tape as the thread's recording target for its lifetime.
template <typename S>
class TapeGuard {
 public:
  explicit TapeGuard(Tape<S>& t) : prev_(detail::current_tape_slot<S>()) { detail::current_tape_slot<S>() = &t; }
  ~TapeGuard() { detail::current_tape_slot<S>() = prev_; }
  TapeGuard(const TapeGuard&) = delete;
  TapeGuard& operator=(const TapeGuard&) = delete;

 private:
  Tape<S>* prev_;
};

// ---------------------------------------------------------------------------
// kernels: the only loops that matter for throughput
// ---------------------------------------------------------------------------

namespace kernels {

// C[m x n] += A[m x k] * B[k x n]. Register-blocked over 4 rows of A; the
// per-element accumulation order over p is the same as the plain loop, so a
// single-row matvec reproduces any row bit-for-bit.
template <typename S>
void mm_nn(const S* A, const S* B, S* C, int m, int k, int n) {
  int i = 0;
  for (; i + 4 <= m; i += 4) {
    const S* a0 = A + static_cast<size_t>(i) * k;
    const S* a1 = a0 + k;
    const S* a2 = a1 + k;
    const S* a3 = a2 + k;
    S* c0 = C + static_cast<size_t>(i) * n;
    S* c1 = c0 + n;
    S* c2 = c1 + n;
    S* c3 = c2 + n;
    for (int p = 0; p < k; ++p) {
      const S v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
      const S* b = B + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) {
        const S bv = b[j];
        c0[j] += v0 * bv;
        c1[j] += v1 * bv;
        c2[j] += v2 * bv;
        c3[j] += v3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    const S* a = A + static_cast<size_t>(i) * k;
    S* c = C + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const S av = a[p];
      const S* b = B + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m x k] += A[m x n] * B[k x n]^T  (rows of A dotted with rows of B).
template <typename S>
void mm_nt(const S* A, const S* B, S* C, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const S* a = A + static_cast<size_t>(i) * n;
    S* c = C + static_cast<size_t>(i) * k;
    int p = 0;
    for (; p + 4 <= k; p += 4) {
      const S* b0 = B + static_cast<size_t>(p) * n;
      const S* b1 = b0 + n;
      const S* b2 = b1 + n;
      const S* b3 = b2 + n;
      S s0{0}, s1{0}, s2{0}, s3{0};
      for (int j = 0; j < n; ++j) {
        const S av = a[j];
        s0 += av * b0[j];
        s1 += av * b1[j];
        s2 += av * b2[j];
        s3 += av * b3[j];
      }
      c[p] += s0;
      c[p + 1] += s1;
      c[p + 2] += s2;
      c[p + 3] += s3;
    }
    for (; p < k; ++p) {
      const S* b = B + static_cast<size_t>(p) * n;
      S s{0};
      for (int j = 0; j < n; ++j) s += a[j] * b[j];
      c[p] += s;
    }
  }
}

// C[k x n] += A[m x k]^T * B[m x n].
template <typename S>
void mm_tn(const S* A, const S* B, S* C, int m, int k, int n) {
  int i = 0;
  for (; i + 4 <= m; i += 4) {
    const S* a0 = A + static_cast<size_t>(i) * k;
    const S* a1 = a0 + k;
    const S* a2 = a1 + k;
    const S* a3 = a2 + k;
    const S* b0 = B + static_cast<size_t>(i) * n;
    const S* b1 = b0 + n;
    const S* b2 = b1 + n;
    const S* b3 = b2 + n;
    for (int p = 0; p < k; ++p) {
      const S v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
      S* c = C + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) c[j] += v0 * b0[j] + v1 * b1[j] + v2 * b2[j] + v3 * b3[j];
    }
  }
  for (; i < m; ++i) {
    const S* a = A + static_cast<size_t>(i) * k;
    const S* b = B + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const S av = a[p];
      S* c = C + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// y[n] += x[k]^T * W[k x n]; accumulation order matches a row of mm_nn.
template <typename S>
void matvec(const S* x, const S* W, S* y, int k, int n) {
  for (int p = 0; p < k; ++p) {
    const S v = x[p];
    const S* w = W + static_cast<size_t>(p) * n;
    for (int j = 0; j < n; ++j) y[j] += v * w[j];
  }
}

template <typename S>
S dot(const S* a, const S* b, int n) {
  S s{0};
  for (int j = 0; j < n; ++j) s += a[j] * b[j];
  return s;
}

template <typename S>
void axpy(S a, const S* x, S* y, int n) {
  for (int j = 0; j < n; ++j) y[j] += a * x[j];
}

// Softmax-weighted sum over an explicit key set; shared by the batched op
// and the incremental (KV-cached) path so both produce identical numbers.
// `keys`/`vals` are row-major [* x stride] buffers addressed by 0-based
// indices; `weights_out` (optional) receives the attention weights.
template <typename S>
void attend_row(const S* q, const S* keys, const S* vals, const int* idx, int count, int stride, int dh, S scale,
                S* out, S* weights_out) {
  if (count == 0) return;  // fully-masked row: zero contribution
  S smax = -std::numeric_limits<S>::infinity();
  for (int j = 0; j < count; ++j) {
    const S s = dot(q, keys + static_cast<size_t>(idx[j]) * stride, dh) * scale;
    weights_out[j] = s;
    smax = std::max(smax, s);
  }
  S sum{0};
  for (int j = 0; j < count; ++j) {
    const S e = std::exp(weights_out[j] - smax);
    weights_out[j] = e;
    sum += e;
  }
  const S inv = S{1} / sum;
  for (int j = 0; j < count; ++j) {
    const S w = weights_out[j] * inv;
    weights_out[j] = w;
    axpy(w, vals + static_cast<size_t>(idx[j]) * stride, out, dh);
  }
}

}  // namespace kernels

namespace detail {

template <typename S>
inline void check_finite(const S* p, size_t n, const char* op) {
  for (size_t i = 0; i < n; ++i)
    if (!std::isfinite(p[i])) throw NumericError(std::string("non-finite value produced by ") + op);
}

template <typename S>
inline void check_finite(const Tensor<S>& t, const char* op) {
  check_finite(t.data(), t.size(), op);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// differentiable ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2) throw ShapeError("matmul: expects 2-D tensors");
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) throw ShapeError("matmul: inner dimensions do not match");
  Tensor<S> out({m, n});
  kernels::mm_nn(a.data(), b.data(), out.data(), m, k, n);
  detail::check_finite(out, "matmul");

  Tape<S>* tp = active_tape<S>();
  if (tp) {
    const int sa = tp->slot_of(a), sb = tp->slot_of(b);
    if (sa >= 0 || sb >= 0) {
      out.tape = tp;
      out.slot = tp->new_slot(out.size());
      auto ad = a.storage(), bd = b.storage();
      const int so = out.slot;
      tp->add_node([tp, sa, sb, so, ad, bd, m, k, n]() {
        const auto& g = tp->grad_if_any(so);
        if (g.empty()) return;
        if (sa >= 0) kernels::mm_nt(g.data(), bd->data(), tp->grad_buffer(sa).data(), m, n, k);
        if (sb >= 0) kernels::mm_tn(ad->data(), g.data(), tp->grad_buffer(sb).data(), m, k, n);
      });
    }
  }
  return out;
}

// x[N x i] * W[i x o] + b[o]
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  if (x.ndim() != 2 || w.ndim() != 2 || b.ndim() != 1) throw ShapeError("linear: bad ranks");
  const int m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (w.dim(0) != k || b.dim(0) != n) throw ShapeError("linear: dimension mismatch");
  Tensor<S> out({m, n});
  for (int i = 0; i < m; ++i) std::copy(b.data(), b.data() + n, out.data() + static_cast<size_t>(i) * n);
  kernels::mm_nn(x.data(), w.data(), out.data(), m, k, n);
  detail::check_finite(out, "linear");

  Tape<S>* tp = active_tape<S>();
  if (tp) {
    const int sx = tp->slot_of(x), sw = tp->slot_of(w), sb = tp->slot_of(b);
    if (sx >= 0 || sw >= 0 || sb >= 0) {
      out.tape = tp;
      out.slot = tp->new_slot(out.size());
      auto xd = x.storage(), wd = w.storage();
      const int so = out.slot;
      tp->add_node([tp, sx, sw, sb, so, xd, wd, m, k, n]() {
        const auto& g = tp->grad_if_any(so);
        if (g.empty()) return;
        if (sx >= 0) kernels::mm_nt(g.data(), wd->data(), tp->grad_buffer(sx).data(), m, n, k);
        if (sw >= 0) kernels::mm_tn(xd->data(), g.data(), tp->grad_buffer(sw).data(), m, k, n);
        if (sb >= 0) {
          auto& gb = tp->grad_buffer(sb);
          for (int i = 0; i < m; ++i) {
            const S* gr = g.data() + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) gb[j] += gr[j];
          }
        }
      });
    }
  }
  return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: shape mismatch");
  Tensor<S> out(a.shape());
  const size_t n = a.size();
  for (size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];

  Tape<S>* tp = active_tape<S>();
  if (tp) {
    const int sa = tp->slot_of(a), sb = tp->slot_of(b);
    if (sa >= 0 || sb >= 0) {
      out.tape = tp;
      out.slot = tp->new_slot(out.size());
      const int so = out.slot;
      tp->add_node([tp, sa, sb, so, n]() {
        const auto& g = tp->grad_if_any(so);
        if (g.empty()) return;
        if (sa >= 0) {
          auto& ga = tp->grad_buffer(sa);
          for (size_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (sb >= 0) {
          auto& gb = tp->grad_buffer(sb);
          for (size_t i = 0; i < n; ++i) gb[i] += g[i];
        }
      });
    }
  }
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul: shape mismatch");
  Tensor<S> out(a.shape());
  const size_t n = a.size();
  for (size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];

  Tape<S>* tp = active_tape<S>();
  if (tp) {
    const int sa = tp->slot_of(a), sb = tp->slot_of(b);
    if (sa >= 0 || sb >= 0) {
      out.tape = tp;
      out.slot = tp->new_slot(out.size());
      auto ad = a.storage(), bd = b.storage();
      const int so = out.slot;
      tp->add_node([tp, sa, sb, so, ad, bd, n]() {
        const auto& g = tp->grad_if_any(so);
        if (g.empty()) return;
        if (sa >= 0) {
          auto& ga = tp->grad_buffer(sa);
          for (size_t i = 0; i < n; ++i) ga[i] += g[i] * (*bd)[i];
        }
        if (sb >= 0) {
          auto& gb = tp->grad_buffer(sb);
          for (size_t i = 0; i < n; ++i) gb[i] += g[i] * (*ad)[i];
        }
      });
    }
  }
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  Tensor<S> out(a.shape());
  const size_t n = a.size();
  for (size_t i = 0; i < n; ++i) out[i] = a[i] * c;

  Tape<S>* tp = active_tape<S>();
  if (tp) {
    const int sa = tp->slot_of(a);
    if (sa >= 0) {
      out.tape = tp;
      out.slot = tp->new_slot(out.size());
      const int so = out.slot;
      tp->add_node([tp, sa, so, c, n]() {
        const auto& g = tp->grad_if_any(so);
        if (g.empty()) return;
        auto& ga = tp->grad_buffer(sa);
        for (size_t i = 0; i < n; ++i) ga[i] += g[i] * c;
      });
    }
  }
  return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  S s{0};
  const size_t n = a.size();
  for (size_t i = 0; i < n; ++i) s += a[i];
  Tensor<S> out = Tensor<S>::scalar(s);

  Tape<S>* tp = active_tape<S>();
  if (tp) {
    const int sa = tp->slot_of(a);
    if (sa >= 0) {
      out.tape = tp;
      out.slot = tp->new_slot(1);
      const int so = out.slot;
      tp->add_node([tp, sa, so, n]() {
        const auto& g = tp->grad_if_any(so);
        if (g.empty()) return;
        auto& ga = tp->grad_buffer(sa);
        for (size_t i = 0; i < n; ++i) ga[i] += g[0];
      });
    }
  }
  return out;
}

// GeLU, tanh approximation (GPT-2 lineage).
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  const S c = static_cast<S>(std::sqrt(2.0 / M_PI));
  const S k3 = static_cast<S>(0.044715);
  Tensor<S> out(x.shape());
  const size_t n = x.size();
  for (size_t i = 0; i < n; ++i) {
    const S v = x[i];
    out[i] = S{0.5} * v * (S{1} + std::tanh(c * (v + k3 * v * v * v)));
  }
  detail::check_finite(out, "gelu");

  Tape<S>* tp = active_tape<S>();
  if (tp) {
    const int sx = tp->slot_of(x);
    if (sx >= 0) {
      out.tape = tp;
      out.slot = tp->new_slot(out.size());
      auto xd = x.storage();
      const int so = out.slot;
      tp->add_node([tp, sx, so, xd, c, k3, n]() {
        const auto& g = tp->grad_if_any(so);
        if (g.empty()) return;
        auto& gx = tp->grad_buffer(sx);
        for (size_t i = 0; i < n; ++i) {
          const S v = (*xd)[i];
          const S th = std::tanh(c * (v + k3 * v * v * v));
          const S d = S{0.5} * (S{1} + th) + S{0.5} * v * (S{1} - th * th) * c * (S{1} + S{3} * k3 * v * v);
          gx[i] += g[i] * d;
        }
      });
    }
  }
  return out;
}

// Per-vector zero-mean unit-variance over the last dimension, then affine.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, S eps = static_cast<S>(1e-5)) {
  const int d = x.cols();
  const int rows = x.rows();
  if (gain.ndim() != 1 || gain.dim(0) != d || bias.ndim() != 1 || bias.dim(0) != d)
    throw ShapeError("layer_norm: gain/bias must match the last dimension");

  Tensor<S> out(x.shape());
  auto inv_std = std::make_shared<std::vector<S>>(rows);
  auto mean = std::make_shared<std::vector<S>>(rows);
  for (int r = 0; r < rows; ++r) {
    const S* xr = x.data() + static_cast<size_t>(r) * d;
    S mu{0};
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= d;
    S var{0};
    for (int j = 0; j < d; ++j) {
      const S c = xr[j] - mu;
      var += c * c;
    }
    var /= d;
    const S inv = S{1} / std::sqrt(var + eps);
    (*mean)[r] = mu;
    (*inv_std)[r] = inv;
    S* orow = out.data() + static_cast<size_t>(r) * d;
    for (int j = 0; j < d; ++j) orow[j] = (xr[j] - mu) * inv * gain[j] + bias[j];
  }
  detail::check_finite(out, "layer_norm");

  Tape<S>* tp = active_tape<S>();
  if (tp) {
    const int sx = tp->slot_of(x), sg = tp->slot_of(gain), sb = tp->slot_of(bias);
    if (sx >= 0 || sg >= 0 || sb >= 0) {
      out.tape = tp;
      out.slot = tp->new_slot(out.size());
      auto xd = x.storage(), gd = gain.storage();
      const int so = out.slot;
      tp->add_node([tp, sx, sg, sb, so, xd, gd, inv_std, mean, rows, d]() {
        const auto& g = tp->grad_if_any(so);
        if (g.empty()) return;
        for (int r = 0; r < rows; ++r) {
          const S* xr = xd->data() + static_cast<size_t>(r) * d;
          const S* gr = g.data() + static_cast<size_t>(r) * d;
          const S mu = (*mean)[r], inv = (*inv_std)[r];
          if (sg >= 0) {
            auto& gg = tp->grad_buffer(sg);
            for (int j = 0; j < d; ++j) gg[j] += gr[j] * (xr[j] - mu) * inv;
          }
          if (sb >= 0) {
            auto& gb = tp->grad_buffer(sb);
            for (int j = 0; j < d; ++j) gb[j] += gr[j];
          }
          if (sx >= 0) {
            auto& gx = tp->grad_buffer(sx);
            S m1{0}, m2{0};
            for (int j = 0; j < d; ++j) {
              const S a = gr[j] * (*gd)[j];
              const S xh = (xr[j] - mu) * inv;
              m1 += a;
              m2 += a * xh;
            }
            m1 /= d;
            m2 /= d;
            S* gxr = gx.data() + static_cast<size_t>(r) * d;
            for (int j = 0; j < d; ++j) {
              const S a = gr[j] * (*gd)[j];
              const S xh = (xr[j] - mu) * inv;
              gxr[j] += (a - m1 - xh * m2) * inv;
            }
          }
        }
      });
    }
  }
  return out;
}

// Row gather from an embedding table; gradient scatter-adds into the table.
template <typename S>
Tensor<S> embedding_lookup(const Tensor<S>& table, const std::vector<int>& ids) {
  if (table.ndim() != 2) throw ShapeError("embedding_lookup: table must be 2-D");
  const int v = table.dim(0), d = table.dim(1);
  const int t_len = static_cast<int>(ids.size());
  if (t_len == 0) throw ShapeError("embedding_lookup: empty id list");
  for (int id : ids)
    if (id < 0 || id >= v) throw DataError("embedding_lookup: token id out of range");
  Tensor<S> out({t_len, d});
  for (int t = 0; t < t_len; ++t)
    std::copy(table.data() + static_cast<size_t>(ids[t]) * d, table.data() + static_cast<size_t>(ids[t] + 1) * d,
              out.data() + static_cast<size_t>(t) * d);

  Tape<S>* tp = active_tape<S>();
  if (tp) {
    const int st = tp->slot_of(table);
    if (st >= 0) {
      out.tape = tp;
      out.slot = tp->new_slot(out.size());
      const int so = out.slot;
      tp->add_node([tp, st, so, ids, d]() {
        const auto& g = tp->grad_if_any(so);
        if (g.empty()) return;
        auto& gt = tp->grad_buffer(st);
        for (size_t t = 0; t < ids.size(); ++t) {
          S* row = gt.data() + static_cast<size_t>(ids[t]) * d;
          const S* gr = g.data() + t * d;
          for (int j = 0; j < d; ++j) row[j] += gr[j];
        }
      });
    }
  }
  return out;
}

namespace detail {

template <typename S>
void rotary_tables(const std::vector<int>& positions, int dh, S base, std::vector<S>& cos_t, std::vector<S>& sin_t) {
  const int pairs = dh / 2;
  const int t_len = static_cast<int>(positions.size());
  cos_t.resize(static_cast<size_t>(t_len) * pairs);
  sin_t.resize(static_cast<size_t>(t_len) * pairs);
  for (int t = 0; t < t_len; ++t)
    for (int i = 0; i < pairs; ++i) {
      const double theta =
          static_cast<double>(positions[t]) * std::pow(static_cast<double>(base), -2.0 * i / static_cast<double>(dh));
      cos_t[static_cast<size_t>(t) * pairs + i] = static_cast<S>(std::cos(theta));
      sin_t[static_cast<size_t>(t) * pairs + i] = static_cast<S>(std::sin(theta));
    }
}

}  // namespace detail

// Rotary position encoding applied per head to consecutive value pairs.
// `positions` are absolute (the model passes 1..T); position 0 is identity.
template <typename S>
Tensor<S> rotary_apply(const Tensor<S>& x, const std::vector<int>& positions, int n_heads,
                       S base = static_cast<S>(10000)) {
  if (x.ndim() != 2) throw ShapeError("rotary_apply: expects [T x d]");
  const int t_len = x.dim(0), d = x.dim(1);
  if (static_cast<int>(positions.size()) != t_len) throw ShapeError("rotary_apply: positions size mismatch");
  if (n_heads <= 0 || d % n_heads != 0) throw ConfigError("rotary_apply: d must divide by n_heads");
  const int dh = d / n_heads;
  if (dh % 2 != 0) throw ConfigError("rotary_apply: head dimension must be even");
  const int pairs = dh / 2;

  auto cos_t = std::make_shared<std::vector<S>>();
  auto sin_t = std::make_shared<std::vector<S>>();
  detail::rotary_tables(positions, dh, base, *cos_t, *sin_t);

  Tensor<S> out(x.shape());
  for (int t = 0; t < t_len; ++t) {
    const S* xr = x.data() + static_cast<size_t>(t) * d;
    S* orow = out.data() + static_cast<size_t>(t) * d;
    for (int h = 0; h < n_heads; ++h)
      for (int i = 0; i < pairs; ++i) {
        const S c = (*cos_t)[static_cast<size_t>(t) * pairs + i];
        const S s = (*sin_t)[static_cast<size_t>(t) * pairs + i];
        const int j0 = h * dh + 2 * i, j1 = j0 + 1;
        orow[j0] = xr[j0] * c - xr[j1] * s;
        orow[j1] = xr[j0] * s + xr[j1] * c;
      }
  }

  Tape<S>* tp = active_tape<S>();
  if (tp) {
    const int sx = tp->slot_of(x);
    if (sx >= 0) {
      out.tape = tp;
      out.slot = tp->new_slot(out.size());
      const int so = out.slot;
      tp->add_node([tp, sx, so, cos_t, sin_t, t_len, d, n_heads, pairs]() {
        const auto& g = tp->grad_if_any(so);
        if (g.empty()) return;
        auto& gx = tp->grad_buffer(sx);
        const int dh = 2 * pairs;
        for (int t = 0; t < t_len; ++t) {
          const S* gr = g.data() + static_cast<size_t>(t) * d;
          S* gxr = gx.data() + static_cast<size_t>(t) * d;
          for (int h = 0; h < n_heads; ++h)
            for (int i = 0; i < pairs; ++i) {
              const S c = (*cos_t)[static_cast<size_t>(t) * pairs + i];
              const S s = (*sin_t)[static_cast<size_t>(t) * pairs + i];
              const int j0 = h * dh + 2 * i, j1 = j0 + 1;
              gxr[j0] += gr[j0] * c + gr[j1] * s;
              gxr[j1] += -gr[j0] * s + gr[j1] * c;
            }
        }
      });
    }
  }
  return out;
}

// Row-wise softmax restricted to the layout's attended positions; everything
// else is exactly zero, and a fully-masked row yields an all-zero row.
template <typename S>
Tensor<S> masked_softmax(const Tensor<S>& scores, const MaskLayout& layout) {
  if (scores.ndim() != 2 || scores.dim(0) != scores.dim(1)) throw ShapeError("masked_softmax: expects [T x T]");
  const int t_len = scores.dim(0);
  if (layout.T != t_len) throw ShapeError("masked_softmax: layout T mismatch");

  Tensor<S> out({t_len, t_len});
  for (int t = 1; t <= t_len; ++t) {
    const auto& row = layout.row(t);
    if (row.empty()) continue;
    const S* sr = scores.data() + static_cast<size_t>(t - 1) * t_len;
    S* orow = out.data() + static_cast<size_t>(t - 1) * t_len;
    S smax = -std::numeric_limits<S>::infinity();
    for (int tp : row) smax = std::max(smax, sr[tp - 1]);
    S sum{0};
    for (int tp : row) sum += std::exp(sr[tp - 1] - smax);
    const S inv = S{1} / sum;
    for (int tp : row) orow[tp - 1] = std::exp(sr[tp - 1] - smax) * inv;
  }
  detail::check_finite(out, "masked_softmax");

  Tape<S>* tp_ = active_tape<S>();
  if (tp_) {
    const int sx = tp_->slot_of(scores);
    if (sx >= 0) {
      out.tape = tp_;
      out.slot = tp_->new_slot(out.size());
      auto od = out.storage();
      const int so = out.slot;
      auto rows = std::make_shared<std::vector<std::vector<int>>>(layout.rows);
      tp_->add_node([tp_, sx, so, od, rows, t_len]() {
        const auto& g = tp_->grad_if_any(so);
        if (g.empty()) return;
        auto& gx = tp_->grad_buffer(sx);
        for (int t = 0; t < t_len; ++t) {
          const auto& row = (*rows)[t];
          if (row.empty()) continue;
          const S* w = od->data() + static_cast<size_t>(t) * t_len;
          const S* gr = g.data() + static_cast<size_t>(t) * t_len;
          S dotwg{0};
          for (int tp2 : row) dotwg += w[tp2 - 1] * gr[tp2 - 1];
          S* gxr = gx.data() + static_cast<size_t>(t) * t_len;
          for (int tp2 : row) gxr[tp2 - 1] += w[tp2 - 1] * (gr[tp2 - 1] - dotwg);
        }
      });
    }
  }
  return out;
}

// Multi-head scaled-dot-product attention restricted to the layout. Queries,
// keys and values are [T x d] with heads laid out contiguously. Summation is
// restricted to attended positions (no dense masking); empty rows produce a
// zero output row.
template <typename S>
Tensor<S> sparse_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, const MaskLayout& layout,
                           int n_heads) {
  if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2) throw ShapeError("sparse_attention: expects 2-D tensors");
  const int tq = q.dim(0), d = q.dim(1);
  const int tk = k.dim(0);
  if (k.dim(1) != d || v.dim(1) != d || v.dim(0) != tk) throw ShapeError("sparse_attention: k/v shape mismatch");
  if (layout.T != tq) throw ShapeError("sparse_attention: layout does not match query length");
  if (d % n_heads != 0) throw ConfigError("sparse_attention: d must divide by n_heads");
  for (int t = 1; t <= tq; ++t)
    for (int p : layout.row(t))
      if (p > tk) throw ShapeError("sparse_attention: layout refers past the key length");
  const int dh = d / n_heads;
  const S att_scale = S{1} / static_cast<S>(std::sqrt(static_cast<double>(dh)));

  // flatten the layout once: 0-based key indices + per-row offsets
  auto idx = std::make_shared<std::vector<int>>();
  auto off = std::make_shared<std::vector<int>>(tq + 1, 0);
  for (int t = 0; t < tq; ++t) {
    for (int p : layout.rows[t]) idx->push_back(p - 1);
    (*off)[t + 1] = static_cast<int>(idx->size());
  }
  const size_t population = idx->size();

  Tensor<S> out({tq, d});
  auto weights = std::make_shared<std::vector<S>>(population * static_cast<size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    const int col = h * dh;
    for (int t = 0; t < tq; ++t) {
      const int begin = (*off)[t], count = (*off)[t + 1] - begin;
      kernels::attend_row(q.data() + static_cast<size_t>(t) * d + col, k.data() + col, v.data() + col,
                          idx->data() + begin, count, d, dh, att_scale,
                          out.data() + static_cast<size_t>(t) * d + col,
                          weights->data() + static_cast<size_t>(h) * population + begin);
    }
  }
  detail::check_finite(out, "sparse_attention");

  Tape<S>* tp = active_tape<S>();
  if (tp) {
    const int sq = tp->slot_of(q), sk = tp->slot_of(k), sv = tp->slot_of(v);
    if (sq >= 0 || sk >= 0 || sv >= 0) {
      out.tape = tp;
      out.slot = tp->new_slot(out.size());
      auto qd = q.storage(), kd = k.storage(), vd = v.storage();
      const int so = out.slot;
      tp->add_node([tp, sq, sk, sv, so, qd, kd, vd, idx, off, weights, tq, d, dh, n_heads, att_scale, population]() {
        const auto& g = tp->grad_if_any(so);
        if (g.empty()) return;
        S* gq = sq >= 0 ? tp->grad_buffer(sq).data() : nullptr;
        S* gk = sk >= 0 ? tp->grad_buffer(sk).data() : nullptr;
        S* gv = sv >= 0 ? tp->grad_buffer(sv).data() : nullptr;
        std::vector<S> ds;
        for (int h = 0; h < n_heads; ++h) {
          const int col = h * dh;
          const S* wbase = weights->data() + static_cast<size_t>(h) * population;
          for (int t = 0; t < tq; ++t) {
            const int begin = (*off)[t], count = (*off)[t + 1] - begin;
            if (count == 0) continue;
            const S* gctx = g.data() + static_cast<size_t>(t) * d + col;
            const S* w = wbase + begin;
            const int* id = idx->data() + begin;
            ds.assign(static_cast<size_t>(count), S{0});
            S sum_wdot{0};
            for (int j = 0; j < count; ++j) {
              const S* vr = vd->data() + static_cast<size_t>(id[j]) * d + col;
              const S dj = kernels::dot(gctx, vr, dh);
              ds[j] = dj;
              sum_wdot += w[j] * dj;
            }
            for (int j = 0; j < count; ++j) {
              const S wj = w[j];
              const S dsj = wj * (ds[j] - sum_wdot);
              if (gv) kernels::axpy(wj, gctx, gv + static_cast<size_t>(id[j]) * d + col, dh);
              if (gq)
                kernels::axpy(att_scale * dsj, kd->data() + static_cast<size_t>(id[j]) * d + col,
                              gq + static_cast<size_t>(t) * d + col, dh);
              if (gk)
                kernels::axpy(att_scale * dsj, qd->data() + static_cast<size_t>(t) * d + col,
                              gk + static_cast<size_t>(id[j]) * d + col, dh);
            }
          }
        }
      });
    }
  }
  return out;
}

// Mean negative log-likelihood over the given 0-based rows, with log-sum-exp
// stabilization. `targets` holds one 0-based token id per row of `logits`.
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<int>& targets, const std::vector<int>& positions) {
  if (logits.ndim() != 2) throw ShapeError("cross_entropy: expects [T x V]");
  const int t_len = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != t_len) throw ShapeError("cross_entropy: targets size mismatch");
  if (positions.empty()) throw DomainError("cross_entropy: empty position set");
  for (int p : positions) {
    if (p < 0 || p >= t_len) throw DomainError("cross_entropy: position out of range");
    if (targets[p] < 0 || targets[p] >= v) throw DataError("cross_entropy: target id out of range");
  }

  const S inv_n = S{1} / static_cast<S>(positions.size());
  S loss{0};
  for (int p : positions) {
    const S* row = logits.data() + static_cast<size_t>(p) * v;
    S smax = row[0];
    for (int j = 1; j < v; ++j) smax = std::max(smax, row[j]);
    S sum{0};
    for (int j = 0; j < v; ++j) sum += std::exp(row[j] - smax);
    loss += (std::log(sum) + smax - row[targets[p]]) * inv_n;
  }
  Tensor<S> out = Tensor<S>::scalar(loss);
  detail::check_finite(out, "cross_entropy");

  Tape<S>* tp = active_tape<S>();
  if (tp) {
    const int sl = tp->slot_of(logits);
    if (sl >= 0) {
      out.tape = tp;
      out.slot = tp->new_slot(1);
      auto ld = logits.storage();
      const int so = out.slot;
      auto pos = std::make_shared<std::vector<int>>(positions);
      auto tgt = std::make_shared<std::vector<int>>(targets);
      tp->add_node([tp, sl, so, ld, pos, tgt, v, inv_n]() {
        const auto& g = tp->grad_if_any(so);
        if (g.empty()) return;
        auto& gl = tp->grad_buffer(sl);
        const S gs = g[0] * inv_n;
        for (int p : *pos) {
          const S* row = ld->data() + static_cast<size_t>(p) * v;
          S* grow = gl.data() + static_cast<size_t>(p) * v;
          S smax = row[0];
          for (int j = 1; j < v; ++j) smax = std::max(smax, row[j]);
          S sum{0};
          for (int j = 0; j < v; ++j) sum += std::exp(row[j] - smax);
          const S inv = S{1} / sum;
          for (int j = 0; j < v; ++j) grow[j] += gs * std::exp(row[j] - smax) * inv;
          grow[(*tgt)[p]] -= gs;
        }
      });
    }
  }
  return out;
}

// Inverted dropout; rate 0 is an exact pass-through.
template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must be in [0, 1)");
  if (rate == 0.0) return x;
  const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<S>>(x.size());
  Tensor<S> out(x.shape());
  const size_t n = x.size();
  for (size_t i = 0; i < n; ++i) {
    const S m = rng.uniform() < rate ? S{0} : keep_scale;
    (*mask)[i] = m;
    out[i] = x[i] * m;
  }

  Tape<S>* tp = active_tape<S>();
  if (tp) {
    const int sx = tp->slot_of(x);
    if (sx >= 0) {
      out.tape = tp;
      out.slot = tp->new_slot(out.size());
      const int so = out.slot;
      tp->add_node([tp, sx, so, mask, n]() {
        const auto& g = tp->grad_if_any(so);
        if (g.empty()) return;
        auto& gx = tp->grad_buffer(sx);
        for (size_t i = 0; i < n; ++i) gx[i] += g[i] * (*mask)[i];
      });
    }
  }
  return out;
}

template <typename S>
void backward(Tape<S>& tape, const Tensor<S>& loss) {
  tape.backward(loss);
}

// Plain row softmax (not tape-aware); inference utility.
template <typename S>
std::vector<S> softmax_row(const S* row, int v) {
  S smax = row[0];
  for (int j = 1; j < v; ++j) smax = std::max(smax, row[j]);
  std::vector<S> out(static_cast<size_t>(v));
  S sum{0};
  for (int j = 0; j < v; ++j) {
    out[j] = std::exp(row[j] - smax);
    sum += out[j];
  }
  const S inv = S{1} / sum;
  for (int j = 0; j < v; ++j) out[j] *= inv;
  return out;
}

template <typename S>
S log_softmax_at(const S* row, int v, int id) {
  S smax = row[0];
  for (int j = 1; j < v; ++j) smax = std::max(smax, row[j]);
  S sum{0};
  for (int j = 0; j < v; ++j) sum += std::exp(row[j] - smax);
  return row[id] - smax - std::log(sum);
}

}  // namespace tracformer
