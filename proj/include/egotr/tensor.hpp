// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with reverse-mode automatic differentiation.
//
// The tape is define-by-run: ops execute eagerly and, while recording,
// append a node with a backward closure. A tape is built per forward pass
// and discarded afterwards; parameters live outside the tape and receive
// gradients into Tensor::grad() when backward() flushes leaves. Gradients
// accumulate across backward calls until zero_grad().
//
// No op aliases memory: every op returns a freshly allocated tensor, so
// mutating an input after an op has run does not change the op's output
// (it does invalidate a pending backward pass, which reads leaf values).

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "egotr/kernels.hpp"

namespace egotr {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Shape or rank mismatch between op arguments.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// API misuse: bad argument values, violated preconditions.
class UsageError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf or a numeric domain violation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent external data (files, manifests, lookups).
class DataError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline void check_dims(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

inline void check_usage(bool ok, const std::string& msg) {
  if (!ok) throw UsageError(msg);
}

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;  // empty until a backward pass reaches this leaf
  // Tape linkage; valid only while tape_serial matches the live tape.
  std::uint64_t tape_serial = 0;
  int tape_node = -1;
};

// Shared handle to a tensor. Copies share storage; use clone() for a deep
// copy. Default-constructed handles are "undefined" and usable only after
// assignment.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape) : s_(std::make_shared<TensorStorage<T>>()) {
    s_->data.assign(shape_numel(shape), T(0));
    s_->shape = std::move(shape);
  }
  Tensor(Shape shape, std::vector<T> values)
      : s_(std::make_shared<TensorStorage<T>>()) {
    if (values.size() != shape_numel(shape))
      throw DimensionError("tensor init: " + std::to_string(values.size()) +
                           " values for shape " + shape_str(shape));
    s_->shape = std::move(shape);
    s_->data = std::move(values);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape));
    for (T& x : t.s_->data) x = v;
    return t;
  }
  static Tensor scalar(T v) { return Tensor({}, {v}); }

  bool defined() const { return s_ != nullptr; }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t numel() const { return s_->data.size(); }

  std::span<T> data() { return {s_->data.data(), s_->data.size()}; }
  std::span<const T> data() const { return {s_->data.data(), s_->data.size()}; }

  template <typename... Ix>
  T& at(Ix... ix) {
    return s_->data[offset(ix...)];
  }
  template <typename... Ix>
  const T& at(Ix... ix) const {
    return s_->data[offset(ix...)];
  }

  T item() const {
    check_usage(numel() == 1, "item(): tensor has " + std::to_string(numel()) +
                                  " elements");
    return s_->data[0];
  }

  bool requires_grad() const { return s_ && s_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    s_->requires_grad = rg;
    return *this;
  }

  // Accumulated gradient; empty span until backward reaches this tensor.
  std::span<const T> grad() const {
    return {s_->grad.data(), s_->grad.size()};
  }
  std::span<T> grad() { return {s_->grad.data(), s_->grad.size()}; }
  bool has_grad() const { return s_ && !s_->grad.empty(); }
  void zero_grad() { s_->grad.clear(); }
  void accumulate_grad(std::span<const T> g) {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T(0));
    kernels::add_acc(s_->grad.data(), g.data(), g.size());
  }

  // Deep copy of values only: no grad, no tape linkage, requires_grad off.
  Tensor clone() const {
    Tensor t;
    t.s_ = std::make_shared<TensorStorage<T>>();
    t.s_->shape = s_->shape;
    t.s_->data = s_->data;
    return t;
  }

  void ensure_finite(const std::string& what) const {
    for (const T& v : s_->data)
      if (!std::isfinite(double(v)))
        throw NumericError("non-finite value in " + what);
  }

  TensorStorage<T>* storage() const { return s_.get(); }
  const std::shared_ptr<TensorStorage<T>>& storage_ptr() const { return s_; }

 private:
  template <typename... Ix>
  std::size_t offset(Ix... ix) const {
    const std::size_t idx[] = {std::size_t(ix)...};
    const std::size_t r = sizeof...(ix);
    check_usage(r == s_->shape.size(),
                "index rank " + std::to_string(r) + " for shape " +
                    shape_str(s_->shape));
    std::size_t off = 0;
    for (std::size_t d = 0; d < r; ++d) off = off * s_->shape[d] + idx[d];
    return off;
  }

  std::shared_ptr<TensorStorage<T>> s_;
};

template <typename To, typename From>
Tensor<To> cast_tensor(const Tensor<From>& src) {
  std::vector<To> v(src.numel());
  auto d = src.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = To(d[i]);
  return Tensor<To>(src.shape(), std::move(v));
}

template <typename T>
void fill_normal(Tensor<T>& t, std::mt19937_64& rng, T mean, T stddev) {
  std::normal_distribution<double> dist{double(mean), double(stddev)};
  for (T& v : t.data()) v = T(dist(rng));
}

template <typename T>
void fill_uniform(Tensor<T>& t, std::mt19937_64& rng, T lo, T hi) {
  std::uniform_real_distribution<double> dist{double(lo), double(hi)};
  for (T& v : t.data()) v = T(dist(rng));
}

// Reverse-mode tape. Nodes are appended in execution order; backward()
// seeds the root and sweeps nodes in reverse, so every node's gradient is
// complete before its backward closure runs (fan-out accumulates by +=).
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const T*)>;

  Tape() : serial_(++counter()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  void set_recording(bool r) { recording_ = r; }

  // Forward multiply-accumulate count (matmul, conv, pairwise distances).
  std::uint64_t mac_count() const { return macs_; }
  void add_macs(std::uint64_t n) { macs_ += n; }
  void reset_macs() { macs_ = 0; }

  std::size_t node_count() const { return nodes_.size(); }

  // Shared forward-only tape for inference paths.
  static Tape& inference() {
    static thread_local Tape t;
    t.recording_ = false;
    return t;
  }

  int node_id(const Tensor<T>& t) const {
    const auto* s = t.storage();
    return (s != nullptr && s->tape_serial == serial_) ? s->tape_node : -1;
  }

  // True if gradients should flow through this tensor on this tape.
  bool traces(const Tensor<T>& t) const {
    return t.defined() && (node_id(t) >= 0 || t.requires_grad());
  }

  // Node id for an op input: existing node, fresh leaf if it requires
  // grad, else -1 (constant).
  int use_input(const Tensor<T>& t) {
    int id = node_id(t);
    if (id >= 0) return id;
    if (!t.requires_grad()) return -1;
    return append(t, BackwardFn());
  }

  // Track an op output with its backward closure.
  int emit(const Tensor<T>& out, BackwardFn fn) {
    return append(out, std::move(fn));
  }

  // Gradient buffer for a node, zero-initialized on first touch.
  T* grad(int id) {
    auto& g = gbuf_[std::size_t(id)];
    if (g.empty()) g.assign(nodes_[std::size_t(id)].tensor->data.size(), T(0));
    return g.data();
  }

  void backward(const Tensor<T>& loss) {
    check_usage(loss.defined() && loss.numel() == 1,
                "backward: loss must be a defined scalar");
    const T one(1);
    backward(loss, {&one, 1});
  }

  // Seeded backward from an arbitrary tracked output.
  void backward(const Tensor<T>& out, std::span<const T> seed) {
    const int root = node_id(out);
    check_usage(root >= 0, "backward: output is not on this tape");
    check_usage(seed.size() == out.numel(),
                "backward: seed size " + std::to_string(seed.size()) +
                    " for output of " + std::to_string(out.numel()));
    gbuf_.assign(nodes_.size(), {});
    kernels::add_acc(grad(root), seed.data(), seed.size());
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (gbuf_[i].empty()) continue;
      if (nodes_[i].backward) nodes_[i].backward(*this, gbuf_[i].data());
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      auto& st = *nodes_[i].tensor;
      if (st.requires_grad && !gbuf_[i].empty()) {
        if (st.grad.empty()) st.grad.assign(st.data.size(), T(0));
        kernels::add_acc(st.grad.data(), gbuf_[i].data(), gbuf_[i].size());
      }
    }
    gbuf_.clear();
  }

 private:
  struct Node {
    std::shared_ptr<TensorStorage<T>> tensor;
    BackwardFn backward;  // empty for leaves
  };

  static std::uint64_t& counter() {
    static std::uint64_t c = 0;
    return c;
  }

  int append(const Tensor<T>& t, BackwardFn fn) {
    nodes_.push_back(Node{t.storage_ptr(), std::move(fn)});
    const int id = int(nodes_.size()) - 1;
    t.storage()->tape_serial = serial_;
    t.storage()->tape_node = id;
    return id;
  }

  std::uint64_t serial_;
  bool recording_ = true;
  std::uint64_t macs_ = 0;
  std::vector<Node> nodes_;
  std::vector<std::vector<T>> gbuf_;
};

// ---------------------------------------------------------------------------
// Ops. Each computes eagerly and, while the tape records and any input is
// traced, emits a backward closure. Closures hold shared ownership of the
// values they need, so inputs may go out of scope before backward().
// ---------------------------------------------------------------------------

namespace detail {

// Splits a shape at `axis` into (outer, len, inner) strides.
inline void axis_split(const Shape& s, int axis, std::size_t& outer,
                       std::size_t& len, std::size_t& inner) {
  const int r = int(s.size());
  int ax = axis < 0 ? axis + r : axis;
  check_usage(ax >= 0 && ax < r, "axis " + std::to_string(axis) +
                                     " out of range for " + shape_str(s));
  outer = 1;
  inner = 1;
  for (int i = 0; i < ax; ++i) outer *= s[std::size_t(i)];
  len = s[std::size_t(ax)];
  for (int i = ax + 1; i < r; ++i) inner *= s[std::size_t(i)];
}

}  // namespace detail

// a[...,m,k] x b[...,k,n]. Ranks 2 or 3; a rank-3 lhs broadcasts a rank-2
// rhs across the batch. Rank-3 x rank-3 requires equal batch sizes.
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t ra = a.rank(), rb = b.rank();
  check_dims((ra == 2 || ra == 3) && (rb == 2 || rb == 3) && rb <= ra,
             "matmul: unsupported ranks " + shape_str(a.shape()) + " x " +
                 shape_str(b.shape()));
  const std::size_t batch = ra == 3 ? a.dim(0) : 1;
  const std::size_t m = a.dim(ra - 2), k = a.dim(ra - 1);
  const std::size_t kb = b.dim(rb - 2), n = b.dim(rb - 1);
  check_dims(k == kb, "matmul: inner dims " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));
  if (rb == 3)
    check_dims(b.dim(0) == batch, "matmul: batch dims " +
                                      shape_str(a.shape()) + " x " +
                                      shape_str(b.shape()));
  Shape os = ra == 3 ? Shape{batch, m, n} : Shape{m, n};
  Tensor<T> out(os);
  const std::size_t bstride = rb == 3 ? k * n : 0;
  for (std::size_t s = 0; s < batch; ++s)
    kernels::gemm_nn_acc(out.data().data() + s * m * n,
                         a.data().data() + s * m * k,
                         b.data().data() + s * bstride, m, k, n);
  tape.add_macs(std::uint64_t(batch) * m * k * n);
  if (tape.recording() && (tape.traces(a) || tape.traces(b))) {
    const int ia = tape.use_input(a), ib = tape.use_input(b);
    auto as = a.storage_ptr();
    auto bs = b.storage_ptr();
    tape.emit(out, [=](Tape<T>& tp, const T* g) {
      for (std::size_t s = 0; s < batch; ++s) {
        const T* gs = g + s * m * n;
        if (ia >= 0)
          kernels::gemm_nt_acc(tp.grad(ia) + s * m * k, gs,
                               bs->data.data() + s * bstride, m, n, k);
        if (ib >= 0)
          kernels::gemm_tn_acc(tp.grad(ib) + s * bstride,
                               as->data.data() + s * m * k, gs, k, m, n);
      }
    });
  }
  return out;
}

// x[Cin,H,W] (*) w[Cout,Cin,KH,KW] + b[Cout], zero padding.
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w,
                 const Tensor<T>& b, std::size_t stride, std::size_t pad) {
  check_dims(x.rank() == 3 && w.rank() == 4 && b.rank() == 1,
             "conv2d: want x[C,H,W], w[O,C,KH,KW], b[O]");
  const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  check_dims(w.dim(1) == cin, "conv2d: channels " + shape_str(x.shape()) +
                                  " vs " + shape_str(w.shape()));
  check_dims(b.dim(0) == cout, "conv2d: bias " + shape_str(b.shape()));
  check_usage(stride > 0, "conv2d: stride must be positive");
  const std::size_t ho = kernels::conv_out_dim(h, kh, stride, pad);
  const std::size_t wo = kernels::conv_out_dim(wd, kw, stride, pad);
  check_dims(ho > 0 && wo > 0, "conv2d: empty output for input " +
                                   shape_str(x.shape()));
  Tensor<T> out({cout, ho, wo});
  kernels::conv2d_forward(out.data().data(), x.data().data(), w.data().data(),
                          b.data().data(), cin, h, wd, cout, kh, kw, stride,
                          pad);
  tape.add_macs(std::uint64_t(cout) * ho * wo * cin * kh * kw);
  if (tape.recording() &&
      (tape.traces(x) || tape.traces(w) || tape.traces(b))) {
    const int ix = tape.use_input(x), iw = tape.use_input(w),
              ib = tape.use_input(b);
    auto xs = x.storage_ptr();
    auto ws = w.storage_ptr();
    tape.emit(out, [=](Tape<T>& tp, const T* g) {
      kernels::conv2d_backward_acc(
          ix >= 0 ? tp.grad(ix) : nullptr, iw >= 0 ? tp.grad(iw) : nullptr,
          ib >= 0 ? tp.grad(ib) : nullptr, xs->data.data(), ws->data.data(), g,
          cin, h, wd, cout, kh, kw, stride, pad);
    });
  }
  return out;
}

// Softmax along `axis` (negative counts from the end). Rows of the result
// are finite, positive, and sum to 1 for any finite input.
template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x, int axis = -1) {
  std::size_t outer, len, inner;
  detail::axis_split(x.shape(), axis, outer, len, inner);
  Tensor<T> out(x.shape());
  const T* src = x.data().data();
  T* dst = out.data().data();
  if (inner == 1) {
    kernels::softmax_rows(dst, src, outer, len);
  } else {
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T mx = src[base];
        for (std::size_t i = 1; i < len; ++i) {
          const T v = src[base + i * inner];
          mx = v > mx ? v : mx;
        }
        T sum = T(0);
        for (std::size_t i = 0; i < len; ++i) {
          const T e = kernels::fast_exp(src[base + i * inner] - mx);
          dst[base + i * inner] = e;
          sum += e;
        }
        const T inv = T(1) / sum;
        for (std::size_t i = 0; i < len; ++i) dst[base + i * inner] *= inv;
      }
    }
  }
  if (tape.recording() && tape.traces(x)) {
    const int ix = tape.use_input(x);
    auto os = out.storage_ptr();
    tape.emit(out, [=](Tape<T>& tp, const T* g) {
      const T* y = os->data.data();
      T* gx = tp.grad(ix);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          T dot = T(0);
          for (std::size_t i = 0; i < len; ++i)
            dot += g[base + i * inner] * y[base + i * inner];
          for (std::size_t i = 0; i < len; ++i) {
            const std::size_t at = base + i * inner;
            gx[at] += y[at] * (g[at] - dot);
          }
        }
      }
    });
  }
  return out;
}

// Normalizes the last dimension to zero mean and unit variance, then
// applies the elementwise affine y = xhat * gain + bias.
template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps = T(1e-6)) {
  check_dims(x.rank() >= 1, "layer_norm: scalar input");
  const std::size_t d = x.dim(x.rank() - 1);
  check_dims(gain.rank() == 1 && gain.dim(0) == d && bias.rank() == 1 &&
                 bias.dim(0) == d,
             "layer_norm: params " + shape_str(gain.shape()) + "/" +
                 shape_str(bias.shape()) + " for input " +
                 shape_str(x.shape()));
  const std::size_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  const T* src = x.data().data();
  const T* gn = gain.data().data();
  const T* bs = bias.data().data();
  T* dst = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = src + r * d;
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= T(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      const T c = xr[j] - mean;
      var += c * c;
    }
    var /= T(d);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = (xr[j] - mean) * rs;
      xhat[r * d + j] = xh;
      dst[r * d + j] = xh * gn[j] + bs[j];
    }
  }
  if (tape.recording() &&
      (tape.traces(x) || tape.traces(gain) || tape.traces(bias))) {
    const int ix = tape.use_input(x), ig = tape.use_input(gain),
              ib = tape.use_input(bias);
    auto gs = gain.storage_ptr();
    auto xh = std::make_shared<std::vector<T>>(std::move(xhat));
    auto rs = std::make_shared<std::vector<T>>(std::move(rstd));
    tape.emit(out, [=](Tape<T>& tp, const T* g) {
      const T* gnp = gs->data.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* gr = g + r * d;
        const T* xhr = xh->data() + r * d;
        if (ix >= 0) {
          T* gx = tp.grad(ix) + r * d;
          T mg = T(0), mgx = T(0);
          for (std::size_t j = 0; j < d; ++j) {
            const T dxh = gr[j] * gnp[j];
            mg += dxh;
            mgx += dxh * xhr[j];
          }
          mg /= T(d);
          mgx /= T(d);
          for (std::size_t j = 0; j < d; ++j) {
            const T dxh = gr[j] * gnp[j];
            gx[j] += (*rs)[r] * (dxh - mg - xhr[j] * mgx);
          }
        }
        if (ig >= 0) {
          T* gg = tp.grad(ig);
          for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * xhr[j];
        }
        if (ib >= 0) {
          T* gb = tp.grad(ib);
          for (std::size_t j = 0; j < d; ++j) gb[j] += gr[j];
        }
      }
    });
  }
  return out;
}

// Gaussian error linear unit, tanh approximation. Works in T precision so
// the float path vectorizes; the backward recomputes the same tanh, so the
// gradient differentiates exactly the function the forward evaluated.
template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
  const T kC = T(0.7978845608028654);  // sqrt(2/pi)
  const T kA = T(0.044715);
  Tensor<T> out(x.shape());
  const T* src = x.data().data();
  T* dst = out.data().data();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T v = src[i];
    const T t = kernels::fast_tanh(kC * (v + kA * v * v * v));
    dst[i] = T(0.5) * v * (T(1) + t);
  }
  if (tape.recording() && tape.traces(x)) {
    const int ix = tape.use_input(x);
    auto xs = x.storage_ptr();
    tape.emit(out, [=](Tape<T>& tp, const T* g) {
      T* gx = tp.grad(ix);
      const T* xv = xs->data.data();
      for (std::size_t i = 0; i < xs->data.size(); ++i) {
        const T v = xv[i];
        const T t = kernels::fast_tanh(kC * (v + kA * v * v * v));
        const T du = kC * (T(1) + T(3) * kA * v * v);
        gx[i] += g[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du);
      }
    });
  }
  return out;
}

namespace detail {

template <typename T, typename Fwd, typename Bwd>
Tensor<T> elementwise_binary(Tape<T>& tape, const Tensor<T>& a,
                             const Tensor<T>& b, const char* name, Fwd fwd,
                             Bwd bwd) {
  check_dims(a.shape() == b.shape(), std::string(name) + ": shapes " +
                                         shape_str(a.shape()) + " vs " +
                                         shape_str(b.shape()));
  Tensor<T> out(a.shape());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < a.numel(); ++i) po[i] = fwd(pa[i], pb[i]);
  if (tape.recording() && (tape.traces(a) || tape.traces(b))) {
    const int ia = tape.use_input(a), ib = tape.use_input(b);
    auto as = a.storage_ptr();
    auto bs = b.storage_ptr();
    tape.emit(out, [=](Tape<T>& tp, const T* g) {
      T* ga = ia >= 0 ? tp.grad(ia) : nullptr;
      T* gb = ib >= 0 ? tp.grad(ib) : nullptr;
      for (std::size_t i = 0; i < as->data.size(); ++i)
        bwd(g[i], as->data[i], bs->data[i], ga ? ga + i : nullptr,
            gb ? gb + i : nullptr);
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return detail::elementwise_binary(
      tape, a, b, "add", [](T x, T y) { return x + y; },
      [](T g, T, T, T* ga, T* gb) {
        if (ga) *ga += g;
        if (gb) *gb += g;
      });
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return detail::elementwise_binary(
      tape, a, b, "sub", [](T x, T y) { return x - y; },
      [](T g, T, T, T* ga, T* gb) {
        if (ga) *ga += g;
        if (gb) *gb -= g;
      });
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return detail::elementwise_binary(
      tape, a, b, "mul", [](T x, T y) { return x * y; },
      [](T g, T x, T y, T* ga, T* gb) {
        if (ga) *ga += g * y;
        if (gb) *gb += g * x;
      });
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T c) {
  Tensor<T> out(x.shape());
  const T* src = x.data().data();
  T* dst = out.data().data();
  for (std::size_t i = 0; i < x.numel(); ++i) dst[i] = src[i] * c;
  if (tape.recording() && tape.traces(x)) {
    const int ix = tape.use_input(x);
    const std::size_t n = x.numel();
    tape.emit(out, [=](Tape<T>& tp, const T* g) {
      kernels::axpy(tp.grad(ix), c, g, n);
    });
  }
  return out;
}

// x[...,C] + b[C], broadcast over leading dims.
template <typename T>
Tensor<T> add_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& b) {
  check_dims(x.rank() >= 1 && b.rank() == 1 && b.dim(0) == x.dim(x.rank() - 1),
             "add_bias: " + shape_str(x.shape()) + " + " +
                 shape_str(b.shape()));
  const std::size_t c = b.dim(0);
  const std::size_t rows = x.numel() / c;
  Tensor<T> out(x.shape());
  const T* src = x.data().data();
  const T* pb = b.data().data();
  T* dst = out.data().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) dst[r * c + j] = src[r * c + j] + pb[j];
  if (tape.recording() && (tape.traces(x) || tape.traces(b))) {
    const int ix = tape.use_input(x), ib = tape.use_input(b);
    tape.emit(out, [=](Tape<T>& tp, const T* g) {
      if (ix >= 0) kernels::add_acc(tp.grad(ix), g, rows * c);
      if (ib >= 0) {
        T* gb = tp.grad(ib);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) gb[j] += g[r * c + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  T s = T(0);
  for (const T& v : x.data()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  if (tape.recording() && tape.traces(x)) {
    const int ix = tape.use_input(x);
    const std::size_t n = x.numel();
    tape.emit(out, [=](Tape<T>& tp, const T* g) {
      T* gx = tp.grad(ix);
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x) {
  check_usage(x.numel() > 0, "mean: empty tensor");
  return scale(tape, sum(tape, x), T(1) / T(x.numel()));
}

template <typename T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& x) {
  check_dims(x.rank() == 2, "transpose: want rank 2, got " +
                                shape_str(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor<T> out({n, m});
  kernels::transpose(out.data().data(), x.data().data(), m, n);
  if (tape.recording() && tape.traces(x)) {
    const int ix = tape.use_input(x);
    tape.emit(out, [=](Tape<T>& tp, const T* g) {
      T* gx = tp.grad(ix);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
  check_dims(shape_numel(shape) == x.numel(),
             "reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  Tensor<T> out(std::move(shape));
  auto src = x.data();
  std::copy(src.begin(), src.end(), out.data().begin());
  if (tape.recording() && tape.traces(x)) {
    const int ix = tape.use_input(x);
    const std::size_t n = x.numel();
    tape.emit(out, [=](Tape<T>& tp, const T* g) {
      kernels::add_acc(tp.grad(ix), g, n);
    });
  }
  return out;
}

// Columns [c0, c1) of a rank-2 tensor.
template <typename T>
Tensor<T> slice_cols(Tape<T>& tape, const Tensor<T>& x, std::size_t c0,
                     std::size_t c1) {
  check_dims(x.rank() == 2, "slice_cols: want rank 2");
  check_usage(c0 < c1 && c1 <= x.dim(1),
              "slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
                  ") of " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1), w = c1 - c0;
  Tensor<T> out({r, w});
  const T* src = x.data().data();
  T* dst = out.data().data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) dst[i * w + j] = src[i * c + c0 + j];
  if (tape.recording() && tape.traces(x)) {
    const int ix = tape.use_input(x);
    tape.emit(out, [=](Tape<T>& tp, const T* g) {
      T* gx = tp.grad(ix);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) gx[i * c + c0 + j] += g[i * w + j];
    });
  }
  return out;
}

// Horizontal concatenation of rank-2 tensors with equal row counts.
template <typename T>
Tensor<T> concat_cols(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  check_usage(!parts.empty(), "concat_cols: empty list");
  const std::size_t r = parts[0].dim(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    check_dims(p.rank() == 2 && p.dim(0) == r,
               "concat_cols: row mismatch " + shape_str(p.shape()));
    total += p.dim(1);
  }
  Tensor<T> out({r, total});
  T* dst = out.data().data();
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    const T* src = p.data().data();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j)
        dst[i * total + off + j] = src[i * w + j];
    off += w;
  }
  bool any = false;
  for (const auto& p : parts) any = any || tape.traces(p);
  if (tape.recording() && any) {
    std::vector<int> ids(parts.size());
    std::vector<std::size_t> widths(parts.size());
    for (std::size_t p = 0; p < parts.size(); ++p) {
      ids[p] = tape.use_input(parts[p]);
      widths[p] = parts[p].dim(1);
    }
    tape.emit(out, [=](Tape<T>& tp, const T* g) {
      std::size_t o = 0;
      for (std::size_t p = 0; p < ids.size(); ++p) {
        if (ids[p] >= 0) {
          T* gx = tp.grad(ids[p]);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < widths[p]; ++j)
              gx[i * widths[p] + j] += g[i * total + o + j];
        }
        o += widths[p];
      }
    });
  }
  return out;
}

// Vertical concatenation of rank-2 tensors with equal column counts.
template <typename T>
Tensor<T> concat_rows(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  check_usage(!parts.empty(), "concat_rows: empty list");
  const std::size_t c = parts[0].dim(1);
  std::size_t total = 0;
  for (const auto& p : parts) {
    check_dims(p.rank() == 2 && p.dim(1) == c,
               "concat_rows: column mismatch " + shape_str(p.shape()));
    total += p.dim(0);
  }
  Tensor<T> out({total, c});
  T* dst = out.data().data();
  std::size_t off = 0;
  for (const auto& p : parts) {
    auto src = p.data();
    std::copy(src.begin(), src.end(), dst + off);
    off += p.numel();
  }
  bool any = false;
  for (const auto& p : parts) any = any || tape.traces(p);
  if (tape.recording() && any) {
    std::vector<int> ids(parts.size());
    std::vector<std::size_t> sizes(parts.size());
    for (std::size_t p = 0; p < parts.size(); ++p) {
      ids[p] = tape.use_input(parts[p]);
      sizes[p] = parts[p].numel();
    }
    tape.emit(out, [=](Tape<T>& tp, const T* g) {
      std::size_t o = 0;
      for (std::size_t p = 0; p < ids.size(); ++p) {
        if (ids[p] >= 0) kernels::add_acc(tp.grad(ids[p]), g + o, sizes[p]);
        o += sizes[p];
      }
    });
  }
  return out;
}

// Row i of a rank-2 tensor as a rank-1 tensor.
template <typename T>
Tensor<T> take_row(Tape<T>& tape, const Tensor<T>& x, std::size_t i) {
  check_dims(x.rank() == 2, "take_row: want rank 2");
  check_usage(i < x.dim(0), "take_row: row " + std::to_string(i) + " of " +
                                shape_str(x.shape()));
  const std::size_t c = x.dim(1);
  Tensor<T> out({c});
  const T* src = x.data().data() + i * c;
  std::copy(src, src + c, out.data().begin());
  if (tape.recording() && tape.traces(x)) {
    const int ix = tape.use_input(x);
    tape.emit(out, [=](Tape<T>& tp, const T* g) {
      kernels::add_acc(tp.grad(ix) + i * c, g, c);
    });
  }
  return out;
}

// Stacks rank-1 tensors of equal length into a rank-2 tensor.
template <typename T>
Tensor<T> stack_rows(Tape<T>& tape, const std::vector<Tensor<T>>& rows) {
  check_usage(!rows.empty(), "stack_rows: empty list");
  const std::size_t c = rows[0].dim(0);
  for (const auto& r : rows)
    check_dims(r.rank() == 1 && r.dim(0) == c,
               "stack_rows: length mismatch " + shape_str(r.shape()));
  Tensor<T> out({rows.size(), c});
  T* dst = out.data().data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = rows[i].data();
    std::copy(src.begin(), src.end(), dst + i * c);
  }
  bool any = false;
  for (const auto& r : rows) any = any || tape.traces(r);
  if (tape.recording() && any) {
    std::vector<int> ids(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i)
      ids[i] = tape.use_input(rows[i]);
    tape.emit(out, [=](Tape<T>& tp, const T* g) {
      for (std::size_t i = 0; i < ids.size(); ++i)
        if (ids[i] >= 0) kernels::add_acc(tp.grad(ids[i]), g + i * c, c);
    });
  }
  return out;
}

// Elementwise square root; requires x >= 0. The subgradient at 0 is 0.
template <typename T>
Tensor<T> sqrt_elem(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* src = x.data().data();
  T* dst = out.data().data();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (src[i] < T(0)) throw NumericError("sqrt_elem: negative input");
    dst[i] = std::sqrt(src[i]);
  }
  if (tape.recording() && tape.traces(x)) {
    const int ix = tape.use_input(x);
    auto os = out.storage_ptr();
    tape.emit(out, [=](Tape<T>& tp, const T* g) {
      T* gx = tp.grad(ix);
      const T* y = os->data.data();
      for (std::size_t i = 0; i < os->data.size(); ++i)
        if (y[i] > T(0)) gx[i] += g[i] * T(0.5) / y[i];
    });
  }
  return out;
}

// log(1 + exp(x)) evaluated in the overflow-free form
// max(x, 0) + log1p(exp(-|x|)).
template <typename T>
Tensor<T> softplus(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* src = x.data().data();
  T* dst = out.data().data();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T v = src[i];
    dst[i] = (v > T(0) ? v : T(0)) + std::log1p(std::exp(-std::abs(v)));
  }
  if (tape.recording() && tape.traces(x)) {
    const int ix = tape.use_input(x);
    auto xs = x.storage_ptr();
    tape.emit(out, [=](Tape<T>& tp, const T* g) {
      T* gx = tp.grad(ix);
      for (std::size_t i = 0; i < xs->data.size(); ++i) {
        const T v = xs->data[i];
        const T s = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                              : std::exp(v) / (T(1) + std::exp(v));
        gx[i] += g[i] * s;
      }
    });
  }
  return out;
}

// x / ||x||_2 for rank-1 x; rejects the zero vector.
template <typename T>
Tensor<T> l2_normalize(Tape<T>& tape, const Tensor<T>& x) {
  check_dims(x.rank() == 1, "l2_normalize: want rank 1, got " +
                                shape_str(x.shape()));
  T nsq = T(0);
  for (const T& v : x.data()) nsq += v * v;
  if (!(nsq > T(0))) throw NumericError("l2_normalize: zero or invalid norm");
  const T n = std::sqrt(nsq);
  Tensor<T> out(x.shape());
  const T* src = x.data().data();
  T* dst = out.data().data();
  for (std::size_t i = 0; i < x.numel(); ++i) dst[i] = src[i] / n;
  if (tape.recording() && tape.traces(x)) {
    const int ix = tape.use_input(x);
    auto os = out.storage_ptr();
    tape.emit(out, [=](Tape<T>& tp, const T* g) {
      // d(x/n)/dx = (I - y y^T) / n
      const T* y = os->data.data();
      const std::size_t sz = os->data.size();
      T dot = T(0);
      for (std::size_t i = 0; i < sz; ++i) dot += g[i] * y[i];
      T* gx = tp.grad(ix);
      for (std::size_t i = 0; i < sz; ++i) gx[i] += (g[i] - y[i] * dot) / n;
    });
  }
  return out;
}

// Euclidean distance matrix: out[i,j] = ||a_i - b_j||_2 for a[B,D], b[M,D].
// The subgradient at coincident points is 0.
template <typename T>
Tensor<T> pairwise_l2(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  check_dims(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
             "pairwise_l2: " + shape_str(a.shape()) + " vs " +
                 shape_str(b.shape()));
  const std::size_t ba = a.dim(0), bb = b.dim(0), d = a.dim(1);
  Tensor<T> out({ba, bb});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < ba; ++i) {
    for (std::size_t j = 0; j < bb; ++j) {
      T s = T(0);
      for (std::size_t k = 0; k < d; ++k) {
        const T df = pa[i * d + k] - pb[j * d + k];
        s += df * df;
      }
      po[i * bb + j] = std::sqrt(s);
    }
  }
  tape.add_macs(std::uint64_t(ba) * bb * d);
  if (tape.recording() && (tape.traces(a) || tape.traces(b))) {
    const int ia = tape.use_input(a), ib = tape.use_input(b);
    auto as = a.storage_ptr();
    auto bs = b.storage_ptr();
    auto os = out.storage_ptr();
    tape.emit(out, [=](Tape<T>& tp, const T* g) {
      const T* av = as->data.data();
      const T* bv = bs->data.data();
      const T* dv = os->data.data();
      T* ga = ia >= 0 ? tp.grad(ia) : nullptr;
      T* gb = ib >= 0 ? tp.grad(ib) : nullptr;
      for (std::size_t i = 0; i < ba; ++i) {
        for (std::size_t j = 0; j < bb; ++j) {
          const T dist = dv[i * bb + j];
          if (!(dist > T(0))) continue;
          const T coef = g[i * bb + j] / dist;
          if (coef == T(0)) continue;
          for (std::size_t k = 0; k < d; ++k) {
            const T df = av[i * d + k] - bv[j * d + k];
            if (ga) ga[i * d + k] += coef * df;
            if (gb) gb[j * d + k] -= coef * df;
          }
        }
      }
    });
  }
  return out;
}

// Main diagonal of a square rank-2 tensor.
template <typename T>
Tensor<T> take_diag(Tape<T>& tape, const Tensor<T>& x) {
  check_dims(x.rank() == 2 && x.dim(0) == x.dim(1),
             "take_diag: want square, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0);
  Tensor<T> out({n});
  const T* src = x.data().data();
  T* dst = out.data().data();
  for (std::size_t i = 0; i < n; ++i) dst[i] = src[i * n + i];
  if (tape.recording() && tape.traces(x)) {
    const int ix = tape.use_input(x);
    tape.emit(out, [=](Tape<T>& tp, const T* g) {
      T* gx = tp.grad(ix);
      for (std::size_t i = 0; i < n; ++i) gx[i * n + i] += g[i];
    });
  }
  return out;
}

}  // namespace egotr
