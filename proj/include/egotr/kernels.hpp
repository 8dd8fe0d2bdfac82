// SPDX-License-Identifier: Apache-2.0
//
// Dense kernels on raw row-major arrays. Single-threaded, deterministic,
// no hidden parallelism: repeated calls with identical inputs produce
// identical bits. All matrix products accumulate into the destination so
// backward passes can fan gradients in without extra buffers.

#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace egotr {
namespace kernels {

namespace detail {

// Accumulates a fixed MR x NR block of A * B into C, keeping the partial
// sums in registers across the whole k loop. `a` points at the block's
// first row; its elements are addressed as a[r * as_r + p * as_p], which
// covers both the normal ([m,k], as_r=k, as_p=1) and the transposed
// ([k,m], as_r=1, as_p=m) layouts. Fixed bounds let the compiler unroll
// and vectorize the q loop.
template <typename T, std::size_t MR, std::size_t NR>
inline void gemm_block(T* c, const T* a, std::size_t as_r, std::size_t as_p,
                       const T* b, std::size_t n, std::size_t k) {
  T acc[MR][NR] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = b + p * n;
    if constexpr (NR >= 32) {
      // Wide blocks: gcc vectorizes the q loop directly.
      for (std::size_t r = 0; r < MR; ++r) {
        const T av = a[r * as_r + p * as_p];
        for (std::size_t q = 0; q < NR; ++q) acc[r][q] += av * brow[q];
      }
    } else {
      // Narrow blocks: without the fixed-size local copy gcc interleaves
      // across r with shuffles instead of vectorizing along q.
      T bl[NR];
      for (std::size_t q = 0; q < NR; ++q) bl[q] = brow[q];
      for (std::size_t r = 0; r < MR; ++r) {
        const T av = a[r * as_r + p * as_p];
        for (std::size_t q = 0; q < NR; ++q) acc[r][q] += av * bl[q];
      }
    }
  }
  for (std::size_t r = 0; r < MR; ++r) {
    T* crow = c + r * n;
    for (std::size_t q = 0; q < NR; ++q) crow[q] += acc[r][q];
  }
}

template <typename T>
void gemm_acc(T* c, const T* a, std::size_t as_r, std::size_t as_p,
              const T* b, std::size_t m, std::size_t k, std::size_t n) {
  constexpr std::size_t MR = 4;
  std::size_t i = 0;
  for (; i + MR <= m; i += MR) {
    const T* ai = a + i * as_r;
    T* ci = c + i * n;
    std::size_t j = 0;
    for (; j + 32 <= n; j += 32)
      gemm_block<T, MR, 32>(ci + j, ai, as_r, as_p, b + j, n, k);
    for (; j + 16 <= n; j += 16)
      gemm_block<T, MR, 16>(ci + j, ai, as_r, as_p, b + j, n, k);
    for (; j + 8 <= n; j += 8)
      gemm_block<T, MR, 8>(ci + j, ai, as_r, as_p, b + j, n, k);
    if (j < n) {
      for (std::size_t p = 0; p < k; ++p) {
        const T* brow = b + p * n;
        for (std::size_t r = 0; r < MR; ++r) {
          const T av = ai[r * as_r + p * as_p];
          T* crow = ci + r * n;
          for (std::size_t q = j; q < n; ++q) crow[q] += av * brow[q];
        }
      }
    }
  }
  for (; i < m; ++i) {
    const T* ai = a + i * as_r;
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p * as_p];
      const T* brow = b + p * n;
      for (std::size_t q = 0; q < n; ++q) crow[q] += av * brow[q];
    }
  }
}

}  // namespace detail

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn_acc(T* c, const T* a, const T* b, std::size_t m, std::size_t k,
                 std::size_t n) {
  detail::gemm_acc(c, a, k, std::size_t(1), b, m, k, n);
}

// C[m,n] += A^T * B where A is stored row-major as [k,m]
template <typename T>
void gemm_tn_acc(T* c, const T* a, const T* b, std::size_t m, std::size_t k,
                 std::size_t n) {
  detail::gemm_acc(c, a, std::size_t(1), m, b, m, k, n);
}

template <typename T>
void transpose(T* dst, const T* src, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

// C[m,n] += A[m,k] * B^T where B is stored row-major as [n,k].
// B is transposed into scratch first; the straightforward dot-product loop
// is several times slower than NN on long rows.
template <typename T>
void gemm_nt_acc(T* c, const T* a, const T* b, std::size_t m, std::size_t k,
                 std::size_t n) {
  static thread_local std::vector<T> scratch;
  scratch.resize(k * n);
  transpose(scratch.data(), b, n, k);
  gemm_nn_acc(c, a, scratch.data(), m, k, n);
}

// dst[i] += src[i]
template <typename T>
void add_acc(T* dst, const T* src, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
}

// dst[i] += alpha * src[i]
template <typename T>
void axpy(T* dst, T alpha, const T* src, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dst[i] += alpha * src[i];
}

// Single-precision exp built from plain float arithmetic so elementwise
// loops over it auto-vectorize. Reduction x = k*ln2 + r with ln2 split in
// two for an exact r, degree-5 polynomial on |r| <= ln2/2, then the 2^k
// scale applied by adding k to the exponent bits. Worst case is a couple
// of ulp; exact at 0. Input clamps to [-87, 87], which keeps every
// intermediate and the result normal.
inline float fast_exp(float x) {
  x = x > 87.0f ? 87.0f : (x < -87.0f ? -87.0f : x);
  const float kf = std::floor(1.44269504088896341f * x + 0.5f);
  float r = x - kf * 0.693359375f;
  r -= kf * -2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * (r * r) + r + 1.0f;
  const std::uint32_t bits =
      std::bit_cast<std::uint32_t>(p) + (std::uint32_t(std::int32_t(kf)) << 23);
  return std::bit_cast<float>(bits);
}

// Double overload stays on libm: the double instantiations back the
// finite-difference oracles and must not lose precision.
inline double fast_exp(double x) { return std::exp(x); }

inline float fast_tanh(float x) {
  const float e = fast_exp(2.0f * x);
  return 1.0f - 2.0f / (e + 1.0f);
}

inline double fast_tanh(double x) { return std::tanh(x); }

// Row-wise softmax with max subtraction; finite for any finite input.
// The max and sum reductions run over a fixed-width bank of independent
// lanes: the compiler turns the lane updates into vector ops, and the
// final collapse has one fixed order, so results stay deterministic (the
// lane association is part of the function's definition, not left to
// optimization flags).
template <typename T>
void softmax_rows(T* dst, const T* src, std::size_t rows, std::size_t cols) {
  constexpr std::size_t L = 16;
  for (std::size_t i = 0; i < rows; ++i) {
    const T* x = src + i * cols;
    T* y = dst + i * cols;
    T mx;
    std::size_t j;
    if (cols >= L) {
      T lane[L];
      for (std::size_t q = 0; q < L; ++q) lane[q] = x[q];
      for (j = L; j + L <= cols; j += L)
        for (std::size_t q = 0; q < L; ++q)
          lane[q] = x[j + q] > lane[q] ? x[j + q] : lane[q];
      mx = lane[0];
      for (std::size_t q = 1; q < L; ++q) mx = lane[q] > mx ? lane[q] : mx;
    } else {
      mx = x[0];
      j = 1;
    }
    for (; j < cols; ++j) mx = x[j] > mx ? x[j] : mx;
    for (j = 0; j < cols; ++j) y[j] = fast_exp(x[j] - mx);
    T sum = T(0);
    if (cols >= L) {
      T lane[L];
      for (std::size_t q = 0; q < L; ++q) lane[q] = y[q];
      for (j = L; j + L <= cols; j += L)
        for (std::size_t q = 0; q < L; ++q) lane[q] += y[j + q];
      for (std::size_t q = 0; q < L; ++q) sum += lane[q];
    } else {
      j = 0;
    }
    for (; j < cols; ++j) sum += y[j];
    const T inv = T(1) / sum;
    for (j = 0; j < cols; ++j) y[j] *= inv;
  }
}

// Given y = softmax(x) per row and dL/dy, accumulate dL/dx.
// dx_j = y_j * (dy_j - sum_k dy_k y_k)
template <typename T>
void softmax_rows_backward_acc(T* dx, const T* y, const T* dy, std::size_t rows,
                               std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    const T* yr = y + i * cols;
    const T* dr = dy + i * cols;
    T* xr = dx + i * cols;
    T dot = T(0);
    for (std::size_t j = 0; j < cols; ++j) dot += dr[j] * yr[j];
    for (std::size_t j = 0; j < cols; ++j) xr[j] += yr[j] * (dr[j] - dot);
  }
}

inline std::size_t conv_out_dim(std::size_t in, std::size_t kernel,
                                std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

// x[Cin,H,W] -> col[Cin*KH*KW, Ho*Wo], zero padding outside the image.
template <typename T>
void im2col(T* col, const T* x, std::size_t cin, std::size_t h, std::size_t w,
            std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
            std::size_t ho, std::size_t wo) {
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t p = 0; p < kh; ++p) {
      for (std::size_t q = 0; q < kw; ++q) {
        T* crow = col + ((c * kh + p) * kw + q) * (ho * wo);
        for (std::size_t oh = 0; oh < ho; ++oh) {
          const std::ptrdiff_t ih =
              std::ptrdiff_t(oh * stride + p) - std::ptrdiff_t(pad);
          const bool row_ok = ih >= 0 && ih < std::ptrdiff_t(h);
          for (std::size_t ow = 0; ow < wo; ++ow) {
            const std::ptrdiff_t iw =
                std::ptrdiff_t(ow * stride + q) - std::ptrdiff_t(pad);
            crow[oh * wo + ow] =
                (row_ok && iw >= 0 && iw < std::ptrdiff_t(w))
                    ? x[(c * h + std::size_t(ih)) * w + std::size_t(iw)]
                    : T(0);
          }
        }
      }
    }
  }
}

// Scatter-add of a column buffer back onto the input gradient.
template <typename T>
void col2im_acc(T* dx, const T* col, std::size_t cin, std::size_t h,
                std::size_t w, std::size_t kh, std::size_t kw,
                std::size_t stride, std::size_t pad, std::size_t ho,
                std::size_t wo) {
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t p = 0; p < kh; ++p) {
      for (std::size_t q = 0; q < kw; ++q) {
        const T* crow = col + ((c * kh + p) * kw + q) * (ho * wo);
        for (std::size_t oh = 0; oh < ho; ++oh) {
          const std::ptrdiff_t ih =
              std::ptrdiff_t(oh * stride + p) - std::ptrdiff_t(pad);
          if (ih < 0 || ih >= std::ptrdiff_t(h)) continue;
          for (std::size_t ow = 0; ow < wo; ++ow) {
            const std::ptrdiff_t iw =
                std::ptrdiff_t(ow * stride + q) - std::ptrdiff_t(pad);
            if (iw < 0 || iw >= std::ptrdiff_t(w)) continue;
            dx[(c * h + std::size_t(ih)) * w + std::size_t(iw)] +=
                crow[oh * wo + ow];
          }
        }
      }
    }
  }
}

// out[Cout,Ho,Wo] = w[Cout,Cin,KH,KW] (*) x[Cin,H,W] + b[Cout]
template <typename T>
void conv2d_forward(T* out, const T* x, const T* w, const T* b, std::size_t cin,
                    std::size_t h, std::size_t wd, std::size_t cout,
                    std::size_t kh, std::size_t kw, std::size_t stride,
                    std::size_t pad) {
  const std::size_t ho = conv_out_dim(h, kh, stride, pad);
  const std::size_t wo = conv_out_dim(wd, kw, stride, pad);
  const std::size_t ckk = cin * kh * kw;
  static thread_local std::vector<T> col;
  col.resize(ckk * ho * wo);
  im2col(col.data(), x, cin, h, wd, kh, kw, stride, pad, ho, wo);
  for (std::size_t co = 0; co < cout; ++co) {
    T* orow = out + co * ho * wo;
    for (std::size_t i = 0; i < ho * wo; ++i) orow[i] = b[co];
  }
  gemm_nn_acc(out, w, col.data(), cout, ckk, ho * wo);
}

// Accumulates dL/dx, dL/dw, dL/db for conv2d_forward. Any of the three
// destinations may be null to skip that gradient.
template <typename T>
void conv2d_backward_acc(T* dx, T* dw, T* db, const T* x, const T* w,
                         const T* gout, std::size_t cin, std::size_t h,
                         std::size_t wd, std::size_t cout, std::size_t kh,
                         std::size_t kw, std::size_t stride, std::size_t pad) {
  const std::size_t ho = conv_out_dim(h, kh, stride, pad);
  const std::size_t wo = conv_out_dim(wd, kw, stride, pad);
  const std::size_t ckk = cin * kh * kw;
  const std::size_t cells = ho * wo;
  static thread_local std::vector<T> col;
  if (db != nullptr) {
    for (std::size_t co = 0; co < cout; ++co) {
      T s = T(0);
      const T* grow = gout + co * cells;
      for (std::size_t i = 0; i < cells; ++i) s += grow[i];
      db[co] += s;
    }
  }
  if (dw != nullptr) {
    col.resize(ckk * cells);
    im2col(col.data(), x, cin, h, wd, kh, kw, stride, pad, ho, wo);
    gemm_nt_acc(dw, gout, col.data(), cout, cells, ckk);
  }
  if (dx != nullptr) {
    static thread_local std::vector<T> dcol;
    dcol.assign(ckk * cells, T(0));
    gemm_tn_acc(dcol.data(), w, gout, ckk, cout, cells);
    col2im_acc(dx, dcol.data(), cin, h, wd, kh, kw, stride, pad, ho, wo);
  }
}

}  // namespace kernels
}  // namespace egotr
