#include "bootleg/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <type_traits>
#include <cmath>
#include <numbers>

namespace bootleg::kernels {

namespace {

// Column tile held in registers: 1 KiB of accumulators per row.
template <class T>
constexpr std::size_t kTile = 256 / sizeof(T);

// Rows per micro-tile. Every output element is accumulated as
// acc += a[i,k] * b[k,j] for k = 0..K-1 regardless of which path handles
// the row, so a row's result never depends on its neighbours.
constexpr std::size_t kRows = 4;

template <class T, std::size_t MR, std::size_t JB>
inline void micro_nn(std::size_t K, std::size_t N, const T* A, std::size_t lda,
                     const T* B, T* C, std::size_t j0, bool accumulate) {
  T acc[MR][JB];
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t j = 0; j < JB; ++j)
      acc[r][j] = accumulate ? C[r * N + j0 + j] : T{0};
  for (std::size_t k = 0; k < K; ++k) {
    const T* b = B + k * N + j0;
    for (std::size_t r = 0; r < MR; ++r) {
      const T a = A[r * lda + k];
#pragma omp simd
      for (std::size_t j = 0; j < JB; ++j) acc[r][j] += a * b[j];
    }
  }
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t j = 0; j < JB; ++j) C[r * N + j0 + j] = acc[r][j];
}

template <class T, std::size_t MR>
inline void edge_nn(std::size_t K, std::size_t N, const T* A, std::size_t lda,
                    const T* B, T* C, std::size_t j0, bool accumulate) {
  const std::size_t jn = N - j0;
  T acc[MR][kTile<T>];
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t j = 0; j < jn; ++j)
      acc[r][j] = accumulate ? C[r * N + j0 + j] : T{0};
  for (std::size_t k = 0; k < K; ++k) {
    const T* b = B + k * N + j0;
    for (std::size_t r = 0; r < MR; ++r) {
      const T a = A[r * lda + k];
#pragma omp simd
      for (std::size_t j = 0; j < jn; ++j) acc[r][j] += a * b[j];
    }
  }
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t j = 0; j < jn; ++j) C[r * N + j0 + j] = acc[r][j];
}

template <class T, std::size_t MR>
inline void rows_nn(std::size_t N, std::size_t K, const T* A, const T* B,
                    T* C, bool accumulate) {
  constexpr std::size_t JB = kTile<T>;
  std::size_t j0 = 0;
  for (; j0 + JB <= N; j0 += JB)
    micro_nn<T, MR, JB>(K, N, A, K, B, C, j0, accumulate);
  // Narrow fixed-width tails keep head-sized outputs (dh = 8..32) in registers.
  if constexpr (JB > 32) {
    if (j0 + 32 <= N) {
      micro_nn<T, MR, 32>(K, N, A, K, B, C, j0, accumulate);
      j0 += 32;
    }
  }
  if (j0 + 16 <= N) {
    micro_nn<T, MR, 16>(K, N, A, K, B, C, j0, accumulate);
    j0 += 16;
  }
  if (j0 + 8 <= N) {
    micro_nn<T, MR, 8>(K, N, A, K, B, C, j0, accumulate);
    j0 += 8;
  }
  if (j0 < N) edge_nn<T, MR>(K, N, A, K, B, C, j0, accumulate);
}

template <class T>
void gemm_nn_serial(std::size_t M, std::size_t N, std::size_t K, const T* A,
                    const T* B, T* C, bool accumulate) {
  std::size_t i = 0;
  for (; i + kRows <= M; i += kRows)
    rows_nn<T, kRows>(N, K, A + i * K, B, C + i * N, accumulate);
  for (; i < M; ++i) rows_nn<T, 1>(N, K, A + i * K, B, C + i * N, accumulate);
}

template <class T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  constexpr std::size_t kb = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += kb)
    for (std::size_t j0 = 0; j0 < cols; j0 += kb)
      for (std::size_t i = i0; i < std::min(rows, i0 + kb); ++i)
        for (std::size_t j = j0; j < std::min(cols, j0 + kb); ++j)
          dst[j * rows + i] = src[i * cols + j];
}

}  // namespace

template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A,
             const T* B, T* C, bool accumulate) {
  const std::size_t tiles = (M + kRows - 1) / kRows;
#pragma omp parallel for schedule(static) if (M * N * K > (1u << 15))
  for (std::size_t t = 0; t < tiles; ++t) {
    const std::size_t i = t * kRows;
    if (i + kRows <= M) {
      rows_nn<T, kRows>(N, K, A + i * K, B, C + i * N, accumulate);
    } else {
      for (std::size_t r = i; r < M; ++r)
        rows_nn<T, 1>(N, K, A + r * K, B, C + r * N, accumulate);
    }
  }
}

template <class T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A,
             const T* B, T* C, bool accumulate) {
  // Transposing A once turns this into the row-tiled nn kernel; the sum over
  // K still runs in ascending order.
  std::vector<T> At(M * K);
  transpose(K, M, A, At.data());
  gemm_nn(M, N, K, At.data(), B, C, accumulate);
}

template <class T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A,
             const T* B, T* C, bool accumulate) {
  std::vector<T> Bt(K * N);
  transpose(N, K, B, Bt.data());
  gemm_nn(M, N, K, A, Bt.data(), C, accumulate);
}

template <class T>
void colsum(std::size_t M, std::size_t N, const T* X, T* out, bool accumulate) {
  constexpr std::size_t JB = kTile<T>;
  const std::size_t blocks = (N + JB - 1) / JB;
#pragma omp parallel for schedule(static) if (M * N > (1u << 15))
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    const std::size_t j0 = blk * JB, jn = std::min(N, j0 + JB) - j0;
    T acc[JB];
    for (std::size_t j = 0; j < jn; ++j) acc[j] = accumulate ? out[j0 + j] : T{0};
    for (std::size_t i = 0; i < M; ++i) {
      const T* x = X + i * N + j0;
#pragma omp simd
      for (std::size_t j = 0; j < jn; ++j) acc[j] += x[j];
    }
    for (std::size_t j = 0; j < jn; ++j) out[j0 + j] = acc[j];
  }
}

template <class T>
void layernorm_forward(std::size_t rows, std::size_t D, const T* x,
                       const T* gamma, const T* beta, T eps, T* y, T* mean,
                       T* rstd) {
#pragma omp parallel for schedule(static) if (rows * D > (1u << 14))
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * D;
    T* yr = y + r * D;
    T mu = 0;
#pragma omp simd reduction(+ : mu)
    for (std::size_t j = 0; j < D; ++j) mu += xr[j];
    mu /= static_cast<T>(D);
    T var = 0;
#pragma omp simd reduction(+ : var)
    for (std::size_t j = 0; j < D; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(D);
    const T rs = T{1} / std::sqrt(var + eps);
    if (gamma) {
#pragma omp simd
      for (std::size_t j = 0; j < D; ++j) yr[j] = (xr[j] - mu) * rs * gamma[j] + beta[j];
    } else {
#pragma omp simd
      for (std::size_t j = 0; j < D; ++j) yr[j] = (xr[j] - mu) * rs;
    }
    mean[r] = mu;
    rstd[r] = rs;
  }
}

template <class T>
void layernorm_backward(std::size_t rows, std::size_t D, const T* x,
                        const T* gamma, const T* mean, const T* rstd,
                        const T* dy, T* dx, T* dgamma, T* dbeta) {
  const bool want_param_grads = dgamma != nullptr;
  std::vector<T> xhat_dy(want_param_grads ? rows * D : 0);
#pragma omp parallel for schedule(static) if (rows * D > (1u << 14))
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * D;
    const T* gr = dy + r * D;
    T sum_g = 0, sum_gx = 0;
    const T mu = mean[r], rs = rstd[r];
#pragma omp simd reduction(+ : sum_g, sum_gx)
    for (std::size_t j = 0; j < D; ++j) {
      const T xhat = (xr[j] - mu) * rs;
      const T g = gamma ? gr[j] * gamma[j] : gr[j];
      sum_g += g;
      sum_gx += g * xhat;
    }
    if (want_param_grads) {
#pragma omp simd
      for (std::size_t j = 0; j < D; ++j) xhat_dy[r * D + j] = gr[j] * ((xr[j] - mu) * rs);
    }
    const T inv_d = T{1} / static_cast<T>(D);
#pragma omp simd
    for (std::size_t j = 0; j < D; ++j) {
      const T xhat = (xr[j] - mean[r]) * rstd[r];
      const T g = gamma ? gr[j] * gamma[j] : gr[j];
      dx[r * D + j] = rstd[r] * (g - sum_g * inv_d - xhat * sum_gx * inv_d);
    }
  }
  if (want_param_grads) colsum(rows, D, xhat_dy.data(), dgamma, true);
  if (dbeta) colsum(rows, D, dy, dbeta, true);
}

namespace {

// exp for softmax and GELU: Cody-Waite reduction and a Taylor polynomial, written so
// the compiler can vectorise it. Float error is about 2 ulp; arguments are
// clamped to the normal range, so tiny results stay positive instead of 0.
template <class T>
inline T exp_poly(T x) {
  using I = std::conditional_t<sizeof(T) == 4, std::int32_t, std::int64_t>;
  constexpr bool f32 = sizeof(T) == 4;
  constexpr T lo = f32 ? T(-87.0) : T(-708.0);
  constexpr T hi = f32 ? T(88.0) : T(709.0);
  constexpr T log2e = T(1.4426950408889634);
  constexpr T ln2_hi = f32 ? T(0.693145751953125) : T(0.6931471803691238);
  constexpr T ln2_lo = f32 ? T(1.428606765330187e-06) : T(1.9082149292705877e-10);
  constexpr int terms = f32 ? 8 : 14;
  constexpr int bias = f32 ? 127 : 1023;
  constexpr int mant = f32 ? 23 : 52;
  x = x < lo ? lo : (x > hi ? hi : x);
  // Adding and subtracting 1.5 * 2^mant rounds to the nearest integer
  // without a call the vectoriser would reject.
  constexpr T shifter = f32 ? T(12582912.0) : T(6755399441055744.0);
  const T n = (x * log2e + shifter) - shifter;
  const T r = (x - n * ln2_hi) - n * ln2_lo;
  constexpr auto inv_fact = [] {
    std::array<T, terms> c{};
    c[0] = T(1);
    for (int k = 1; k < terms; ++k) c[k] = c[k - 1] / T(k);
    return c;
  }();
  T p = inv_fact[terms - 1];
#pragma GCC unroll 16
  for (int k = terms - 2; k >= 0; --k) p = p * r + inv_fact[k];
  const I bits = (static_cast<I>(n) + bias) << mant;
  return p * std::bit_cast<T>(bits);
}

// Standard normal CDF. Float uses a vectorisable erfc fit (relative error
// about 1e-7) on top of exp_poly; double keeps the libm erf so gradient
// checks see the exact function.
template <class T>
inline T normal_cdf(T x) {
  if constexpr (sizeof(T) == 4) {
    const T z = std::abs(x) * T(0.70710678118654752);
    const T t = T(1) / (T(1) + T(0.5) * z);
    const T poly =
        -z * z - T(1.26551223) +
        t * (T(1.00002368) +
             t * (T(0.37409196) +
                  t * (T(0.09678418) +
                       t * (T(-0.18628806) +
                            t * (T(0.27886807) +
                                 t * (T(-1.13520398) +
                                      t * (T(1.48851587) +
                                           t * (T(-0.82215223) + t * T(0.17087277)))))))));
    const T half_erfc = T(0.5) * t * exp_poly(poly);
    return x >= 0 ? T(1) - half_erfc : half_erfc;
  } else {
    return T{0.5} * (T{1} + std::erf(x * (std::numbers::sqrt2_v<T> / T{2})));
  }
}

template <class T>
inline T normal_pdf(T x) {
  const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * (std::numbers::sqrt2_v<T> / T{2});
  if constexpr (sizeof(T) == 4)
    return exp_poly(T{-0.5} * x * x) * inv_sqrt_2pi;
  else
    return std::exp(T{-0.5} * x * x) * inv_sqrt_2pi;
}

}  // namespace

namespace {

constexpr std::size_t kChunk = 4096;

template <class T>
void gelu_forward_chunk(std::size_t n, const T* __restrict x, T* __restrict y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * normal_cdf(x[i]);
}

template <class T>
void gelu_backward_chunk(std::size_t n, const T* __restrict x, const T* dy, T* dx) {
  for (std::size_t i = 0; i < n; ++i) {
    const T xi = x[i];
    dx[i] = dy[i] * (normal_cdf(xi) + xi * normal_pdf(xi));
  }
}

}  // namespace

template <class T>
void gelu_forward(std::size_t n, const T* x, T* y) {
  const std::size_t chunks = (n + kChunk - 1) / kChunk;
#pragma omp parallel for schedule(static) if (chunks > 8)
  for (std::size_t c = 0; c < chunks; ++c)
    gelu_forward_chunk(std::min(kChunk, n - c * kChunk), x + c * kChunk, y + c * kChunk);
}

template <class T>
void gelu_backward(std::size_t n, const T* x, const T* dy, T* dx) {
  const std::size_t chunks = (n + kChunk - 1) / kChunk;
#pragma omp parallel for schedule(static) if (chunks > 8)
  for (std::size_t c = 0; c < chunks; ++c)
    gelu_backward_chunk(std::min(kChunk, n - c * kChunk), x + c * kChunk, dy + c * kChunk,
                        dx + c * kChunk);
}

namespace {

template <class T>
void softmax_row(std::size_t cols, T* row) {
  // Vector reductions: the summation order depends only on `cols`.
  T mx = row[0];
#pragma omp simd reduction(max : mx)
  for (std::size_t j = 1; j < cols; ++j) mx = row[j] > mx ? row[j] : mx;
  T s = 0;
#pragma omp simd reduction(+ : s)
  for (std::size_t j = 0; j < cols; ++j) {
    row[j] = exp_poly(row[j] - mx);
    s += row[j];
  }
  const T inv = T{1} / s;
  for (std::size_t j = 0; j < cols; ++j) row[j] *= inv;
}

}  // namespace

template <class T>
void softmax_rows(std::size_t rows, std::size_t cols, T* x) {
#pragma omp parallel for schedule(static) if (rows * cols > (1u << 14))
  for (std::size_t r = 0; r < rows; ++r) softmax_row(cols, x + r * cols);
}

std::vector<std::size_t> attention_prob_offsets(
    std::span<const std::size_t> seq_offsets, std::size_t heads) {
  std::vector<std::size_t> off(seq_offsets.size(), 0);
  for (std::size_t s = 0; s + 1 < seq_offsets.size(); ++s) {
    const std::size_t L = seq_offsets[s + 1] - seq_offsets[s];
    off[s + 1] = off[s] + heads * L * L;
  }
  return off;
}

namespace {

// Gathers one head's (q, k^T, v) slices into contiguous scratch.
template <class T>
struct HeadScratch {
  std::vector<T> q, kt, v, dO, tmp, tmp2;

  void gather(const T* qkv, std::size_t b, std::size_t L, std::size_t D,
              std::size_t h, std::size_t dh) {
    q.resize(L * dh);
    kt.resize(dh * L);
    v.resize(L * dh);
    for (std::size_t i = 0; i < L; ++i) {
      const T* row = qkv + (b + i) * 3 * D + h * dh;
      for (std::size_t c = 0; c < dh; ++c) {
        q[i * dh + c] = row[c];
        kt[c * L + i] = row[D + c];
        v[i * dh + c] = row[2 * D + c];
      }
    }
  }
};

}  // namespace

template <class T>
void attention_forward(std::span<const std::size_t> seq_offsets,
                       std::size_t heads, std::size_t D, const T* qkv,
                       T* probs, T* out) {
  const std::size_t dh = D / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  const auto poff = attention_prob_offsets(seq_offsets, heads);
  const std::size_t nseq = seq_offsets.size() - 1;
  const std::size_t jobs = nseq * heads;
#pragma omp parallel
  {
    HeadScratch<T> sc;
#pragma omp for schedule(static)
    for (std::size_t job = 0; job < jobs; ++job) {
      const std::size_t s = job / heads, h = job % heads;
      const std::size_t b = seq_offsets[s], L = seq_offsets[s + 1] - b;
      if (L == 0) continue;
      sc.gather(qkv, b, L, D, h, dh);
      T* P = probs + poff[s] + h * L * L;
      gemm_nn_serial(L, L, dh, sc.q.data(), sc.kt.data(), P, false);
      for (std::size_t i = 0; i < L * L; ++i) P[i] *= scale;
      for (std::size_t i = 0; i < L; ++i) softmax_row(L, P + i * L);
      sc.tmp.resize(L * dh);
      gemm_nn_serial(L, dh, L, P, sc.v.data(), sc.tmp.data(), false);
      for (std::size_t i = 0; i < L; ++i)
        std::copy_n(sc.tmp.data() + i * dh, dh, out + (b + i) * D + h * dh);
    }
  }
}

template <class T>
void attention_backward(std::span<const std::size_t> seq_offsets,
                        std::size_t heads, std::size_t D, const T* qkv,
                        const T* probs, const T* dout, T* dqkv) {
  const std::size_t dh = D / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  const auto poff = attention_prob_offsets(seq_offsets, heads);
  const std::size_t nseq = seq_offsets.size() - 1;
  const std::size_t jobs = nseq * heads;
#pragma omp parallel
  {
    HeadScratch<T> sc;
    std::vector<T> dS, Pt, vt, dSt, k;
#pragma omp for schedule(static)
    for (std::size_t job = 0; job < jobs; ++job) {
      const std::size_t s = job / heads, h = job % heads;
      const std::size_t b = seq_offsets[s], L = seq_offsets[s + 1] - b;
      if (L == 0) continue;
      sc.gather(qkv, b, L, D, h, dh);
      const T* P = probs + poff[s] + h * L * L;
      sc.dO.resize(L * dh);
      for (std::size_t i = 0; i < L; ++i)
        std::copy_n(dout + (b + i) * D + h * dh, dh, sc.dO.data() + i * dh);

      // dP = dO V^T
      vt.resize(dh * L);
      transpose(L, dh, sc.v.data(), vt.data());
      dS.resize(L * L);
      gemm_nn_serial(L, L, dh, sc.dO.data(), vt.data(), dS.data(), false);

      // dV = P^T dO
      Pt.resize(L * L);
      transpose(L, L, P, Pt.data());
      sc.tmp.resize(L * dh);
      gemm_nn_serial(L, dh, L, Pt.data(), sc.dO.data(), sc.tmp.data(), false);
      for (std::size_t j = 0; j < L; ++j)
        std::copy_n(sc.tmp.data() + j * dh, dh, dqkv + (b + j) * 3 * D + 2 * D + h * dh);

      // softmax backward, folded with the 1/sqrt(dh) scale
      for (std::size_t i = 0; i < L; ++i) {
        T dot = 0;
#pragma omp simd reduction(+ : dot)
        for (std::size_t j = 0; j < L; ++j) dot += dS[i * L + j] * P[i * L + j];
        for (std::size_t j = 0; j < L; ++j)
          dS[i * L + j] = P[i * L + j] * (dS[i * L + j] - dot) * scale;
      }

      // dQ = dS K
      k.resize(L * dh);
      transpose(dh, L, sc.kt.data(), k.data());
      gemm_nn_serial(L, dh, L, dS.data(), k.data(), sc.tmp.data(), false);
      for (std::size_t i = 0; i < L; ++i)
        std::copy_n(sc.tmp.data() + i * dh, dh, dqkv + (b + i) * 3 * D + h * dh);

      // dK = dS^T Q
      dSt.resize(L * L);
      transpose(L, L, dS.data(), dSt.data());
      gemm_nn_serial(L, dh, L, dSt.data(), sc.q.data(), sc.tmp.data(), false);
      for (std::size_t j = 0; j < L; ++j)
        std::copy_n(sc.tmp.data() + j * dh, dh, dqkv + (b + j) * 3 * D + D + h * dh);
    }
  }
}

#define BOOTLEG_INSTANTIATE(T)                                                   \
  template void gemm_nn<T>(std::size_t, std::size_t, std::size_t, const T*,      \
                           const T*, T*, bool);                                  \
  template void gemm_tn<T>(std::size_t, std::size_t, std::size_t, const T*,      \
                           const T*, T*, bool);                                  \
  template void gemm_nt<T>(std::size_t, std::size_t, std::size_t, const T*,      \
                           const T*, T*, bool);                                  \
  template void colsum<T>(std::size_t, std::size_t, const T*, T*, bool);         \
  template void layernorm_forward<T>(std::size_t, std::size_t, const T*,         \
                                     const T*, const T*, T, T*, T*, T*);         \
  template void layernorm_backward<T>(std::size_t, std::size_t, const T*,        \
                                      const T*, const T*, const T*, const T*,    \
                                      T*, T*, T*);                               \
  template void gelu_forward<T>(std::size_t, const T*, T*);                      \
  template void gelu_backward<T>(std::size_t, const T*, const T*, T*);           \
  template void softmax_rows<T>(std::size_t, std::size_t, T*);                   \
  template void attention_forward<T>(std::span<const std::size_t>, std::size_t,  \
                                     std::size_t, const T*, T*, T*);             \
  template void attention_backward<T>(std::span<const std::size_t>,              \
                                      std::size_t, std::size_t, const T*,        \
                                      const T*, const T*, T*);

BOOTLEG_INSTANTIATE(float)
BOOTLEG_INSTANTIATE(double)

}  // namespace bootleg::kernels
