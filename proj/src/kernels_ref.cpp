// Serial reference kernels. Straight textbook loops, no tiling; these are the
// oracle the parallel kernels are tested against.

#include <algorithm>
#include <cmath>
#include <numbers>

#include "bootleg/kernels.hpp"

namespace bootleg::kernels::ref {

template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A,
             const T* B, T* C, bool accumulate) {
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      T s = accumulate ? C[i * N + j] : T{0};
      for (std::size_t k = 0; k < K; ++k) s += A[i * K + k] * B[k * N + j];
      C[i * N + j] = s;
    }
}

template <class T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A,
             const T* B, T* C, bool accumulate) {
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      T s = accumulate ? C[i * N + j] : T{0};
      for (std::size_t k = 0; k < K; ++k) s += A[k * M + i] * B[k * N + j];
      C[i * N + j] = s;
    }
}

template <class T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A,
             const T* B, T* C, bool accumulate) {
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      T s = accumulate ? C[i * N + j] : T{0};
      for (std::size_t k = 0; k < K; ++k) s += A[i * K + k] * B[j * K + k];
      C[i * N + j] = s;
    }
}

template <class T>
void colsum(std::size_t M, std::size_t N, const T* X, T* out, bool accumulate) {
  for (std::size_t j = 0; j < N; ++j) {
    T s = accumulate ? out[j] : T{0};
    for (std::size_t i = 0; i < M; ++i) s += X[i * N + j];
    out[j] = s;
  }
}

template <class T>
void layernorm_forward(std::size_t rows, std::size_t D, const T* x,
                       const T* gamma, const T* beta, T eps, T* y, T* mean,
                       T* rstd) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * D;
    T mu = 0;
    for (std::size_t j = 0; j < D; ++j) mu += xr[j];
    mu /= static_cast<T>(D);
    T var = 0;
    for (std::size_t j = 0; j < D; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(D);
    const T rs = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < D; ++j) {
      T v = (xr[j] - mu) * rs;
      if (gamma) v = v * gamma[j] + beta[j];
      y[r * D + j] = v;
    }
    mean[r] = mu;
    rstd[r] = rs;
  }
}

template <class T>
void layernorm_backward(std::size_t rows, std::size_t D, const T* x,
                        const T* gamma, const T* mean, const T* rstd,
                        const T* dy, T* dx, T* dgamma, T* dbeta) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * D;
    const T* gr = dy + r * D;
    T sum_g = 0, sum_gx = 0;
    for (std::size_t j = 0; j < D; ++j) {
      const T xhat = (xr[j] - mean[r]) * rstd[r];
      const T g = gamma ? gr[j] * gamma[j] : gr[j];
      sum_g += g;
      sum_gx += g * xhat;
      if (dgamma) dgamma[j] += gr[j] * xhat;
      if (dbeta) dbeta[j] += gr[j];
    }
    for (std::size_t j = 0; j < D; ++j) {
      const T xhat = (xr[j] - mean[r]) * rstd[r];
      const T g = gamma ? gr[j] * gamma[j] : gr[j];
      dx[r * D + j] = rstd[r] * (g - sum_g / static_cast<T>(D) -
                                 xhat * sum_gx / static_cast<T>(D));
    }
  }
}

template <class T>
void gelu_forward(std::size_t n, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i)
    y[i] = T{0.5} * x[i] * (T{1} + std::erf(x[i] / std::numbers::sqrt2_v<T>));
}

template <class T>
void gelu_backward(std::size_t n, const T* x, const T* dy, T* dx) {
  for (std::size_t i = 0; i < n; ++i) {
    const T cdf = T{0.5} * (T{1} + std::erf(x[i] / std::numbers::sqrt2_v<T>));
    const T pdf = std::exp(T{-0.5} * x[i] * x[i]) /
                  std::sqrt(T{2} * std::numbers::pi_v<T>);
    dx[i] = dy[i] * (cdf + x[i] * pdf);
  }
}

template <class T>
void softmax_rows(std::size_t rows, std::size_t cols, T* x) {
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = x + r * cols;
    const T mx = *std::max_element(row, row + cols);
    T s = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    for (std::size_t j = 0; j < cols; ++j) row[j] /= s;
  }
}

template <class T>
void attention_forward(std::span<const std::size_t> seq_offsets,
                       std::size_t heads, std::size_t D, const T* qkv,
                       T* probs, T* out) {
  const std::size_t dh = D / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  const auto poff = attention_prob_offsets(seq_offsets, heads);
  for (std::size_t s = 0; s + 1 < seq_offsets.size(); ++s) {
    const std::size_t b = seq_offsets[s], L = seq_offsets[s + 1] - b;
    for (std::size_t h = 0; h < heads; ++h) {
      T* P = probs + poff[s] + h * L * L;
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j) {
          T acc = 0;
          for (std::size_t c = 0; c < dh; ++c)
            acc += qkv[(b + i) * 3 * D + h * dh + c] *
                   qkv[(b + j) * 3 * D + D + h * dh + c];
          P[i * L + j] = acc * scale;
        }
      softmax_rows(L, L, P);
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t c = 0; c < dh; ++c) {
          T acc = 0;
          for (std::size_t j = 0; j < L; ++j)
            acc += P[i * L + j] * qkv[(b + j) * 3 * D + 2 * D + h * dh + c];
          out[(b + i) * D + h * dh + c] = acc;
        }
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
  const std::size_t total = seq_offsets.back();
  std::fill(dqkv, dqkv + total * 3 * D, T{0});
  for (std::size_t s = 0; s + 1 < seq_offsets.size(); ++s) {
    const std::size_t b = seq_offsets[s], L = seq_offsets[s + 1] - b;
    std::vector<T> dS(L * L);
    for (std::size_t h = 0; h < heads; ++h) {
      const T* P = probs + poff[s] + h * L * L;
      auto q = [&](std::size_t i, std::size_t c) { return qkv[(b + i) * 3 * D + h * dh + c]; };
      auto k = [&](std::size_t i, std::size_t c) { return qkv[(b + i) * 3 * D + D + h * dh + c]; };
      auto v = [&](std::size_t i, std::size_t c) { return qkv[(b + i) * 3 * D + 2 * D + h * dh + c]; };
      auto dO = [&](std::size_t i, std::size_t c) { return dout[(b + i) * D + h * dh + c]; };
      // dP = dO V^T, dV = P^T dO
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j) {
          T acc = 0;
          for (std::size_t c = 0; c < dh; ++c) acc += dO(i, c) * v(j, c);
          dS[i * L + j] = acc;
        }
      for (std::size_t j = 0; j < L; ++j)
        for (std::size_t c = 0; c < dh; ++c) {
          T acc = 0;
          for (std::size_t i = 0; i < L; ++i) acc += P[i * L + j] * dO(i, c);
          dqkv[(b + j) * 3 * D + 2 * D + h * dh + c] = acc;
        }
      for (std::size_t i = 0; i < L; ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < L; ++j) dot += dS[i * L + j] * P[i * L + j];
        for (std::size_t j = 0; j < L; ++j)
          dS[i * L + j] = P[i * L + j] * (dS[i * L + j] - dot) * scale;
      }
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t c = 0; c < dh; ++c) {
          T acc = 0;
          for (std::size_t j = 0; j < L; ++j) acc += dS[i * L + j] * k(j, c);
          dqkv[(b + i) * 3 * D + h * dh + c] = acc;
        }
      for (std::size_t j = 0; j < L; ++j)
        for (std::size_t c = 0; c < dh; ++c) {
          T acc = 0;
          for (std::size_t i = 0; i < L; ++i) acc += dS[i * L + j] * q(i, c);
          dqkv[(b + j) * 3 * D + D + h * dh + c] = acc;
        }
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

}  // namespace bootleg::kernels::ref
