#pragma once

#include <cstddef>
#include <span>
#include <vector>

// Dense kernels behind the transformer. Two implementations share one
// signature set:
//   bootleg::kernels       OpenMP-parallel, cache-tiled; used by the model.
//   bootleg::kernels::ref  plain serial loops; kept as the test oracle.
//
// All matrices are row-major. The parallel kernels partition work by output
// row (or output column for reductions over rows) and accumulate every
// output element in a fixed order, so results are independent of thread
// count and of how many other rows share the call.

namespace bootleg::kernels {

/// C[M,N] = A[M,K] * B[K,N]  (C += ... when accumulate).
template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A,
             const T* B, T* C, bool accumulate = false);

/// C[M,N] = A[K,M]^T * B[K,N]. Sums run over K in ascending order.
template <class T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A,
             const T* B, T* C, bool accumulate = false);

/// C[M,N] = A[M,K] * B[N,K]^T.
template <class T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A,
             const T* B, T* C, bool accumulate = false);

/// out[N] (+)= column sums of X[M,N], rows summed in order.
template <class T>
void colsum(std::size_t M, std::size_t N, const T* X, T* out,
            bool accumulate = true);

/// y = x*gamma + beta over rows of width D; mean/rstd per row are saved.
/// gamma/beta may be null for the parameter-free variant.
template <class T>
void layernorm_forward(std::size_t rows, std::size_t D, const T* x,
                       const T* gamma, const T* beta, T eps, T* y, T* mean,
                       T* rstd);

/// dx is overwritten; dgamma/dbeta (if non-null) are accumulated.
template <class T>
void layernorm_backward(std::size_t rows, std::size_t D, const T* x,
                        const T* gamma, const T* mean, const T* rstd,
                        const T* dy, T* dx, T* dgamma, T* dbeta);

/// Exact erf-based GELU.
template <class T>
void gelu_forward(std::size_t n, const T* x, T* y);

/// dx = dy * gelu'(x); dx may alias dy.
template <class T>
void gelu_backward(std::size_t n, const T* x, const T* dy, T* dx);

/// Row-wise softmax in place.
template <class T>
void softmax_rows(std::size_t rows, std::size_t cols, T* x);

/// Offsets into the attention-probability buffer: heads * L_s^2 per sequence.
std::vector<std::size_t> attention_prob_offsets(
    std::span<const std::size_t> seq_offsets, std::size_t heads);

/// Multi-head self-attention over ragged sequences. qkv is [N, 3D] laid out
/// as (q | k | v), each split into `heads` contiguous slices. Sequences are
/// [seq_offsets[s], seq_offsets[s+1]). probs receives softmax weights
/// (layout from attention_prob_offsets); out is [N, D].
template <class T>
void attention_forward(std::span<const std::size_t> seq_offsets,
                       std::size_t heads, std::size_t D, const T* qkv,
                       T* probs, T* out);

/// Gradient of attention_forward. dqkv is overwritten.
template <class T>
void attention_backward(std::span<const std::size_t> seq_offsets,
                        std::size_t heads, std::size_t D, const T* qkv,
                        const T* probs, const T* dout, T* dqkv);

}  // namespace bootleg::kernels

namespace bootleg::kernels::ref {

template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A,
             const T* B, T* C, bool accumulate = false);
template <class T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A,
             const T* B, T* C, bool accumulate = false);
template <class T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A,
             const T* B, T* C, bool accumulate = false);
template <class T>
void colsum(std::size_t M, std::size_t N, const T* X, T* out,
            bool accumulate = true);
template <class T>
void layernorm_forward(std::size_t rows, std::size_t D, const T* x,
                       const T* gamma, const T* beta, T eps, T* y, T* mean,
                       T* rstd);
template <class T>
void layernorm_backward(std::size_t rows, std::size_t D, const T* x,
                        const T* gamma, const T* mean, const T* rstd,
                        const T* dy, T* dx, T* dgamma, T* dbeta);
template <class T>
void gelu_forward(std::size_t n, const T* x, T* y);
template <class T>
void gelu_backward(std::size_t n, const T* x, const T* dy, T* dx);
template <class T>
void softmax_rows(std::size_t rows, std::size_t cols, T* x);
template <class T>
void attention_forward(std::span<const std::size_t> seq_offsets,
                       std::size_t heads, std::size_t D, const T* qkv,
                       T* probs, T* out);
template <class T>
void attention_backward(std::span<const std::size_t> seq_offsets,
                        std::size_t heads, std::size_t D, const T* qkv,
                        const T* probs, const T* dout, T* dqkv);

}  // namespace bootleg::kernels::ref
