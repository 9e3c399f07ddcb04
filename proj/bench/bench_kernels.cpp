// Serial reference kernels against the OpenMP kernels on model-sized shapes.
#include <benchmark/benchmark.h>

#include <vector>

#include "bootleg/kernels.hpp"
#include "bootleg/rng.hpp"

namespace k = bootleg::kernels;

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
  bootleg::Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

template <bool Ref>
void BM_GemmNN(benchmark::State& st) {
  const auto M = static_cast<std::size_t>(st.range(0));
  const std::size_t N = 256, K = 64;
  const auto A = random_vec(M * K, 1), B = random_vec(K * N, 2);
  std::vector<float> C(M * N);
  for (auto _ : st) {
    if constexpr (Ref)
      k::ref::gemm_nn<float>(M, N, K, A.data(), B.data(), C.data());
    else
      k::gemm_nn<float>(M, N, K, A.data(), B.data(), C.data());
    benchmark::DoNotOptimize(C.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(2 * M * N * K));
}

template <bool Ref>
void BM_GemmTN(benchmark::State& st) {
  const auto K = static_cast<std::size_t>(st.range(0));
  const std::size_t M = 64, N = 256;
  const auto A = random_vec(K * M, 3), B = random_vec(K * N, 4);
  std::vector<float> C(M * N);
  for (auto _ : st) {
    if constexpr (Ref)
      k::ref::gemm_tn<float>(M, N, K, A.data(), B.data(), C.data());
    else
      k::gemm_tn<float>(M, N, K, A.data(), B.data(), C.data());
    benchmark::DoNotOptimize(C.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(2 * M * N * K));
}

template <bool Ref>
void BM_Attention(benchmark::State& st) {
  const auto seqs = static_cast<std::size_t>(st.range(0));
  const std::size_t L = 69, D = 64, H = 4;
  std::vector<std::size_t> off(seqs + 1);
  for (std::size_t s = 0; s <= seqs; ++s) off[s] = s * L;
  const auto qkv = random_vec(seqs * L * 3 * D, 5);
  std::vector<float> probs(k::attention_prob_offsets(off, H).back()), out(seqs * L * D);
  for (auto _ : st) {
    if constexpr (Ref)
      k::ref::attention_forward<float>(off, H, D, qkv.data(), probs.data(), out.data());
    else
      k::attention_forward<float>(off, H, D, qkv.data(), probs.data(), out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Ref>
void BM_LayerNorm(benchmark::State& st) {
  const auto rows = static_cast<std::size_t>(st.range(0));
  const std::size_t D = 64;
  const auto x = random_vec(rows * D, 6), g = random_vec(D, 7), b = random_vec(D, 8);
  std::vector<float> y(rows * D), mean(rows), rstd(rows);
  for (auto _ : st) {
    if constexpr (Ref)
      k::ref::layernorm_forward<float>(rows, D, x.data(), g.data(), b.data(), 1e-6f, y.data(),
                                       mean.data(), rstd.data());
    else
      k::layernorm_forward<float>(rows, D, x.data(), g.data(), b.data(), 1e-6f, y.data(),
                                  mean.data(), rstd.data());
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Ref>
void BM_Gelu(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const auto x = random_vec(n, 9);
  std::vector<float> y(n);
  for (auto _ : st) {
    if constexpr (Ref)
      k::ref::gelu_forward<float>(n, x.data(), y.data());
    else
      k::gelu_forward<float>(n, x.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(n));
}

}  // namespace

BENCHMARK(BM_GemmNN<true>)->Name("gemm_nn/ref")->Arg(512)->Arg(4096);
BENCHMARK(BM_GemmNN<false>)->Name("gemm_nn/omp")->Arg(512)->Arg(4096);
BENCHMARK(BM_GemmTN<true>)->Name("gemm_tn/ref")->Arg(512)->Arg(4096);
BENCHMARK(BM_GemmTN<false>)->Name("gemm_tn/omp")->Arg(512)->Arg(4096);
BENCHMARK(BM_Attention<true>)->Name("attention/ref")->Arg(8)->Arg(64);
BENCHMARK(BM_Attention<false>)->Name("attention/omp")->Arg(8)->Arg(64);
BENCHMARK(BM_LayerNorm<true>)->Name("layernorm/ref")->Arg(4096);
BENCHMARK(BM_LayerNorm<false>)->Name("layernorm/omp")->Arg(4096);

BENCHMARK(BM_Gelu<true>)->Name("gelu/ref")->Arg(1 << 20);
BENCHMARK(BM_Gelu<false>)->Name("gelu/omp")->Arg(1 << 20);

BENCHMARK_MAIN();
