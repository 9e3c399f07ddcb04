#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "bootleg/kernels.hpp"
#include "bootleg/rng.hpp"

using namespace bootleg;
namespace K = bootleg::kernels;

namespace {

template <class T>
std::vector<T> randn(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(scale * rng.normal());
  return v;
}

template <class T>
double max_rel(const std::vector<T>& a, const std::vector<T>& b) {
  double worst = 0, scale = 0;
  for (std::size_t i = 0; i < a.size(); ++i) scale = std::max(scale, std::abs(double(b[i])));
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(double(a[i]) - double(b[i])) / (scale + 1e-30));
  return worst;
}

struct Dims {
  std::size_t M, N, K;
};

const std::vector<Dims> kShapes{{1, 1, 1},   {3, 5, 7},    {17, 33, 9},  {64, 64, 64},
                                {65, 72, 31}, {128, 57, 40}, {7, 200, 3}, {300, 8, 17}};

}  // namespace

TEST_CASE_TEMPLATE("gemm variants agree with the serial reference", T, float, double) {
  const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-13;
  for (const auto& d : kShapes) {
    CAPTURE(d.M);
    CAPTURE(d.N);
    CAPTURE(d.K);
    const auto A = randn<T>(d.M * d.K, 1), At = randn<T>(d.K * d.M, 2);
    const auto B = randn<T>(d.K * d.N, 3), Bt = randn<T>(d.N * d.K, 4);
    for (bool acc : {false, true}) {
      auto c0 = randn<T>(d.M * d.N, 5), c1 = c0;
      K::gemm_nn(d.M, d.N, d.K, A.data(), B.data(), c0.data(), acc);
      K::ref::gemm_nn(d.M, d.N, d.K, A.data(), B.data(), c1.data(), acc);
      CHECK(max_rel(c0, c1) <= tol);
      c0 = randn<T>(d.M * d.N, 6);
      c1 = c0;
      K::gemm_tn(d.M, d.N, d.K, At.data(), B.data(), c0.data(), acc);
      K::ref::gemm_tn(d.M, d.N, d.K, At.data(), B.data(), c1.data(), acc);
      CHECK(max_rel(c0, c1) <= tol);
      c0 = randn<T>(d.M * d.N, 7);
      c1 = c0;
      K::gemm_nt(d.M, d.N, d.K, A.data(), Bt.data(), c0.data(), acc);
      K::ref::gemm_nt(d.M, d.N, d.K, A.data(), Bt.data(), c1.data(), acc);
      CHECK(max_rel(c0, c1) <= tol);
    }
  }
}

TEST_CASE("reference gemm matches the textbook triple loop exactly in double") {
  const std::size_t M = 5, N = 6, Kd = 4;
  const auto A = randn<double>(M * Kd, 8), B = randn<double>(Kd * N, 9);
  std::vector<double> C(M * N);
  K::ref::gemm_nn(M, N, Kd, A.data(), B.data(), C.data());
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < Kd; ++k) s += A[i * Kd + k] * B[k * N + j];
      CHECK(C[i * N + j] == doctest::Approx(s).epsilon(1e-14));
    }
}

TEST_CASE("gemm rows do not depend on how many other rows share the call") {
  const std::size_t N = 96, Kd = 64;
  const auto A = randn<float>(200 * Kd, 10), B = randn<float>(Kd * N, 11);
  std::vector<float> full(200 * N);
  K::gemm_nn(200, N, Kd, A.data(), B.data(), full.data());
  for (std::size_t M : {1, 7, 33, 129}) {
    std::vector<float> part(M * N);
    K::gemm_nn(M, N, Kd, A.data(), B.data(), part.data());
    CHECK(std::memcmp(part.data(), full.data(), part.size() * sizeof(float)) == 0);
  }
}

TEST_CASE_TEMPLATE("row kernels agree with the reference", T, float, double) {
  const double tol = std::is_same_v<T, float> ? 2e-6 : 1e-13;
  for (std::size_t D : {1u, 16u, 64u, 77u, 768u}) {
    CAPTURE(D);
    const std::size_t rows = 13;
    const auto x = randn<T>(rows * D, 12, 2.0);
    const auto g = randn<T>(D, 13), b = randn<T>(D, 14), dy = randn<T>(rows * D, 15);

    std::vector<T> cs0(D, T(1)), cs1(D, T(1));
    K::colsum(rows, D, x.data(), cs0.data());
    K::ref::colsum(rows, D, x.data(), cs1.data());
    CHECK(max_rel(cs0, cs1) <= tol);

    if (D > 1) {
      std::vector<T> y0(rows * D), y1(rows * D), m0(rows), m1(rows), r0(rows), r1(rows);
      K::layernorm_forward(rows, D, x.data(), g.data(), b.data(), T(1e-6), y0.data(),
                           m0.data(), r0.data());
      K::ref::layernorm_forward(rows, D, x.data(), g.data(), b.data(), T(1e-6), y1.data(),
                                m1.data(), r1.data());
      CHECK(max_rel(y0, y1) <= tol * 10);
      std::vector<T> dx0(rows * D), dx1(rows * D), dg0(D), dg1(D), db0(D), db1(D);
      K::layernorm_backward(rows, D, x.data(), g.data(), m0.data(), r0.data(), dy.data(),
                            dx0.data(), dg0.data(), db0.data());
      K::ref::layernorm_backward(rows, D, x.data(), g.data(), m1.data(), r1.data(), dy.data(),
                                 dx1.data(), dg1.data(), db1.data());
      CHECK(max_rel(dx0, dx1) <= tol * 10);
      CHECK(max_rel(dg0, dg1) <= tol * 10);
      CHECK(max_rel(db0, db1) <= tol * 10);
    }

    std::vector<T> s0 = x, s1 = x;
    K::softmax_rows(rows, D, s0.data());
    K::ref::softmax_rows(rows, D, s1.data());
    CHECK(max_rel(s0, s1) <= tol * 10);
    for (std::size_t r = 0; r < rows; ++r) {
      double sum = 0;
      for (std::size_t c = 0; c < D; ++c) sum += s0[r * D + c];
      CHECK(sum == doctest::Approx(1.0).epsilon(tol * 10 * D));
    }
  }
}

TEST_CASE_TEMPLATE("gelu matches the erf definition and its derivative", T, float, double) {
  const double tol = std::is_same_v<T, float> ? 2e-6 : 1e-14;
  const std::size_t n = 10007;
  auto x = randn<T>(n, 16, 3.0);
  x[0] = T(0);
  x[1] = T(-12);
  x[2] = T(12);
  std::vector<T> y(n), y1(n), dy = randn<T>(n, 17), dx(n), dx1(n);
  K::gelu_forward(n, x.data(), y.data());
  K::ref::gelu_forward(n, x.data(), y1.data());
  K::gelu_backward(n, x.data(), dy.data(), dx.data());
  K::ref::gelu_backward(n, x.data(), dy.data(), dx1.data());
  for (std::size_t i = 0; i < n; ++i) {
    const double xi = x[i];
    const double cdf = 0.5 * (1 + std::erf(xi / std::sqrt(2.0)));
    const double pdf = std::exp(-0.5 * xi * xi) / std::sqrt(2 * M_PI);
    CHECK(std::abs(y[i] - xi * cdf) <= tol * (1 + std::abs(xi)));
    CHECK(std::abs(dx[i] - dy[i] * (cdf + xi * pdf)) <= tol * 4 * (1 + std::abs(dy[i])));
  }
  CHECK(max_rel(y, y1) <= tol * 4);
  CHECK(max_rel(dx, dx1) <= tol * 4);
}

TEST_CASE("gelu backward may alias dy") {
  const std::size_t n = 300;
  const auto x = randn<float>(n, 18);
  auto d = randn<float>(n, 19);
  std::vector<float> out(n);
  K::gelu_backward(n, x.data(), d.data(), out.data());
  K::gelu_backward(n, x.data(), d.data(), d.data());
  CHECK(std::memcmp(out.data(), d.data(), n * sizeof(float)) == 0);
}

TEST_CASE_TEMPLATE("attention agrees with the reference on ragged sequences", T, float, double) {
  const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-13;
  const std::size_t D = 32, heads = 4;
  const std::vector<std::size_t> seqs{0, 1, 9, 40, 41, 110};
  const std::size_t N = seqs.back();
  const auto qkv = randn<T>(N * 3 * D, 20);
  const auto offs = K::attention_prob_offsets(seqs, heads);
  std::vector<T> p0(offs.back()), p1(offs.back()), o0(N * D), o1(N * D);
  K::attention_forward<T>(seqs, heads, D, qkv.data(), p0.data(), o0.data());
  K::ref::attention_forward<T>(seqs, heads, D, qkv.data(), p1.data(), o1.data());
  CHECK(max_rel(o0, o1) <= tol);
  CHECK(max_rel(p0, p1) <= tol);
  const auto dout = randn<T>(N * D, 21);
  std::vector<T> g0(N * 3 * D), g1(N * 3 * D);
  K::attention_backward<T>(seqs, heads, D, qkv.data(), p0.data(), dout.data(), g0.data());
  K::ref::attention_backward<T>(seqs, heads, D, qkv.data(), p1.data(), dout.data(), g1.data());
  CHECK(max_rel(g0, g1) <= tol * 10);
}

TEST_CASE("attention backward matches finite differences") {
  const std::size_t D = 8, heads = 2;
  const std::vector<std::size_t> seqs{0, 3, 7};
  const std::size_t N = seqs.back();
  auto qkv = randn<double>(N * 3 * D, 22);
  const auto w = randn<double>(N * D, 23);
  const auto offs = K::attention_prob_offsets(seqs, heads);
  auto f = [&] {
    std::vector<double> p(offs.back()), o(N * D);
    K::ref::attention_forward<double>(seqs, heads, D, qkv.data(), p.data(), o.data());
    double s = 0;
    for (std::size_t i = 0; i < o.size(); ++i) s += w[i] * o[i];
    return s;
  };
  std::vector<double> p(offs.back()), o(N * D), g(N * 3 * D);
  K::attention_forward<double>(seqs, heads, D, qkv.data(), p.data(), o.data());
  K::attention_backward<double>(seqs, heads, D, qkv.data(), p.data(), w.data(), g.data());
  const double h = 1e-6;
  for (std::size_t i = 0; i < qkv.size(); ++i) {
    const double keep = qkv[i];
    qkv[i] = keep + h;
    const double up = f();
    qkv[i] = keep - h;
    const double dn = f();
    qkv[i] = keep;
    CHECK(g[i] == doctest::Approx((up - dn) / (2 * h)).epsilon(1e-6).scale(1.0));
  }
}

TEST_CASE("attention output of one sequence is independent of its neighbours") {
  const std::size_t D = 64, heads = 4;
  const std::vector<std::size_t> a{0, 20, 45}, b{0, 20};
  const auto qkv = randn<float>(45 * 3 * D, 24);
  const auto oa = K::attention_prob_offsets(a, heads), ob = K::attention_prob_offsets(b, heads);
  std::vector<float> pa(oa.back()), pb(ob.back()), outa(45 * D), outb(20 * D);
  K::attention_forward<float>(a, heads, D, qkv.data(), pa.data(), outa.data());
  K::attention_forward<float>(b, heads, D, qkv.data(), pb.data(), outb.data());
  CHECK(std::memcmp(outa.data(), outb.data(), outb.size() * sizeof(float)) == 0);
}
