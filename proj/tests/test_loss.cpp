#include <doctest.h>

#include <cmath>
#include <functional>

#include "bootleg/loss.hpp"
#include "bootleg/rng.hpp"

using namespace bootleg;

namespace {

Tensor<double> random_tensor(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.5) {
  Rng rng(seed);
  Tensor<double> t(r, c);
  for (auto& v : t.vec()) v = scale * rng.normal();
  return t;
}

double naive(const Tensor<double>& p, const Tensor<double>& t, Reduction r,
             const std::function<double(double)>& f) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += f(p[i] - t[i]);
  return r == Reduction::Mean ? s / p.size() : s;
}

// Central differences of a loss over pred; piecewise losses are smooth away
// from their kinks, which random inputs avoid with probability one.
void check_grad(LossKind kind, Reduction red) {
  auto pred = random_tensor(6, 5, 1);
  const auto target = random_tensor(6, 5, 2);
  LossSpec spec;
  spec.kind = kind;
  spec.reduction = red;
  spec.smooth_l1_beta = 0.7;
  const auto res = loss_and_grad(pred, target, spec, 0.5);
  auto value = [&] {
    switch (kind) {
      case LossKind::SmoothL1: return smooth_l1(pred, target, 0.7, red);
      case LossKind::L1: return l1(pred, target, red);
      default: return mse(pred, target, red);
    }
  };
  const double h = 1e-6;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double keep = pred[i];
    pred[i] = keep + h;
    const double up = value();
    pred[i] = keep - h;
    const double dn = value();
    pred[i] = keep;
    CHECK(res.grad[i] == doctest::Approx(0.5 * (up - dn) / (2 * h)).epsilon(1e-6).scale(1e-3));
  }
}

}  // namespace

TEST_CASE("loss values match naive sums") {
  const auto p = random_tensor(9, 4, 3), t = random_tensor(9, 4, 4);
  for (auto r : {Reduction::Mean, Reduction::Sum}) {
    CHECK(mse(p, t, r) == doctest::Approx(naive(p, t, r, [](double d) { return d * d; })));
    CHECK(l1(p, t, r) == doctest::Approx(naive(p, t, r, [](double d) { return std::abs(d); })));
    const double beta = 0.8;
    CHECK(smooth_l1(p, t, beta, r) ==
          doctest::Approx(naive(p, t, r, [&](double d) {
            const double a = std::abs(d);
            return a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
          })));
  }
}

TEST_CASE("loss gradients match finite differences") {
  for (auto k : {LossKind::MSE, LossKind::SmoothL1, LossKind::L1})
    for (auto r : {Reduction::Mean, Reduction::Sum}) {
      CAPTURE(to_string(k));
      CAPTURE(to_string(r));
      check_grad(k, r);
    }
}

TEST_CASE("backward-only MSE equals the MSE gradient and returns a dummy value") {
  const auto p = random_tensor(7, 3, 5), t = random_tensor(7, 3, 6);
  for (auto r : {Reduction::Mean, Reduction::Sum}) {
    LossSpec a;
    a.kind = LossKind::MSENoForward;
    a.reduction = r;
    LossSpec b = a;
    b.kind = LossKind::MSE;
    const auto ra = loss_and_grad(p, t, a, 0.25);
    const auto rb = loss_and_grad(p, t, b, 0.25);
    CHECK(ra.value == 0.0);
    CHECK(rb.value > 0.0);
    for (std::size_t i = 0; i < p.size(); ++i)
      CHECK(ra.grad[i] == doctest::Approx(rb.grad[i]).epsilon(1e-14));
  }
  MseNoForward<double> f(Reduction::Sum);
  CHECK(f.forward(p, t) == 0.0);
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(f.saved()[i] == p[i] - t[i]);
}

TEST_CASE("shape mismatch and invalid specs are rejected") {
  const auto p = random_tensor(2, 3, 7), t = random_tensor(3, 2, 8);
  CHECK_THROWS_AS(mse(p, t, Reduction::Mean), Error);
  LossSpec s;
  CHECK_THROWS_AS(loss_and_grad(p, t, s), Error);
  s.monitor_every = 0;
  CHECK_THROWS_AS(s.validate(), Error);
  LossSpec b;
  b.smooth_l1_beta = 0;
  CHECK_THROWS_AS(b.validate(), Error);
  CHECK_THROWS_AS(parse_loss_kind("huber"), Error);
  CHECK_THROWS_AS(parse_reduction("max"), Error);
}

TEST_CASE("names round-trip") {
  for (auto k : {LossKind::MSE, LossKind::MSENoForward, LossKind::SmoothL1, LossKind::L1})
    CHECK(parse_loss_kind(to_string(k)) == k);
  for (auto r : {Reduction::Mean, Reduction::Sum}) CHECK(parse_reduction(to_string(r)) == r);
}

TEST_CASE("monitoring schedule") {
  LossSpec s;
  s.monitor_every = 4;
  int hits = 0;
  for (std::uint64_t step = 0; step < 100; ++step) hits += s.monitored(step);
  CHECK(hits == 25);
  CHECK(s.monitored(0));
  CHECK_FALSE(s.monitored(3));
}
