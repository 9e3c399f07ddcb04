#include <doctest.h>

#include <cmath>
#include <vector>

#include "bootleg/distill.hpp"
#include "support.hpp"

using namespace bootleg;

namespace {

std::vector<int> layers(const std::vector<LayerTap>& taps) {
  std::vector<int> out;
  for (const auto& t : taps) out.push_back(t.layer);
  return out;
}

std::vector<double> oracle_zscore(const double* v, std::size_t n, double eps) {
  double m = 0;
  for (std::size_t i = 0; i < n; ++i) m += v[i];
  m /= n;
  double ss = 0;
  for (std::size_t i = 0; i < n; ++i) ss += (v[i] - m) * (v[i] - m);
  const double sd = std::sqrt(ss / n);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = (v[i] - m) / (sd + eps);
  return out;
}

struct Fixture {
  ViTConfig cfg;
  EncoderParams<double> enc;
  Tensor<double> patches;
  std::vector<MaskSet> masks;
  Fixture() {
    cfg.image_side = 16;
    cfg.patch_side = 4;
    cfg.depth = 4;
    cfg.width = 16;
    cfg.heads = 2;
    cfg.registers = 2;
    Rng rng(1);
    enc = init_encoder<double>(cfg, rng);
    Tensor<double> imgs(Shape{2, 16, 16, 3});
    for (auto& v : imgs.vec()) v = rng.normal();
    patches = patchify_batch(imgs, cfg);
    MaskSet a;
    a.grid_h = a.grid_w = 4;
    a.visible = {0};
    a.regions = {{5, 6}, {15}};
    MaskSet b = a;
    b.regions = {{1}, {2, 3}, {4}};
    masks = {a, b};
  }
};

}  // namespace

TEST_CASE("default tap sets") {
  CHECK(layers(default_tap_set(8)) == std::vector<int>{1, 4, 8});
  CHECK(layers(default_tap_set(12)) == std::vector<int>{1, 4, 8, 12});
  CHECK(layers(default_tap_set(6)) == std::vector<int>{1, 4, 6});
  CHECK(layers(default_tap_set(1)) == std::vector<int>{1});
  CHECK(layers(default_tap_set(24)) == std::vector<int>{1, 4, 8, 12, 16, 20, 24});
  CHECK_THROWS_AS(default_tap_set(0), Error);
}

TEST_CASE("output width") {
  ViTConfig c;
  TargetSpec s;
  s.taps = default_tap_set(8);
  CHECK(s.output_dim(c) == 3 * 64);
  s.taps.push_back(LayerTap::parse("pixels"));
  CHECK(s.output_dim(c) == 3 * 64 + 48);
  s.merge = MergeOp::AverageRestandardize;
  s.taps = default_tap_set(8);
  CHECK(s.output_dim(c) == 64);
}

TEST_CASE("zscore uses the population std plus epsilon") {
  const std::vector<double> v{1, 2, 3, 4};
  const auto z = zscore(v, 1e-6);
  const double sd = std::sqrt(1.25);
  for (int i = 0; i < 4; ++i) CHECK(z[i] == doctest::Approx((v[i] - 2.5) / (sd + 1e-6)));
  const auto c = zscore(std::vector<double>{3, 3, 3}, 1e-6);
  for (double x : c) CHECK(x == 0.0);
  std::vector<float> f{1.0f, -1.0f};
  zscore(f.data(), 2, 0.0, f.data());
  CHECK(f[0] == doctest::Approx(1.0f));
}

TEST_CASE("concat targets equal per-tap z-scored teacher rows") {
  Fixture fx;
  TargetSpec spec;
  spec.taps = {LayerTap::block(1), LayerTap::block(4), LayerTap::parse("pixels")};
  const std::vector<LayerTap> enc_taps{LayerTap::block(1), LayerTap::block(4)};
  const auto t = encode(fx.enc, fx.cfg, fx.patches, 2, {}, enc_taps);
  const auto tb = build_targets(t, fx.patches, fx.masks, spec, fx.cfg);
  REQUIRE(tb.values.rows() == 7);
  REQUIRE(tb.values.cols() == 16 + 16 + 48);
  const std::size_t G = fx.cfg.globals();
  for (std::size_t r = 0; r < tb.refs.size(); ++r) {
    const auto& ref = tb.refs[r];
    const std::size_t row = t.seqs[ref.sample] + G + ref.token;
    const auto z1 = oracle_zscore(t.taps.at(enc_taps[0]).row(row), 16, 1e-6);
    const auto z4 = oracle_zscore(t.taps.at(enc_taps[1]).row(row), 16, 1e-6);
    const auto zp = oracle_zscore(fx.patches.row(ref.sample * 16 + ref.token), 48, 1e-6);
    for (int j = 0; j < 16; ++j) {
      CHECK(tb.values(r, j) == doctest::Approx(z1[j]).epsilon(1e-12));
      CHECK(tb.values(r, 16 + j) == doctest::Approx(z4[j]).epsilon(1e-12));
    }
    for (int j = 0; j < 48; ++j)
      CHECK(tb.values(r, 32 + j) == doctest::Approx(zp[j]).epsilon(1e-12));
  }
  CHECK(tb.refs == masked_token_order(fx.masks));
}

TEST_CASE("alternative merges") {
  Fixture fx;
  const std::vector<LayerTap> taps{LayerTap::block(2), LayerTap::block(3)};
  const auto t = encode(fx.enc, fx.cfg, fx.patches, 2, {}, taps);
  const std::size_t row = t.seqs[0] + fx.cfg.globals() + 5;

  TargetSpec joint;
  joint.taps = taps;
  joint.merge = MergeOp::JointZscore;
  const auto tj = build_targets(t, fx.patches, fx.masks, joint, fx.cfg);
  std::vector<double> cat(t.taps.at(taps[0]).row(row), t.taps.at(taps[0]).row(row) + 16);
  cat.insert(cat.end(), t.taps.at(taps[1]).row(row), t.taps.at(taps[1]).row(row) + 16);
  const auto zj = oracle_zscore(cat.data(), 32, 1e-6);
  for (int j = 0; j < 32; ++j) CHECK(tj.values(0, j) == doctest::Approx(zj[j]).epsilon(1e-12));

  TargetSpec avg;
  avg.taps = taps;
  avg.merge = MergeOp::AverageRestandardize;
  const auto ta = build_targets(t, fx.patches, fx.masks, avg, fx.cfg);
  REQUIRE(ta.values.cols() == 16);
  const auto a = oracle_zscore(t.taps.at(taps[0]).row(row), 16, 1e-6);
  const auto b = oracle_zscore(t.taps.at(taps[1]).row(row), 16, 1e-6);
  std::vector<double> mean(16);
  for (int j = 0; j < 16; ++j) mean[j] = 0.5 * (a[j] + b[j]);
  const auto za = oracle_zscore(mean.data(), 16, 1e-6);
  for (int j = 0; j < 16; ++j) CHECK(ta.values(0, j) == doctest::Approx(za[j]).epsilon(1e-12));
}

TEST_CASE("target construction errors") {
  Fixture fx;
  TargetSpec spec;
  spec.taps = {LayerTap::block(2)};
  const auto none = encode(fx.enc, fx.cfg, fx.patches, 2, {}, {});
  try {
    build_targets(none, fx.patches, fx.masks, spec, fx.cfg);
    FAIL("expected TapNotCaptured");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::TapNotCaptured);
  }
  const auto partial = encode(fx.enc, fx.cfg, fx.patches, 2, {{0, 1}, {2, 3}}, spec.taps);
  CHECK_THROWS_AS(build_targets(partial, fx.patches, fx.masks, spec, fx.cfg), Error);
  TargetSpec empty;
  CHECK_THROWS_AS(empty.validate(fx.cfg), Error);
  TargetSpec deep;
  deep.taps = {LayerTap::block(5)};
  CHECK_THROWS_AS(deep.validate(fx.cfg), Error);
  CHECK_THROWS_AS(parse_merge_op("sum"), Error);
}

TEST_CASE("EMA update") {
  ViTConfig c;
  c.depth = 1;
  c.width = 8;
  c.heads = 2;
  Rng rng(3);
  auto teacher = init_encoder<double>(c, rng);
  auto student = init_encoder<double>(c, rng);
  testsupport::randomize(teacher, rng, 1.0);
  testsupport::randomize(student, rng, 1.0);
  const auto t0 = testsupport::flat_values(teacher);
  const auto s0 = testsupport::flat_values(student);

  SUBCASE("m = 1 keeps the teacher") {
    ema_update(teacher, student, 1.0);
    CHECK(testsupport::flat_values(teacher) == t0);
  }
  SUBCASE("m = 0 copies the student") {
    ema_update(teacher, student, 0.0);
    CHECK(testsupport::flat_values(teacher) == s0);
  }
  SUBCASE("one step is the convex combination") {
    ema_update(teacher, student, 0.9);
    const auto t1 = testsupport::flat_values(teacher);
    for (std::size_t i = 0; i < t1.size(); ++i)
      CHECK(t1[i] == doctest::Approx(0.9 * t0[i] + 0.1 * s0[i]).epsilon(1e-14));
  }
  SUBCASE("n steps follow m^n") {
    for (int i = 0; i < 250; ++i) ema_update(teacher, student, 0.99);
    const auto t1 = testsupport::flat_values(teacher);
    const double w = std::pow(0.99, 250);
    for (std::size_t i = 0; i < t1.size(); ++i)
      CHECK(std::abs(t1[i] - (s0[i] + w * (t0[i] - s0[i]))) <=
            1e-13 * std::max(std::abs(t0[i]), std::abs(s0[i])));
  }
  SUBCASE("equal arrays stay bitwise equal") {
    auto copy = student;
    ema_update(copy, student, 0.9985);
    CHECK(testsupport::flat_values(copy) == s0);
  }
  SUBCASE("invalid momentum and mismatched structures") {
    CHECK_THROWS_AS(ema_update(teacher, student, 1.5), Error);
    ViTConfig other = c;
    other.depth = 2;
    auto deeper = init_encoder<double>(other, rng);
    CHECK_THROWS_AS(ema_update(teacher, deeper, 0.5), Error);
  }
}
