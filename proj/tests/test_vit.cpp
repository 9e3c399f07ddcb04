#include <doctest.h>

#include <cmath>
#include <cstring>
#include <numeric>

#include "bootleg/vit.hpp"
#include "support.hpp"

using namespace bootleg;

namespace {

ViTConfig small_cfg() {
  ViTConfig c;
  c.image_side = 16;
  c.patch_side = 4;
  c.depth = 2;
  c.width = 16;
  c.heads = 2;
  c.registers = 2;
  c.cls_count = 1;
  return c;
}

Tensor<float> random_images(std::size_t B, int side, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> x(Shape{B, static_cast<std::size_t>(side), static_cast<std::size_t>(side), 3});
  for (auto& v : x.vec()) v = static_cast<float>(rng.normal());
  return x;
}

}  // namespace

TEST_CASE("config validation") {
  ViTConfig c;
  c.image_side = 30;
  CHECK_THROWS_AS(c.validate(), Error);
  try {
    c.validate();
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DimNotDivisible);
  }
  ViTConfig d;
  d.width = 66;
  d.heads = 3;
  CHECK_THROWS_AS(d.validate(), Error);
}

TEST_CASE("layer tap parsing") {
  CHECK(LayerTap::parse("block:4") == LayerTap{TapKind::BlockOut, 4});
  CHECK(LayerTap::parse("mid:2") == LayerTap{TapKind::BlockMid, 2});
  CHECK(LayerTap::parse("attn:1") == LayerTap{TapKind::AttnResidual, 1});
  CHECK(LayerTap::parse("mlp:3") == LayerTap{TapKind::MlpResidual, 3});
  CHECK(LayerTap::parse("tokenizer").kind == TapKind::TokenizerOut);
  CHECK(LayerTap::parse("pixels").kind == TapKind::Pixels);
  for (const char* bad : {"block:0", "block:x", "block:3x", "layer:2", ""})
    CHECK_THROWS_AS(LayerTap::parse(bad), Error);
  CHECK(LayerTap::parse(LayerTap::block(7).str()) == LayerTap::block(7));
  const auto list = parse_tap_list("block:1,block:4,mid:8");
  REQUIRE(list.size() == 3);
  CHECK(list[2] == LayerTap{TapKind::BlockMid, 8});
}

TEST_CASE("weight decay applies to projection matrices only") {
  CHECK(is_decayed("blocks.0.qkv.weight"));
  CHECK(is_decayed("patch.weight"));
  CHECK_FALSE(is_decayed("blocks.0.qkv.bias"));
  CHECK_FALSE(is_decayed("blocks.0.ln1.gamma"));
  CHECK_FALSE(is_decayed("cls"));
  CHECK_FALSE(is_decayed("registers"));
  CHECK_FALSE(is_decayed("mask_token"));
}

TEST_CASE("sin-cos position table") {
  const auto pe = sincos_pos_embed<double>(3, 5, 8);
  REQUIRE(pe.rows() == 15);
  // Position (r, c) = (2, 3): row block then column block.
  const double* row = pe.row(2 * 5 + 3);
  for (int f = 0; f < 2; ++f) {
    const double omega = std::pow(10000.0, -f / 2.0);
    CHECK(row[f] == doctest::Approx(std::sin(2 * omega)));
    CHECK(row[2 + f] == doctest::Approx(std::cos(2 * omega)));
    CHECK(row[4 + f] == doctest::Approx(std::sin(3 * omega)));
    CHECK(row[6 + f] == doctest::Approx(std::cos(3 * omega)));
  }
  CHECK_THROWS_AS(sincos_pos_embed<float>(2, 2, 6), Error);
}

TEST_CASE("patchify and unpatchify are inverse") {
  ViTConfig c = small_cfg();
  Tensor<float> img(Shape{16, 16, 3});
  std::iota(img.vec().begin(), img.vec().end(), 0.0f);
  const auto p = patchify(img, c);
  CHECK(p.rows() == 16);
  CHECK(p.cols() == 48);
  // Patch (1, 2) starts at pixel row 4, column 8.
  CHECK(p(1 * 4 + 2, 0) == img[(4 * 16 + 8) * 3]);
  CHECK(p(1 * 4 + 2, 12 + 1) == img[(5 * 16 + 8) * 3 + 1]);
  const auto back = unpatchify(p, c);
  CHECK(back.vec() == img.vec());
}

TEST_CASE("encoder output layout") {
  const ViTConfig c = small_cfg();
  Rng rng(1);
  const auto enc = init_encoder<float>(c, rng);
  const auto patches = patchify_batch(random_images(3, 16, 2), c);
  const auto full = encode(enc, c, patches, 3, {}, {LayerTap::block(1), LayerTap::block(2)});
  CHECK(full.seqs == SeqOffsets{0, 19, 38, 57});
  CHECK(full.normed.rows() == 57);
  CHECK(full.taps.size() == 2);
  CHECK(full.taps.at(LayerTap::block(2)).rows() == 57);
  CHECK_THROWS_AS(encode(enc, c, patches, 3, {}, {LayerTap::block(3)}), Error);

  std::vector<std::vector<std::int32_t>> vis{{0, 5}, {1, 2, 3}, {15}};
  const auto part = encode(enc, c, patches, 3, vis, {});
  CHECK(part.seqs == SeqOffsets{0, 5, 11, 15});
  CHECK(part.positions[1] == std::vector<std::int32_t>{1, 2, 3});
  CHECK_THROWS_AS(encode(enc, c, patches, 3, {{0}, {}, {1}}, {}), Error);
  CHECK_THROWS_AS(encode(enc, c, patches, 3, {{0}, {16}, {1}}, {}), Error);
}

TEST_CASE("visible-all equals full-grid encoding and samples are independent") {
  const ViTConfig c = small_cfg();
  Rng rng(3);
  const auto enc = init_encoder<float>(c, rng);
  const auto patches = patchify_batch(random_images(2, 16, 4), c);
  std::vector<std::int32_t> all(16);
  std::iota(all.begin(), all.end(), 0);
  const auto a = encode(enc, c, patches, 2, {}, {});
  const auto b = encode(enc, c, patches, 2, {all, all}, {});
  CHECK(std::memcmp(a.normed.data(), b.normed.data(), a.normed.size() * sizeof(float)) == 0);

  // Sample 0 alone gives the same rows as sample 0 inside the batch.
  Tensor<float> first(16, 48);
  std::copy(patches.data(), patches.data() + 16 * 48, first.data());
  const auto one = encode(enc, c, first, 1, {}, {});
  CHECK(std::memcmp(one.normed.data(), a.normed.data(), one.normed.size() * sizeof(float)) == 0);
}

TEST_CASE("token order inside a sample only permutes the patch rows") {
  const ViTConfig c = small_cfg();
  Rng rng(5);
  const auto enc = init_encoder<double>(c, rng);
  Tensor<double> imgs(Shape{1, 16, 16, 3});
  for (auto& v : imgs.vec()) v = rng.normal();
  const auto patches = patchify_batch(imgs, c);
  const auto a = encode(enc, c, patches, 1, {{2, 7, 9}}, {});
  const auto b = encode(enc, c, patches, 1, {{9, 2, 7}}, {});
  const std::size_t G = c.globals();
  for (std::size_t j = 0; j < 16; ++j) {
    CHECK(a.normed(G + 0, j) == doctest::Approx(b.normed(G + 1, j)).epsilon(1e-12));
    CHECK(a.normed(G + 2, j) == doctest::Approx(b.normed(G + 0, j)).epsilon(1e-12));
  }
}

TEST_CASE("tap relations: mid = input + attn residual, block = mid + mlp residual") {
  const ViTConfig c = small_cfg();
  Rng rng(6);
  const auto enc = init_encoder<double>(c, rng);
  Tensor<double> imgs(Shape{1, 16, 16, 3});
  for (auto& v : imgs.vec()) v = rng.normal();
  const auto patches = patchify_batch(imgs, c);
  const std::vector<LayerTap> taps{LayerTap::parse("tokenizer"), LayerTap::parse("attn:1"),
                                   LayerTap::parse("mid:1"), LayerTap::parse("mlp:1"),
                                   LayerTap::block(1)};
  const auto out = encode(enc, c, patches, 1, {}, taps);
  const auto& x0 = out.taps.at(taps[0]);
  const auto& ra = out.taps.at(taps[1]);
  const auto& mid = out.taps.at(taps[2]);
  const auto& rm = out.taps.at(taps[3]);
  const auto& b1 = out.taps.at(taps[4]);
  for (std::size_t i = 0; i < b1.size(); ++i) {
    CHECK(mid[i] == doctest::Approx(x0[i] + ra[i]).epsilon(1e-12));
    CHECK(b1[i] == doctest::Approx(mid[i] + rm[i]).epsilon(1e-12));
  }
}

TEST_CASE("masked token order") {
  MaskSet a;
  a.regions = {{3, 4}, {1}};
  MaskSet b;
  b.regions = {{0}};
  const auto o = masked_token_order({a, b});
  REQUIRE(o.size() == 4);
  CHECK(o[0] == TokenRef{0, 0, 3});
  CHECK(o[2] == TokenRef{0, 1, 1});
  CHECK(o[3] == TokenRef{1, 0, 0});
}

TEST_CASE("predictor rejects empty and out-of-grid regions") {
  testsupport::GradProblem gp;
  const auto out = encode(gp.enc, gp.cfg, gp.patches, gp.batch, gp.visible(), {});
  auto masks = gp.masks;
  masks[1].regions[0].clear();
  CHECK_THROWS_AS(predict(gp.pred, gp.pcfg, gp.cfg, out, masks), Error);
  masks = gp.masks;
  masks[0].regions[1].push_back(16);
  CHECK_THROWS_AS(predict(gp.pred, gp.pcfg, gp.cfg, out, masks), Error);
}

TEST_CASE("gradient check on the full distillation loss") {
  testsupport::GradProblem gp;
  const auto [ge, gpred] = gp.gradients();
  const auto se = testsupport::check_gradient(gp.enc, testsupport::flat_values(ge),
                                              [&] { return gp.loss(); });
  CHECK(se.failures == 0);
  const auto sp = testsupport::check_gradient(gp.pred, testsupport::flat_values(gpred),
                                              [&] { return gp.loss(); });
  CHECK(sp.failures == 0);
  MESSAGE("worst encoder rel " << se.worst_rel << ", predictor rel " << sp.worst_rel);
}

TEST_CASE("predictor gradient with respect to the context") {
  testsupport::GradProblem gp;
  auto out = encode(gp.enc, gp.cfg, gp.patches, gp.batch, gp.visible(), {});
  Rng rng(9);
  Tensor<double> w(Shape{0});
  PredictorCache<double> pc;
  const auto p = predict(gp.pred, gp.pcfg, gp.cfg, out, gp.masks, &pc);
  w = Tensor<double>(p.shape());
  for (auto& v : w.vec()) v = rng.normal();
  auto g = zeros_like(gp.pred);
  const auto dctx = predict_backward(gp.pred, gp.pcfg, gp.cfg, out, pc, w, g);
  auto f = [&] {
    const auto q = predict(gp.pred, gp.pcfg, gp.cfg, out, gp.masks);
    double s = 0;
    for (std::size_t i = 0; i < q.size(); ++i) s += q[i] * w[i];
    return s;
  };
  const double h = 1e-5;
  std::size_t bad = 0;
  for (std::size_t i = 0; i < out.normed.size(); ++i) {
    const double keep = out.normed[i];
    out.normed[i] = keep + h;
    const double up = f();
    out.normed[i] = keep - h;
    const double dn = f();
    out.normed[i] = keep;
    const double num = (up - dn) / (2 * h);
    if (std::abs(num - dctx[i]) > 1e-5 * std::max(std::abs(num), std::abs(dctx[i])) + 1e-8)
      ++bad;
  }
  CHECK(bad == 0);
}

TEST_CASE("predictor regions are independent") {
  ViTConfig c;
  PredictorConfig pc;
  pc.output_dim = 64;
  Rng rng(10);
  const auto enc = init_encoder<float>(c, rng);
  const auto pred = init_predictor<float>(pc, c, rng);
  const std::size_t B = 4;
  const auto patches = patchify_batch(random_images(B, 32, 11), c);
  const auto masks = generate_worker_batch_masks(3, B, bootleg_mask_config(8, 8)).samples;
  std::vector<std::vector<std::int32_t>> vis;
  for (const auto& m : masks) vis.push_back(m.visible);
  const auto ctx = encode(enc, c, patches, B, vis, {});
  const auto base = predict(pred, pc, c, ctx, masks);
  auto mutated = masks;
  mutated[2].regions[3] = {0, 63};
  const auto out = predict(pred, pc, c, ctx, mutated);
  const auto ob = masked_token_order(masks), om = masked_token_order(mutated);
  std::size_t i = 0, j = 0, compared = 0;
  while (i < ob.size() && j < om.size()) {
    const bool skip_b = ob[i].sample == 2 && ob[i].region == 3;
    const bool skip_m = om[j].sample == 2 && om[j].region == 3;
    if (skip_b) { ++i; continue; }
    if (skip_m) { ++j; continue; }
    CHECK(ob[i] == om[j]);
    CHECK(std::memcmp(base.row(i), out.row(j), base.cols() * sizeof(float)) == 0);
    ++i, ++j, ++compared;
  }
  CHECK(compared > 0);
}

TEST_CASE("float and double forward passes agree") {
  const ViTConfig c = small_cfg();
  Rng r1(12), r2(12);
  const auto ef = init_encoder<float>(c, r1);
  const auto ed = init_encoder<double>(c, r2);
  const auto imgs = random_images(2, 16, 13);
  const auto pf = patchify_batch(imgs, c);
  const auto pd = patchify_batch(cast<double>(imgs), c);
  const auto of = encode(ef, c, pf, 2, {}, {});
  const auto od = encode(ed, c, pd, 2, {}, {});
  double worst = 0;
  for (std::size_t i = 0; i < of.normed.size(); ++i)
    worst = std::max(worst, std::abs(of.normed[i] - od.normed[i]));
  CHECK(worst < 1e-4);
}
