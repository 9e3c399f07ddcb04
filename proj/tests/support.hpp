#pragma once

// Helpers shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bootleg/distill.hpp"
#include "bootleg/loss.hpp"
#include "bootleg/masking.hpp"
#include "bootleg/rng.hpp"
#include "bootleg/vit.hpp"

namespace testsupport {

using namespace bootleg;

template <class P>
std::vector<double*> flat_params(P& params) {
  std::vector<double*> out;
  params.for_each([&](const std::string&, Tensor<double>& t) {
    for (auto& v : t.vec()) out.push_back(&v);
  });
  return out;
}

template <class P>
std::vector<double> flat_values(const P& params) {
  std::vector<double> out;
  params.for_each([&](const std::string&, const auto& t) {
    out.insert(out.end(), t.vec().begin(), t.vec().end());
  });
  return out;
}

/// Replaces every array with N(0, scale) noise so that biases, norms and
/// tokens all carry non-trivial values.
template <class P>
void randomize(P& params, Rng& rng, double scale) {
  params.for_each([&](const std::string&, Tensor<double>& t) {
    for (auto& v : t.vec()) v = scale * rng.normal();
  });
}

/// Gamma near 1 keeps layer norms well conditioned.
template <class P>
void randomize_model(P& params, Rng& rng) {
  params.for_each([&](const std::string& name, Tensor<double>& t) {
    const bool gamma = name.size() > 6 && name.substr(name.size() - 6) == ".gamma";
    for (auto& v : t.vec()) v = gamma ? 1.0 + 0.2 * rng.normal() : 0.3 * rng.normal();
  });
}

struct GradStats {
  std::size_t checked = 0;
  std::size_t failures = 0;
  double worst_rel = 0;  // max |a-n| / max(|a|, |n|) over entries above 1e-7
  std::string worst_name;
};

/// Five-point central differences over every parameter, compared with
/// `analytic` (same flattening order) under |a - n| <= rel * max(|a|, |n|) + abs.
template <class P>
GradStats check_gradient(P& params, const std::vector<double>& analytic,
                         const std::function<double()>& loss, double h = 1e-4,
                         double rel = 1e-4, double abs = 1e-9) {
  GradStats st;
  std::vector<std::string> names;
  params.for_each([&](const std::string& n, Tensor<double>& t) {
    for (std::size_t i = 0; i < t.size(); ++i) names.push_back(n + "[" + std::to_string(i) + "]");
  });
  auto ptrs = flat_params(params);
  for (std::size_t i = 0; i < ptrs.size(); ++i) {
    const double keep = *ptrs[i];
    auto at = [&](double dx) {
      *ptrs[i] = keep + dx;
      return loss();
    };
    const double num = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h);
    *ptrs[i] = keep;
    const double a = analytic[i];
    const double scale = std::max(std::abs(a), std::abs(num));
    const double err = std::abs(a - num);
    ++st.checked;
    if (err > rel * scale + abs) ++st.failures;
    if (scale > 1e-7 && err / scale > st.worst_rel) {
      st.worst_rel = err / scale;
      st.worst_name = names[i];
    }
  }
  return st;
}

/// A two-sample, depth-2, width-16 encoder with a depth-2 predictor on a
/// 4x4 token grid, evaluated in double.
struct GradProblem {
  ViTConfig cfg;
  PredictorConfig pcfg;
  TargetSpec spec;
  EncoderParams<double> enc, teacher;
  PredictorParams<double> pred;
  Tensor<double> patches;
  std::vector<MaskSet> masks;
  Tensor<double> targets;
  std::size_t batch = 2;

  GradProblem() {
    cfg.image_side = 16;
    cfg.patch_side = 4;
    cfg.depth = 2;
    cfg.width = 16;
    cfg.heads = 2;
    cfg.registers = 1;
    cfg.cls_count = 1;
    cfg.mlp_ratio = 2;
    spec.taps = {LayerTap::block(1), LayerTap::block(2)};
    pcfg.depth = 2;
    pcfg.width = 8;
    pcfg.heads = 2;
    pcfg.registers = 1;
    pcfg.mlp_ratio = 2;
    pcfg.output_dim = spec.output_dim(cfg);

    Rng rng(1234);
    enc = init_encoder<double>(cfg, rng);
    teacher = init_encoder<double>(cfg, rng);
    pred = init_predictor<double>(pcfg, cfg, rng);
    randomize_model(enc, rng);
    randomize_model(teacher, rng);
    randomize_model(pred, rng);

    Tensor<double> images(Shape{batch, 16, 16, 3});
    for (auto& v : images.vec()) v = rng.normal();
    patches = patchify_batch(images, cfg);

    MaskSet a;
    a.grid_h = a.grid_w = 4;
    a.visible = {0, 1, 4, 5, 12};
    a.regions = {{2, 3, 6, 7}, {10, 11, 14}};
    MaskSet b;
    b.grid_h = b.grid_w = 4;
    b.visible = {3, 7, 10, 11, 15};
    b.regions = {{0, 1}, {4, 8, 12, 13}};
    masks = {a, b};

    const auto tout = encode(teacher, cfg, patches, batch, {}, spec.taps);
    targets = build_targets(tout, patches, masks, spec, cfg).values;
  }

  std::vector<std::vector<std::int32_t>> visible() const {
    std::vector<std::vector<std::int32_t>> v;
    for (const auto& m : masks) v.push_back(m.visible);
    return v;
  }

  double loss() const {
    const auto out = encode(enc, cfg, patches, batch, visible(), {});
    const Tensor<double> p = predict(pred, pcfg, cfg, out, masks);
    return mse(p, targets, Reduction::Mean);
  }

  /// Analytic gradients of loss() for (encoder, predictor).
  std::pair<EncoderParams<double>, PredictorParams<double>> gradients() const {
    EncoderCache<double> ec;
    const auto out = encode(enc, cfg, patches, batch, visible(), {}, &ec);
    PredictorCache<double> pc;
    const Tensor<double> p = predict(pred, pcfg, cfg, out, masks, &pc);
    LossSpec ls;
    ls.kind = LossKind::MSE;
    const auto lg = loss_and_grad(p, targets, ls);
    auto ge = zeros_like(enc);
    auto gp = zeros_like(pred);
    const Tensor<double> dctx = predict_backward(pred, pcfg, cfg, out, pc, lg.grad, gp);
    encode_backward(enc, cfg, out, ec, dctx, ge);
    return {ge, gp};
  }
};

}  // namespace testsupport
