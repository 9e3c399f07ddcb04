#include "bootleg/distill.hpp"

#include <cmath>

namespace bootleg {

MergeOp parse_merge_op(const std::string& name) {
  if (name == "concat") return MergeOp::ConcatPerTapZscore;
  if (name == "average") return MergeOp::AverageRestandardize;
  if (name == "joint") return MergeOp::JointZscore;
  fail(ErrorCode::InvalidConfig, "unknown target merge '" + name + "'");
}

std::string to_string(MergeOp op) {
  switch (op) {
    case MergeOp::ConcatPerTapZscore: return "concat";
    case MergeOp::AverageRestandardize: return "average";
    case MergeOp::JointZscore: return "joint";
  }
  return "?";
}

namespace {

int tap_dim(const LayerTap& t, const ViTConfig& cfg) {
  return t.kind == TapKind::Pixels ? cfg.patch_dim() : cfg.width;
}

}  // namespace

void TargetSpec::validate(const ViTConfig& cfg) const {
  require(!taps.empty(), ErrorCode::InvalidConfig, "target taps are empty");
  require(epsilon > 0, ErrorCode::InvalidConfig, "target epsilon must be positive");
  for (const auto& t : taps)
    if (t.kind != TapKind::Pixels && t.kind != TapKind::TokenizerOut)
      require(t.layer >= 1 && t.layer <= cfg.depth, ErrorCode::InvalidConfig,
              "target tap " + t.str() + " outside encoder depth");
  if (merge == MergeOp::AverageRestandardize)
    for (const auto& t : taps)
      require(tap_dim(t, cfg) == tap_dim(taps.front(), cfg), ErrorCode::InvalidConfig,
              "average merge needs taps of equal width");
}

int TargetSpec::output_dim(const ViTConfig& cfg) const {
  if (merge == MergeOp::AverageRestandardize) return tap_dim(taps.front(), cfg);
  int d = 0;
  for (const auto& t : taps) d += tap_dim(t, cfg);
  return d;
}

std::vector<LayerTap> default_tap_set(int depth) {
  require(depth >= 1, ErrorCode::InvalidConfig, "depth must be >= 1");
  std::vector<LayerTap> taps{LayerTap::block(1)};
  for (int l = 4; l <= depth; l += 4) taps.push_back(LayerTap::block(l));
  if (taps.back().layer != depth) taps.push_back(LayerTap::block(depth));
  return taps;
}

template <class T>
void zscore(const T* v, std::size_t n, double eps, T* out) {
  double mean = 0;
  for (std::size_t i = 0; i < n; ++i) mean += v[i];
  mean /= static_cast<double>(n);
  double var = 0;
  for (std::size_t i = 0; i < n; ++i) var += (v[i] - mean) * (v[i] - mean);
  const double inv = 1.0 / (std::sqrt(var / static_cast<double>(n)) + eps);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<T>((v[i] - mean) * inv);
}

template <class T>
TargetBatch<T> build_targets(const EncoderOutput<T>& teacher, const Tensor<T>& patches,
                             const std::vector<MaskSet>& masks, const TargetSpec& spec,
                             const ViTConfig& cfg) {
  spec.validate(cfg);
  const std::size_t N = cfg.patches(), G = cfg.globals(), pd = cfg.patch_dim();
  require(teacher.seqs.size() == masks.size() + 1, ErrorCode::ShapeMismatch,
          "teacher batch size does not match masks");
  for (std::size_t s = 0; s < masks.size(); ++s)
    require(teacher.positions[s].size() == N, ErrorCode::ShapeMismatch,
            "targets need a full-grid teacher pass");

  std::vector<const Tensor<T>*> src;
  for (const auto& t : spec.taps) {
    if (t.kind == TapKind::Pixels) {
      require(patches.rows() == masks.size() * N && patches.cols() == pd,
              ErrorCode::TapNotCaptured, "pixels tap needs the input patches");
      src.push_back(&patches);
      continue;
    }
    auto it = teacher.taps.find(t);
    require(it != teacher.taps.end(), ErrorCode::TapNotCaptured,
            "teacher did not capture tap " + t.str());
    src.push_back(&it->second);
  }

  TargetBatch<T> out;
  out.refs = masked_token_order(masks);
  const std::size_t width = spec.output_dim(cfg), rows = out.refs.size();
  out.values = Tensor<T>(rows, width);

#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < rows; ++r) {
    const TokenRef& ref = out.refs[r];
    T* dst = out.values.row(r);
    std::vector<T> acc;
    std::size_t off = 0;
    for (std::size_t k = 0; k < spec.taps.size(); ++k) {
      const bool pix = spec.taps[k].kind == TapKind::Pixels;
      const std::size_t d = pix ? pd : cfg.width;
      const std::size_t row =
          pix ? ref.sample * N + ref.token : teacher.seqs[ref.sample] + G + ref.token;
      const T* v = src[k]->row(row);
      switch (spec.merge) {
        case MergeOp::ConcatPerTapZscore:
          zscore(v, d, spec.epsilon, dst + off);
          break;
        case MergeOp::JointZscore:
          std::copy(v, v + d, dst + off);
          break;
        case MergeOp::AverageRestandardize: {
          if (acc.empty()) acc.assign(d, T{0});
          std::vector<T> z(d);
          zscore(v, d, spec.epsilon, z.data());
          for (std::size_t j = 0; j < d; ++j) acc[j] += z[j];
          break;
        }
      }
      off += d;
    }
    if (spec.merge == MergeOp::JointZscore) zscore(dst, width, spec.epsilon, dst);
    if (spec.merge == MergeOp::AverageRestandardize) {
      for (auto& a : acc) a /= static_cast<T>(spec.taps.size());
      zscore(acc.data(), width, spec.epsilon, dst);
    }
  }
  return out;
}

template void zscore<float>(const float*, std::size_t, double, float*);
template void zscore<double>(const double*, std::size_t, double, double*);
template TargetBatch<float> build_targets<float>(const EncoderOutput<float>&,
                                                 const Tensor<float>&,
                                                 const std::vector<MaskSet>&,
                                                 const TargetSpec&, const ViTConfig&);
template TargetBatch<double> build_targets<double>(const EncoderOutput<double>&,
                                                   const Tensor<double>&,
                                                   const std::vector<MaskSet>&,
                                                   const TargetSpec&, const ViTConfig&);

}  // namespace bootleg
