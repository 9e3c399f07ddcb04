#pragma once

#include <string>
#include <vector>

#include "bootleg/error.hpp"
#include "bootleg/vit.hpp"

namespace bootleg {

enum class MergeOp { ConcatPerTapZscore, AverageRestandardize, JointZscore };

MergeOp parse_merge_op(const std::string& name);
std::string to_string(MergeOp op);

struct TargetSpec {
  std::vector<LayerTap> taps;
  MergeOp merge = MergeOp::ConcatPerTapZscore;
  double epsilon = 1e-6;  // added to the population std

  void validate(const ViTConfig& cfg) const;
  /// Width of one target row.
  int output_dim(const ViTConfig& cfg) const;
};

/// Blocks 1, 4, 8, 12, ... up to depth, plus depth itself when it is not on
/// the progression.
std::vector<LayerTap> default_tap_set(int depth);

/// teacher <- m * teacher + (1 - m) * student for every named array.
template <class P>
void ema_update(P& teacher, const P& student, double m) {
  require(m >= 0 && m <= 1, ErrorCode::InvalidConfig, "EMA momentum must be in [0, 1]");
  using T = typename std::remove_reference_t<decltype(teacher.final_norm.gamma)>::value_type;
  std::vector<std::pair<std::string, const Tensor<T>*>> src;
  student.for_each([&](const std::string& n, const auto& t) { src.emplace_back(n, &t); });
  std::size_t i = 0;
  teacher.for_each([&](const std::string& n, auto& t) {
    require(i < src.size() && src[i].first == n && src[i].second->same_shape(t),
            ErrorCode::ShapeMismatch, "EMA teacher/student mismatch at " + n);
    const T* s = src[i].second->data();
    T* d = t.data();
    // Written as t + (1-m)(s-t) so equal arrays stay bitwise equal.
    const T b = static_cast<T>(1 - m);
    if (m == 0)
      std::copy(s, s + t.size(), d);
    else
      for (std::size_t j = 0; j < t.size(); ++j) d[j] += b * (s[j] - d[j]);
    ++i;
  });
  require(i == src.size(), ErrorCode::ShapeMismatch, "EMA teacher/student mismatch");
}

/// (v - mean) / (population std + eps). out may alias v.
template <class T>
void zscore(const T* v, std::size_t n, double eps, T* out);

template <class T>
std::vector<T> zscore(const std::vector<T>& v, double eps) {
  std::vector<T> out(v.size());
  zscore(v.data(), v.size(), eps, out.data());
  return out;
}

template <class T>
struct TargetBatch {
  Tensor<T> values;           // [rows, output_dim]
  std::vector<TokenRef> refs; // same order as predict() output
};

/// teacher: full-grid encoder output with the spec's block taps captured.
/// patches: the raw [batch*N, patch_dim] input, used by the pixels tap.
template <class T>
TargetBatch<T> build_targets(const EncoderOutput<T>& teacher, const Tensor<T>& patches,
                             const std::vector<MaskSet>& masks, const TargetSpec& spec,
                             const ViTConfig& cfg);

}  // namespace bootleg
