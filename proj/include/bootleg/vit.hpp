#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bootleg/masking.hpp"
#include "bootleg/rng.hpp"
#include "bootleg/tensor.hpp"

namespace bootleg {

struct ViTConfig {
  int image_side = 32;
  int patch_side = 4;
  int channels = 3;
  int depth = 8;
  int width = 64;
  int heads = 4;
  int registers = 4;
  int cls_count = 1;
  int mlp_ratio = 4;

  void validate() const;
  int grid() const { return image_side / patch_side; }
  int patches() const { return grid() * grid(); }
  int patch_dim() const { return patch_side * patch_side * channels; }
  int globals() const { return cls_count + registers; }
};

struct PredictorConfig {
  int depth = 4;
  int width = 32;
  int heads = 4;
  int registers = 4;
  int output_dim = 0;
  int mlp_ratio = 4;

  void validate() const;
};

enum class TapKind { BlockOut, BlockMid, AttnResidual, MlpResidual, TokenizerOut, Pixels };

/// A captured representation. `layer` is 1-based and only meaningful for the
/// per-block kinds.
struct LayerTap {
  TapKind kind = TapKind::BlockOut;
  int layer = 0;

  static LayerTap block(int l) { return {TapKind::BlockOut, l}; }
  /// Accepts "block:N", "mid:N", "attn:N", "mlp:N", "tokenizer", "pixels".
  static LayerTap parse(const std::string& text);
  std::string str() const;

  auto operator<=>(const LayerTap&) const = default;
};

std::vector<LayerTap> parse_tap_list(const std::string& text);

/// Weights are stored [in, out] so a forward pass is X * W.
template <class T>
struct LinearParams {
  Tensor<T> weight;
  Tensor<T> bias;

  template <class F>
  void for_each(const std::string& p, F&& f) {
    f(p + ".weight", weight);
    f(p + ".bias", bias);
  }
  template <class F>
  void for_each(const std::string& p, F&& f) const {
    f(p + ".weight", weight);
    f(p + ".bias", bias);
  }
};

template <class T>
struct NormParams {
  Tensor<T> gamma;
  Tensor<T> beta;

  template <class F>
  void for_each(const std::string& p, F&& f) {
    f(p + ".gamma", gamma);
    f(p + ".beta", beta);
  }
  template <class F>
  void for_each(const std::string& p, F&& f) const {
    f(p + ".gamma", gamma);
    f(p + ".beta", beta);
  }
};

template <class T>
struct BlockParams {
  NormParams<T> ln1;
  LinearParams<T> qkv;
  LinearParams<T> proj;
  NormParams<T> ln2;
  LinearParams<T> fc1;
  LinearParams<T> fc2;

  template <class Self, class F>
  static void visit(Self& s, const std::string& p, F&& f) {
    s.ln1.for_each(p + ".ln1", f);
    s.qkv.for_each(p + ".qkv", f);
    s.proj.for_each(p + ".proj", f);
    s.ln2.for_each(p + ".ln2", f);
    s.fc1.for_each(p + ".fc1", f);
    s.fc2.for_each(p + ".fc2", f);
  }
  template <class F>
  void for_each(const std::string& p, F&& f) { visit(*this, p, f); }
  template <class F>
  void for_each(const std::string& p, F&& f) const { visit(*this, p, f); }
};

template <class T>
struct EncoderParams {
  LinearParams<T> patch;
  Tensor<T> cls;        // [cls_count, D]
  Tensor<T> registers;  // [registers, D]
  std::vector<BlockParams<T>> blocks;
  NormParams<T> final_norm;

  template <class Self, class F>
  static void visit(Self& s, const std::string& p, F&& f) {
    s.patch.for_each(p + "patch", f);
    if (!s.cls.empty()) f(p + "cls", s.cls);
    if (!s.registers.empty()) f(p + "registers", s.registers);
    for (std::size_t i = 0; i < s.blocks.size(); ++i)
      s.blocks[i].for_each(p + "blocks." + std::to_string(i), f);
    s.final_norm.for_each(p + "final_norm", f);
  }
  template <class F>
  void for_each(F&& f, const std::string& p = "") { visit(*this, p, f); }
  template <class F>
  void for_each(F&& f, const std::string& p = "") const { visit(*this, p, f); }
};

template <class T>
struct PredictorParams {
  LinearParams<T> embed;  // encoder width -> predictor width
  Tensor<T> mask_token;   // [1, Dp]
  Tensor<T> registers;    // [registers, Dp]
  std::vector<BlockParams<T>> blocks;
  NormParams<T> norm;
  LinearParams<T> head;   // predictor width -> output_dim

  template <class Self, class F>
  static void visit(Self& s, const std::string& p, F&& f) {
    s.embed.for_each(p + "embed", f);
    f(p + "mask_token", s.mask_token);
    if (!s.registers.empty()) f(p + "registers", s.registers);
    for (std::size_t i = 0; i < s.blocks.size(); ++i)
      s.blocks[i].for_each(p + "blocks." + std::to_string(i), f);
    s.norm.for_each(p + "norm", f);
    s.head.for_each(p + "head", f);
  }
  template <class F>
  void for_each(F&& f, const std::string& p = "") { visit(*this, p, f); }
  template <class F>
  void for_each(F&& f, const std::string& p = "") const { visit(*this, p, f); }
};

/// Weight decay applies to projection matrices only, not to norms, biases or
/// token embeddings.
bool is_decayed(const std::string& name);

/// Same structure, every array zero.
template <class P>
P zeros_like(const P& params) {
  P out = params;
  out.for_each([](const std::string&, auto& t) { t.fill(0); });
  return out;
}

template <class T>
EncoderParams<T> init_encoder(const ViTConfig& cfg, Rng& rng);
template <class T>
PredictorParams<T> init_predictor(const PredictorConfig& pcfg, const ViTConfig& ecfg,
                                  Rng& rng);

/// Fixed 2-D sin-cos table [grid_h*grid_w, D]. The first D/2 columns encode
/// the row index, the rest the column index; each half is sin then cos over
/// D/4 geometric frequencies with base 10000.
template <class T>
Tensor<T> sincos_pos_embed(int grid_h, int grid_w, int D);

/// image [R, R, C] channel-last -> [N, P*P*C], patches row-major, each patch
/// flattened as (row, col, channel).
template <class T>
Tensor<T> patchify(const Tensor<T>& image, const ViTConfig& cfg);
template <class T>
Tensor<T> unpatchify(const Tensor<T>& patches, const ViTConfig& cfg);
/// images [B, R, R, C] -> [B*N, P*P*C].
template <class T>
Tensor<T> patchify_batch(const Tensor<T>& images, const ViTConfig& cfg);

/// Y = X * W + b.
template <class T>
void linear_forward(const Tensor<T>& X, const LinearParams<T>& p, Tensor<T>& Y);
/// Accumulates weight/bias gradients into g; dX is overwritten unless null.
template <class T>
void linear_backward(const Tensor<T>& X, const LinearParams<T>& p, const Tensor<T>& dY,
                     Tensor<T>* dX, LinearParams<T>& g);
template <class T>
void add_into(Tensor<T>& a, const Tensor<T>& b);
/// Row-wise layer norm (eps 1e-6); p == nullptr is the parameter-free form.
template <class T>
void layernorm(const Tensor<T>& x, const NormParams<T>* p, Tensor<T>& y, Tensor<T>& mean,
               Tensor<T>& rstd);

/// Row offsets of consecutive ragged sequences; back() is the row total.
using SeqOffsets = std::vector<std::size_t>;

template <class T>
struct BlockCache {
  Tensor<T> x, h1, mean1, rstd1, qkv, attn, r_attn, z_mid, h2, mean2, rstd2, u,
      g, r_mlp;
  std::vector<T> probs;
};

/// Pre-norm transformer block over a ragged batch. Fills every cache field;
/// out = z_mid + r_mlp.
template <class T>
void block_forward(const BlockParams<T>& p, const SeqOffsets& seqs, int heads,
                   const Tensor<T>& x, Tensor<T>& out, BlockCache<T>& cache);

/// Accumulates parameter gradients into `grads`; dx is overwritten.
template <class T>
void block_backward(const BlockParams<T>& p, const SeqOffsets& seqs, int heads,
                    const BlockCache<T>& cache, const Tensor<T>& dout,
                    Tensor<T>& dx, BlockParams<T>& grads);

template <class T>
struct EncoderCache {
  Tensor<T> patch_rows;  // gathered input patches, visible tokens only
  std::vector<BlockCache<T>> blocks;
  Tensor<T> hidden, mean, rstd;
};

template <class T>
struct EncoderOutput {
  SeqOffsets seqs;                 // per-sample sequences, globals first
  std::vector<std::vector<std::int32_t>> positions;  // grid index of each patch row
  Tensor<T> normed;                // final_norm(BlockOut(depth)), [rows, D]
  std::map<LayerTap, Tensor<T>> taps;  // [rows, D] each, all tokens incl. globals
};

/// patches: [batch*N, patch_dim]. visible: empty for full-grid (teacher)
/// mode, otherwise one ascending or arbitrary-order index list per sample.
/// Pixels taps are ignored here; the caller owns raw patches.
template <class T>
EncoderOutput<T> encode(const EncoderParams<T>& params, const ViTConfig& cfg,
                        const Tensor<T>& patches, std::size_t batch,
                        const std::vector<std::vector<std::int32_t>>& visible,
                        const std::vector<LayerTap>& taps,
                        EncoderCache<T>* cache = nullptr);

/// Back-propagates d(normed) into parameter gradients.
template <class T>
void encode_backward(const EncoderParams<T>& params, const ViTConfig& cfg,
                     const EncoderOutput<T>& out, const EncoderCache<T>& cache,
                     const Tensor<T>& d_normed, EncoderParams<T>& grads);

/// Row metadata shared by predictions and targets.
struct TokenRef {
  std::int32_t sample = 0;
  std::int32_t region = 0;
  std::int32_t token = 0;
  bool operator==(const TokenRef&) const = default;
};

/// Ordering of predicted rows: sample, then region, then region member order.
std::vector<TokenRef> masked_token_order(const std::vector<MaskSet>& masks);

template <class T>
struct PredictorCache {
  Tensor<T> ctx_rows;   // gathered encoder rows (cls + visible) per sample
  Tensor<T> ctx_proj;   // embed(ctx_rows)
  std::vector<std::size_t> ctx_src;      // encoder row of each ctx row
  std::vector<std::size_t> ctx_start;    // first ctx row of each sample
  SeqOffsets seqs;
  std::vector<std::size_t> sample_seq;  // first sequence of each sample
  std::vector<std::size_t> mask_rows;    // sequence rows read out
  std::vector<BlockCache<T>> blocks;
  Tensor<T> hidden, normed_rows, mean, rstd;
};

/// One predictor sequence per (sample, region): predictor registers,
/// projected CLS, projected visible patches (+pos), mask tokens (+pos).
/// Returns [sum |region|, output_dim] in masked_token_order.
template <class T>
Tensor<T> predict(const PredictorParams<T>& params, const PredictorConfig& pcfg,
                  const ViTConfig& ecfg, const EncoderOutput<T>& ctx,
                  const std::vector<MaskSet>& masks,
                  PredictorCache<T>* cache = nullptr);

/// Returns d(ctx.normed); parameter gradients are accumulated.
template <class T>
Tensor<T> predict_backward(const PredictorParams<T>& params,
                           const PredictorConfig& pcfg, const ViTConfig& ecfg,
                           const EncoderOutput<T>& ctx,
                           const PredictorCache<T>& cache, const Tensor<T>& dpred,
                           PredictorParams<T>& grads);

}  // namespace bootleg
