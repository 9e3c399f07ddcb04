#include "bootleg/vit.hpp"

#include <cmath>
#include <sstream>

#include "bootleg/error.hpp"
#include "bootleg/kernels.hpp"

namespace bootleg {

namespace k = kernels;

constexpr double kLayerNormEps = 1e-6;

void ViTConfig::validate() const {
  auto bad = [](ErrorCode c, const std::string& m) { fail(c, m); };
  if (image_side < 1 || patch_side < 1 || channels < 1)
    bad(ErrorCode::InvalidConfig, "image_side, patch_side and channels must be positive");
  if (image_side % patch_side != 0)
    bad(ErrorCode::DimNotDivisible, "image_side " + std::to_string(image_side) +
                                        " is not a multiple of patch_side " +
                                        std::to_string(patch_side));
  if (depth < 1 || width < 1 || heads < 1)
    bad(ErrorCode::InvalidConfig, "encoder depth, width and heads must be positive");
  if (width % heads != 0)
    bad(ErrorCode::DimNotDivisible, "encoder width must be divisible by heads");
  if (width % 4 != 0)
    bad(ErrorCode::DimNotDivisible, "encoder width must be divisible by 4");
  if (registers < 0 || cls_count < 0 || mlp_ratio < 1)
    bad(ErrorCode::InvalidConfig, "registers/cls_count must be >= 0, mlp_ratio >= 1");
}

void PredictorConfig::validate() const {
  if (depth < 1 || width < 1 || heads < 1 || output_dim < 1 || registers < 0 ||
      mlp_ratio < 1)
    fail(ErrorCode::InvalidConfig, "predictor depth/width/heads/output_dim must be positive");
  if (width % heads != 0)
    fail(ErrorCode::DimNotDivisible, "predictor width must be divisible by heads");
  if (width % 4 != 0)
    fail(ErrorCode::DimNotDivisible, "predictor width must be divisible by 4");
}

LayerTap LayerTap::parse(const std::string& text) {
  if (text == "tokenizer") return {TapKind::TokenizerOut, 0};
  if (text == "pixels") return {TapKind::Pixels, 0};
  const auto colon = text.find(':');
  if (colon != std::string::npos) {
    const std::string kind = text.substr(0, colon);
    int layer = 0;
    try {
      std::size_t used = 0;
      layer = std::stoi(text.substr(colon + 1), &used);
      if (used != text.size() - colon - 1) layer = 0;
    } catch (const std::exception&) {
      layer = 0;
    }
    if (layer >= 1) {
      if (kind == "block") return {TapKind::BlockOut, layer};
      if (kind == "mid") return {TapKind::BlockMid, layer};
      if (kind == "attn") return {TapKind::AttnResidual, layer};
      if (kind == "mlp") return {TapKind::MlpResidual, layer};
    }
  }
  fail(ErrorCode::InvalidConfig, "bad layer tap '" + text + "'");
}

std::string LayerTap::str() const {
  switch (kind) {
    case TapKind::BlockOut: return "block:" + std::to_string(layer);
    case TapKind::BlockMid: return "mid:" + std::to_string(layer);
    case TapKind::AttnResidual: return "attn:" + std::to_string(layer);
    case TapKind::MlpResidual: return "mlp:" + std::to_string(layer);
    case TapKind::TokenizerOut: return "tokenizer";
    case TapKind::Pixels: return "pixels";
  }
  return "?";
}

std::vector<LayerTap> parse_tap_list(const std::string& text) {
  std::vector<LayerTap> taps;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) continue;
    taps.push_back(LayerTap::parse(item.substr(b, e - b + 1)));
  }
  require(!taps.empty(), ErrorCode::InvalidConfig, "tap list is empty");
  return taps;
}

bool is_decayed(const std::string& name) {
  const std::string suffix = ".weight";
  return name.size() >= suffix.size() &&
         name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// ---------------------------------------------------------------------------
// Init

namespace {

template <class T>
void trunc_normal_fill(Tensor<T>& t, Rng& rng) {
  for (auto& v : t.vec()) v = static_cast<T>(rng.trunc_normal(0.02));
}

template <class T>
LinearParams<T> make_linear(std::size_t in, std::size_t out, Rng& rng) {
  LinearParams<T> p{Tensor<T>(in, out), Tensor<T>(Shape{out})};
  trunc_normal_fill(p.weight, rng);
  return p;
}

template <class T>
NormParams<T> make_norm(std::size_t D) {
  return {Tensor<T>(Shape{D}, T{1}), Tensor<T>(Shape{D}, T{0})};
}

template <class T>
BlockParams<T> make_block(std::size_t D, std::size_t ratio, Rng& rng) {
  BlockParams<T> b;
  b.ln1 = make_norm<T>(D);
  b.qkv = make_linear<T>(D, 3 * D, rng);
  b.proj = make_linear<T>(D, D, rng);
  b.ln2 = make_norm<T>(D);
  b.fc1 = make_linear<T>(D, ratio * D, rng);
  b.fc2 = make_linear<T>(ratio * D, D, rng);
  return b;
}

}  // namespace

template <class T>
EncoderParams<T> init_encoder(const ViTConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t D = cfg.width;
  EncoderParams<T> p;
  p.patch = make_linear<T>(cfg.patch_dim(), D, rng);
  if (cfg.cls_count > 0) {
    p.cls = Tensor<T>(cfg.cls_count, D);
    trunc_normal_fill(p.cls, rng);
  }
  if (cfg.registers > 0) {
    p.registers = Tensor<T>(cfg.registers, D);
    trunc_normal_fill(p.registers, rng);
  }
  for (int i = 0; i < cfg.depth; ++i)
    p.blocks.push_back(make_block<T>(D, cfg.mlp_ratio, rng));
  p.final_norm = make_norm<T>(D);
  return p;
}

template <class T>
PredictorParams<T> init_predictor(const PredictorConfig& pcfg, const ViTConfig& ecfg,
                                  Rng& rng) {
  pcfg.validate();
  const std::size_t Dp = pcfg.width;
  PredictorParams<T> p;
  p.embed = make_linear<T>(ecfg.width, Dp, rng);
  p.mask_token = Tensor<T>(1, Dp);
  trunc_normal_fill(p.mask_token, rng);
  if (pcfg.registers > 0) {
    p.registers = Tensor<T>(pcfg.registers, Dp);
    trunc_normal_fill(p.registers, rng);
  }
  for (int i = 0; i < pcfg.depth; ++i)
    p.blocks.push_back(make_block<T>(Dp, pcfg.mlp_ratio, rng));
  p.norm = make_norm<T>(Dp);
  p.head = make_linear<T>(Dp, pcfg.output_dim, rng);
  return p;
}

// ---------------------------------------------------------------------------
// Embeddings and patches

template <class T>
Tensor<T> sincos_pos_embed(int grid_h, int grid_w, int D) {
  require(D > 0 && D % 4 == 0, ErrorCode::DimNotDivisible,
          "sin-cos embedding width " + std::to_string(D) + " is not a multiple of 4");
  const int quarter = D / 4;
  Tensor<T> out(static_cast<std::size_t>(grid_h) * grid_w, D);
  for (int r = 0; r < grid_h; ++r)
    for (int c = 0; c < grid_w; ++c) {
      T* row = out.row(static_cast<std::size_t>(r) * grid_w + c);
      for (int f = 0; f < quarter; ++f) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(f) / quarter);
        row[f] = static_cast<T>(std::sin(r * omega));
        row[quarter + f] = static_cast<T>(std::cos(r * omega));
        row[2 * quarter + f] = static_cast<T>(std::sin(c * omega));
        row[3 * quarter + f] = static_cast<T>(std::cos(c * omega));
      }
    }
  return out;
}

template <class T>
Tensor<T> patchify(const Tensor<T>& image, const ViTConfig& cfg) {
  const std::size_t R = cfg.image_side, C = cfg.channels;
  require(image.shape() == std::vector<std::size_t>{R, R, C}, ErrorCode::ShapeMismatch,
          "image shape " + shape_string(image.shape()) + " does not match config " +
              shape_string({R, R, C}));
  Tensor<T> batch = image;
  batch.reshape({1, R, R, C});
  return patchify_batch(batch, cfg);
}

template <class T>
Tensor<T> patchify_batch(const Tensor<T>& images, const ViTConfig& cfg) {
  const std::size_t R = cfg.image_side, C = cfg.channels, P = cfg.patch_side;
  require(images.ndim() == 4 && images.dim(1) == R && images.dim(2) == R &&
              images.dim(3) == C,
          ErrorCode::ShapeMismatch,
          "image batch shape " + shape_string(images.shape()) + " does not match config");
  const std::size_t B = images.dim(0), G = R / P, N = G * G, pd = P * P * C;
  Tensor<T> out(B * N, pd);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t gi = 0; gi < G; ++gi)
      for (std::size_t gj = 0; gj < G; ++gj) {
        T* dst = out.row(b * N + gi * G + gj);
        for (std::size_t y = 0; y < P; ++y) {
          const T* src = images.data() + ((b * R + gi * P + y) * R + gj * P) * C;
          std::copy(src, src + P * C, dst + y * P * C);
        }
      }
  return out;
}

template <class T>
Tensor<T> unpatchify(const Tensor<T>& patches, const ViTConfig& cfg) {
  const std::size_t R = cfg.image_side, C = cfg.channels, P = cfg.patch_side;
  const std::size_t G = R / P, pd = P * P * C;
  require(patches.shape() == std::vector<std::size_t>{G * G, pd}, ErrorCode::ShapeMismatch,
          "patch array shape " + shape_string(patches.shape()) + " does not match config");
  Tensor<T> img(Shape{R, R, C});
  for (std::size_t gi = 0; gi < G; ++gi)
    for (std::size_t gj = 0; gj < G; ++gj) {
      const T* src = patches.row(gi * G + gj);
      for (std::size_t y = 0; y < P; ++y)
        std::copy(src + y * P * C, src + (y + 1) * P * C,
                  img.data() + ((gi * P + y) * R + gj * P) * C);
    }
  return img;
}

// ---------------------------------------------------------------------------
// Block

template <class T>
void linear_forward(const Tensor<T>& X, const LinearParams<T>& p, Tensor<T>& Y) {
  const std::size_t M = X.rows(), in = p.weight.dim(0), out = p.weight.dim(1);
  require(X.cols() == in, ErrorCode::ShapeMismatch, "linear input width mismatch");
  Y = Tensor<T>(M, out);
  k::gemm_nn(M, out, in, X.data(), p.weight.data(), Y.data());
  const T* b = p.bias.data();
  T* y = Y.data();
#pragma omp parallel for schedule(static) if (M * out > (1u << 15))
  for (std::size_t i = 0; i < M; ++i)
#pragma omp simd
    for (std::size_t j = 0; j < out; ++j) y[i * out + j] += b[j];
}

template <class T>
void linear_backward(const Tensor<T>& X, const LinearParams<T>& p, const Tensor<T>& dY,
                     Tensor<T>* dX, LinearParams<T>& g) {
  const std::size_t M = X.rows(), in = p.weight.dim(0), out = p.weight.dim(1);
  k::gemm_tn(in, out, M, X.data(), dY.data(), g.weight.data(), true);
  k::colsum(M, out, dY.data(), g.bias.data(), true);
  if (dX) {
    *dX = Tensor<T>(M, in);
    k::gemm_nt(M, in, out, dY.data(), p.weight.data(), dX->data());
  }
}

template <class T>
void add_into(Tensor<T>& a, const Tensor<T>& b) {
  T* x = a.data();
  const T* y = b.data();
  const std::size_t n = a.size();
#pragma omp parallel for simd schedule(static) if (n > (1u << 16))
  for (std::size_t i = 0; i < n; ++i) x[i] += y[i];
}

template <class T>
void layernorm(const Tensor<T>& x, const NormParams<T>* p, Tensor<T>& y, Tensor<T>& mean,
               Tensor<T>& rstd) {
  const std::size_t rows = x.rows(), D = x.cols();
  y = Tensor<T>(rows, D);
  mean = Tensor<T>(Shape{rows});
  rstd = Tensor<T>(Shape{rows});
  k::layernorm_forward(rows, D, x.data(), p ? p->gamma.data() : nullptr,
                       p ? p->beta.data() : nullptr, static_cast<T>(kLayerNormEps),
                       y.data(), mean.data(), rstd.data());
}

template <class T>
void block_forward(const BlockParams<T>& p, const SeqOffsets& seqs, int heads,
                   const Tensor<T>& x, Tensor<T>& out, BlockCache<T>& c) {
  const std::size_t N = x.rows(), D = x.cols();
  require(seqs.back() == N, ErrorCode::ShapeMismatch, "sequence offsets do not cover input");
  c.x = x;
  layernorm(x, &p.ln1, c.h1, c.mean1, c.rstd1);
  linear_forward(c.h1, p.qkv, c.qkv);
  c.probs.assign(k::attention_prob_offsets(seqs, heads).back(), T{0});
  c.attn = Tensor<T>(N, D);
  k::attention_forward<T>(seqs, heads, D, c.qkv.data(), c.probs.data(), c.attn.data());
  linear_forward(c.attn, p.proj, c.r_attn);
  c.z_mid = x;
  add_into(c.z_mid, c.r_attn);
  layernorm(c.z_mid, &p.ln2, c.h2, c.mean2, c.rstd2);
  linear_forward(c.h2, p.fc1, c.u);
  c.g = Tensor<T>(c.u.rows(), c.u.cols());
  k::gelu_forward(c.u.size(), c.u.data(), c.g.data());
  linear_forward(c.g, p.fc2, c.r_mlp);
  out = c.z_mid;
  add_into(out, c.r_mlp);
}

template <class T>
void block_backward(const BlockParams<T>& p, const SeqOffsets& seqs, int heads,
                    const BlockCache<T>& c, const Tensor<T>& dout, Tensor<T>& dx,
                    BlockParams<T>& g) {
  const std::size_t N = c.x.rows(), D = c.x.cols();
  // MLP branch: out = z_mid + fc2(gelu(fc1(ln2(z_mid))))
  Tensor<T> dg, du, dh2;
  linear_backward(c.g, p.fc2, dout, &dg, g.fc2);
  du = Tensor<T>(dg.rows(), dg.cols());
  k::gelu_backward(dg.size(), c.u.data(), dg.data(), du.data());
  linear_backward(c.h2, p.fc1, du, &dh2, g.fc1);
  Tensor<T> dz_mid(N, D);
  k::layernorm_backward(N, D, c.z_mid.data(), p.ln2.gamma.data(), c.mean2.data(),
                        c.rstd2.data(), dh2.data(), dz_mid.data(), g.ln2.gamma.data(),
                        g.ln2.beta.data());
  add_into(dz_mid, dout);
  // Attention branch: z_mid = x + proj(attn(qkv(ln1(x))))
  Tensor<T> dattn, dh1;
  linear_backward(c.attn, p.proj, dz_mid, &dattn, g.proj);
  Tensor<T> dqkv(N, 3 * D);
  k::attention_backward<T>(seqs, heads, D, c.qkv.data(), c.probs.data(), dattn.data(),
                           dqkv.data());
  linear_backward(c.h1, p.qkv, dqkv, &dh1, g.qkv);
  dx = Tensor<T>(N, D);
  k::layernorm_backward(N, D, c.x.data(), p.ln1.gamma.data(), c.mean1.data(),
                        c.rstd1.data(), dh1.data(), dx.data(), g.ln1.gamma.data(),
                        g.ln1.beta.data());
  add_into(dx, dz_mid);
}

// ---------------------------------------------------------------------------
// Encoder

namespace {

template <class T>
void capture(std::map<LayerTap, Tensor<T>>& taps, const std::vector<LayerTap>& wanted,
             TapKind kind, int layer, const Tensor<T>& value) {
  const LayerTap t{kind, layer};
  for (const auto& w : wanted)
    if (w == t) {
      taps[t] = value;
      return;
    }
}

}  // namespace

template <class T>
EncoderOutput<T> encode(const EncoderParams<T>& params, const ViTConfig& cfg,
                        const Tensor<T>& patches, std::size_t batch,
                        const std::vector<std::vector<std::int32_t>>& visible,
                        const std::vector<LayerTap>& taps, EncoderCache<T>* cache) {
  const std::size_t N = cfg.patches(), D = cfg.width, pd = cfg.patch_dim();
  const std::size_t G = cfg.globals();
  require(patches.rows() == batch * N && patches.cols() == pd, ErrorCode::ShapeMismatch,
          "patch batch shape " + shape_string(patches.shape()) + " expected " +
              shape_string({batch * N, pd}));
  require(visible.empty() || visible.size() == batch, ErrorCode::ShapeMismatch,
          "one visible list per sample required");
  for (const auto& t : taps)
    if (t.kind != TapKind::TokenizerOut && t.kind != TapKind::Pixels)
      require(t.layer >= 1 && t.layer <= cfg.depth, ErrorCode::BadIndex,
              "tap " + t.str() + " outside encoder depth " + std::to_string(cfg.depth));

  EncoderOutput<T> out;
  out.positions.resize(batch);
  out.seqs.assign(batch + 1, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    auto& pos = out.positions[b];
    if (visible.empty()) {
      pos.resize(N);
      for (std::size_t i = 0; i < N; ++i) pos[i] = static_cast<std::int32_t>(i);
    } else {
      pos = visible[b];
      require(!pos.empty(), ErrorCode::EmptyVisible,
              "sample " + std::to_string(b) + " has no visible tokens");
      std::vector<char> seen(N, 0);
      for (auto idx : pos) {
        require(idx >= 0 && static_cast<std::size_t>(idx) < N, ErrorCode::BadIndex,
                "visible index " + std::to_string(idx) + " outside grid of " +
                    std::to_string(N));
        require(!seen[idx], ErrorCode::BadIndex,
                "duplicate visible index " + std::to_string(idx));
        seen[idx] = 1;
      }
    }
    out.seqs[b + 1] = out.seqs[b] + G + pos.size();
  }
  const std::size_t rows = out.seqs.back();

  // Tokenizer on gathered patches, then position embedding.
  std::size_t npatch = rows - batch * G;
  Tensor<T> prow(npatch, pd);
  {
    std::size_t r = 0;
    for (std::size_t b = 0; b < batch; ++b)
      for (auto idx : out.positions[b]) {
        std::copy(patches.row(b * N + idx), patches.row(b * N + idx) + pd, prow.row(r));
        ++r;
      }
  }
  Tensor<T> tok;
  linear_forward(prow, params.patch, tok);
  static thread_local std::map<std::pair<int, int>, Tensor<T>> pos_cache;
  auto& pe = pos_cache[{cfg.grid(), cfg.width}];
  if (pe.empty()) pe = sincos_pos_embed<T>(cfg.grid(), cfg.grid(), cfg.width);

  Tensor<T> z(rows, D);
  {
    std::size_t r = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      T* dst = z.row(out.seqs[b]);
      for (int c = 0; c < cfg.cls_count; ++c, dst += D)
        std::copy(params.cls.row(c), params.cls.row(c) + D, dst);
      for (int c = 0; c < cfg.registers; ++c, dst += D)
        std::copy(params.registers.row(c), params.registers.row(c) + D, dst);
      for (auto idx : out.positions[b]) {
        const T* t = tok.row(r++);
        const T* e = pe.row(idx);
        for (std::size_t j = 0; j < D; ++j) dst[j] = t[j] + e[j];
        dst += D;
      }
    }
  }
  capture(out.taps, taps, TapKind::TokenizerOut, 0, z);

  BlockCache<T> scratch;
  if (cache) {
    cache->patch_rows = std::move(prow);
    cache->blocks.assign(cfg.depth, {});
  }
  for (int l = 1; l <= cfg.depth; ++l) {
    BlockCache<T>& c = cache ? cache->blocks[l - 1] : scratch;
    Tensor<T> next;
    block_forward(params.blocks[l - 1], out.seqs, cfg.heads, z, next, c);
    capture(out.taps, taps, TapKind::AttnResidual, l, c.r_attn);
    capture(out.taps, taps, TapKind::BlockMid, l, c.z_mid);
    capture(out.taps, taps, TapKind::MlpResidual, l, c.r_mlp);
    capture(out.taps, taps, TapKind::BlockOut, l, next);
    z = std::move(next);
  }
  Tensor<T> mean, rstd;
  layernorm(z, &params.final_norm, out.normed, mean, rstd);
  if (cache) {
    cache->hidden = std::move(z);
    cache->mean = std::move(mean);
    cache->rstd = std::move(rstd);
  }
  return out;
}

template <class T>
void encode_backward(const EncoderParams<T>& params, const ViTConfig& cfg,
                     const EncoderOutput<T>& out, const EncoderCache<T>& cache,
                     const Tensor<T>& d_normed, EncoderParams<T>& grads) {
  const std::size_t rows = out.seqs.back(), D = cfg.width, G = cfg.globals();
  require(d_normed.rows() == rows && d_normed.cols() == D, ErrorCode::ShapeMismatch,
          "encoder output gradient shape mismatch");
  require(cache.blocks.size() == static_cast<std::size_t>(cfg.depth),
          ErrorCode::InvalidConfig, "encoder backward needs a forward cache");
  Tensor<T> dz(rows, D);
  k::layernorm_backward(rows, D, cache.hidden.data(), params.final_norm.gamma.data(),
                        cache.mean.data(), cache.rstd.data(), d_normed.data(), dz.data(),
                        grads.final_norm.gamma.data(), grads.final_norm.beta.data());
  for (int l = cfg.depth; l >= 1; --l) {
    Tensor<T> dprev;
    block_backward(params.blocks[l - 1], out.seqs, cfg.heads, cache.blocks[l - 1], dz,
                   dprev, grads.blocks[l - 1]);
    dz = std::move(dprev);
  }
  const std::size_t batch = out.seqs.size() - 1;
  Tensor<T> dtok(cache.patch_rows.rows(), D);
  std::size_t r = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const T* src = dz.row(out.seqs[b]);
    for (int c = 0; c < cfg.cls_count; ++c, src += D)
      for (std::size_t j = 0; j < D; ++j) grads.cls(c, j) += src[j];
    for (int c = 0; c < cfg.registers; ++c, src += D)
      for (std::size_t j = 0; j < D; ++j) grads.registers(c, j) += src[j];
    const std::size_t n = out.seqs[b + 1] - out.seqs[b] - G;
    std::copy(src, src + n * D, dtok.row(r));
    r += n;
  }
  linear_backward(cache.patch_rows, params.patch, dtok, static_cast<Tensor<T>*>(nullptr),
                  grads.patch);
}

// ---------------------------------------------------------------------------
// Predictor

std::vector<TokenRef> masked_token_order(const std::vector<MaskSet>& masks) {
  std::vector<TokenRef> out;
  for (std::size_t s = 0; s < masks.size(); ++s)
    for (std::size_t r = 0; r < masks[s].regions.size(); ++r)
      for (auto t : masks[s].regions[r])
        out.push_back({static_cast<std::int32_t>(s), static_cast<std::int32_t>(r), t});
  return out;
}

template <class T>
Tensor<T> predict(const PredictorParams<T>& params, const PredictorConfig& pcfg,
                  const ViTConfig& ecfg, const EncoderOutput<T>& ctx,
                  const std::vector<MaskSet>& masks, PredictorCache<T>* cache) {
  const std::size_t batch = masks.size(), D = ecfg.width, Dp = pcfg.width;
  const std::size_t N = ecfg.patches(), Gp = pcfg.registers, C = ecfg.cls_count;
  require(ctx.seqs.size() == batch + 1, ErrorCode::ShapeMismatch,
          "predictor context has " + std::to_string(ctx.seqs.size() - 1) +
              " samples, masks have " + std::to_string(batch));
  for (std::size_t s = 0; s < batch; ++s) {
    require(!masks[s].regions.empty(), ErrorCode::EmptyRegion,
            "sample " + std::to_string(s) + " has no predictor regions");
    for (std::size_t r = 0; r < masks[s].regions.size(); ++r) {
      require(!masks[s].regions[r].empty(), ErrorCode::EmptyRegion,
              "sample " + std::to_string(s) + " region " + std::to_string(r) + " is empty");
      for (auto t : masks[s].regions[r])
        require(t >= 0 && static_cast<std::size_t>(t) < N, ErrorCode::BadIndex,
                "region token " + std::to_string(t) + " outside grid");
    }
  }

  PredictorCache<T> local;
  PredictorCache<T>& c = cache ? *cache : local;

  // Context rows per sample: CLS tokens then visible patches; encoder
  // registers are not passed on.
  c.ctx_src.clear();
  c.ctx_start.assign(batch + 1, 0);
  for (std::size_t s = 0; s < batch; ++s) {
    const std::size_t base = ctx.seqs[s];
    for (std::size_t i = 0; i < C; ++i) c.ctx_src.push_back(base + i);
    for (std::size_t i = 0; i < ctx.positions[s].size(); ++i)
      c.ctx_src.push_back(base + ecfg.globals() + i);
    c.ctx_start[s + 1] = c.ctx_src.size();
  }
  c.ctx_rows = Tensor<T>(c.ctx_src.size(), D);
  for (std::size_t i = 0; i < c.ctx_src.size(); ++i)
    std::copy(ctx.normed.row(c.ctx_src[i]), ctx.normed.row(c.ctx_src[i]) + D,
              c.ctx_rows.row(i));
  linear_forward(c.ctx_rows, params.embed, c.ctx_proj);

  static thread_local std::map<std::pair<int, int>, Tensor<T>> pos_cache;
  auto& pe = pos_cache[{ecfg.grid(), pcfg.width}];
  if (pe.empty()) pe = sincos_pos_embed<T>(ecfg.grid(), ecfg.grid(), pcfg.width);

  c.seqs.assign(1, 0);
  c.mask_rows.clear();
  c.sample_seq.assign(1, 0);
  for (std::size_t s = 0; s < batch; ++s) {
    c.sample_seq.push_back(c.sample_seq.back() + masks[s].regions.size());
    const std::size_t nctx = c.ctx_start[s + 1] - c.ctx_start[s];
    for (const auto& region : masks[s].regions) {
      const std::size_t start = c.seqs.back();
      for (std::size_t i = 0; i < region.size(); ++i)
        c.mask_rows.push_back(start + Gp + nctx + i);
      c.seqs.push_back(start + Gp + nctx + region.size());
    }
  }
  Tensor<T> z(c.seqs.back(), Dp);
  {
    std::size_t seq = 0;
    for (std::size_t s = 0; s < batch; ++s) {
      const std::size_t c0 = c.ctx_start[s], nctx = c.ctx_start[s + 1] - c0;
      for (const auto& region : masks[s].regions) {
        T* dst = z.row(c.seqs[seq++]);
        for (std::size_t g = 0; g < Gp; ++g, dst += Dp)
          std::copy(params.registers.row(g), params.registers.row(g) + Dp, dst);
        for (std::size_t i = 0; i < nctx; ++i, dst += Dp) {
          const T* src = c.ctx_proj.row(c0 + i);
          if (i < C) {
            std::copy(src, src + Dp, dst);
          } else {
            const T* e = pe.row(ctx.positions[s][i - C]);
            for (std::size_t j = 0; j < Dp; ++j) dst[j] = src[j] + e[j];
          }
        }
        for (auto t : region) {
          const T* e = pe.row(t);
          for (std::size_t j = 0; j < Dp; ++j) dst[j] = params.mask_token[j] + e[j];
          dst += Dp;
        }
      }
    }
  }

  c.blocks.assign(pcfg.depth, {});
  for (int l = 0; l < pcfg.depth; ++l) {
    Tensor<T> next;
    block_forward(params.blocks[l], c.seqs, pcfg.heads, z, next, c.blocks[l]);
    z = std::move(next);
  }
  c.hidden = Tensor<T>(c.mask_rows.size(), Dp);
  for (std::size_t i = 0; i < c.mask_rows.size(); ++i)
    std::copy(z.row(c.mask_rows[i]), z.row(c.mask_rows[i]) + Dp, c.hidden.row(i));
  layernorm(c.hidden, &params.norm, c.normed_rows, c.mean, c.rstd);
  Tensor<T> pred;
  linear_forward(c.normed_rows, params.head, pred);
  if (!cache) c.blocks.clear();
  return pred;
}

template <class T>
Tensor<T> predict_backward(const PredictorParams<T>& params, const PredictorConfig& pcfg,
                           const ViTConfig& ecfg, const EncoderOutput<T>& ctx,
                           const PredictorCache<T>& c, const Tensor<T>& dpred,
                           PredictorParams<T>& g) {
  const std::size_t Dp = pcfg.width, D = ecfg.width, Gp = pcfg.registers;
  require(dpred.rows() == c.mask_rows.size() &&
              dpred.cols() == static_cast<std::size_t>(pcfg.output_dim),
          ErrorCode::ShapeMismatch, "prediction gradient shape mismatch");
  Tensor<T> dnormed, dhidden(c.hidden.rows(), Dp);
  linear_backward(c.normed_rows, params.head, dpred, &dnormed, g.head);
  k::layernorm_backward(c.hidden.rows(), Dp, c.hidden.data(), params.norm.gamma.data(),
                        c.mean.data(), c.rstd.data(), dnormed.data(), dhidden.data(),
                        g.norm.gamma.data(), g.norm.beta.data());
  Tensor<T> dz(c.seqs.back(), Dp);
  for (std::size_t i = 0; i < c.mask_rows.size(); ++i)
    std::copy(dhidden.row(i), dhidden.row(i) + Dp, dz.row(c.mask_rows[i]));
  for (int l = pcfg.depth - 1; l >= 0; --l) {
    Tensor<T> dprev;
    block_backward(params.blocks[l], c.seqs, pcfg.heads, c.blocks[l], dz, dprev,
                   g.blocks[l]);
    dz = std::move(dprev);
  }

  // Scatter sequence gradients back to registers, mask token and the shared
  // projected context (summed over a sample's regions in region order).
  const std::size_t batch = c.ctx_start.size() - 1;
  Tensor<T> dproj(c.ctx_proj.rows(), Dp);
  for (std::size_t s = 0; s < batch; ++s) {
    const std::size_t c0 = c.ctx_start[s], nctx = c.ctx_start[s + 1] - c0;
    for (std::size_t seq = c.sample_seq[s]; seq < c.sample_seq[s + 1]; ++seq) {
      const std::size_t start = c.seqs[seq], end = c.seqs[seq + 1];
      const T* src = dz.row(start);
      for (std::size_t r = 0; r < Gp; ++r, src += Dp)
        for (std::size_t j = 0; j < Dp; ++j) g.registers(r, j) += src[j];
      for (std::size_t i = 0; i < nctx; ++i, src += Dp) {
        T* d = dproj.row(c0 + i);
        for (std::size_t j = 0; j < Dp; ++j) d[j] += src[j];
      }
      for (std::size_t row = start + Gp + nctx; row < end; ++row, src += Dp)
        for (std::size_t j = 0; j < Dp; ++j) g.mask_token[j] += src[j];
    }
  }
  Tensor<T> dctx_rows;
  linear_backward(c.ctx_rows, params.embed, dproj, &dctx_rows, g.embed);
  Tensor<T> dctx(ctx.normed.rows(), D);
  for (std::size_t i = 0; i < c.ctx_src.size(); ++i) {
    T* d = dctx.row(c.ctx_src[i]);
    const T* src = dctx_rows.row(i);
    for (std::size_t j = 0; j < D; ++j) d[j] += src[j];
  }
  return dctx;
}

#define BOOTLEG_INSTANTIATE(T)                                                     \
  template void linear_forward<T>(const Tensor<T>&, const LinearParams<T>&,         \
                                  Tensor<T>&);                                     \
  template void linear_backward<T>(const Tensor<T>&, const LinearParams<T>&,        \
                                   const Tensor<T>&, Tensor<T>*, LinearParams<T>&); \
  template void add_into<T>(Tensor<T>&, const Tensor<T>&);                         \
  template void layernorm<T>(const Tensor<T>&, const NormParams<T>*, Tensor<T>&,   \
                             Tensor<T>&, Tensor<T>&);                              \
  template EncoderParams<T> init_encoder<T>(const ViTConfig&, Rng&);               \
  template PredictorParams<T> init_predictor<T>(const PredictorConfig&,            \
                                                const ViTConfig&, Rng&);           \
  template Tensor<T> sincos_pos_embed<T>(int, int, int);                           \
  template Tensor<T> patchify<T>(const Tensor<T>&, const ViTConfig&);              \
  template Tensor<T> unpatchify<T>(const Tensor<T>&, const ViTConfig&);            \
  template Tensor<T> patchify_batch<T>(const Tensor<T>&, const ViTConfig&);        \
  template void block_forward<T>(const BlockParams<T>&, const SeqOffsets&, int,    \
                                 const Tensor<T>&, Tensor<T>&, BlockCache<T>&);    \
  template void block_backward<T>(const BlockParams<T>&, const SeqOffsets&, int,   \
                                  const BlockCache<T>&, const Tensor<T>&,          \
                                  Tensor<T>&, BlockParams<T>&);                    \
  template EncoderOutput<T> encode<T>(                                             \
      const EncoderParams<T>&, const ViTConfig&, const Tensor<T>&, std::size_t,    \
      const std::vector<std::vector<std::int32_t>>&, const std::vector<LayerTap>&, \
      EncoderCache<T>*);                                                           \
  template void encode_backward<T>(const EncoderParams<T>&, const ViTConfig&,      \
                                   const EncoderOutput<T>&, const EncoderCache<T>&, \
                                   const Tensor<T>&, EncoderParams<T>&);           \
  template Tensor<T> predict<T>(const PredictorParams<T>&, const PredictorConfig&, \
                                const ViTConfig&, const EncoderOutput<T>&,         \
                                const std::vector<MaskSet>&, PredictorCache<T>*);  \
  template Tensor<T> predict_backward<T>(                                          \
      const PredictorParams<T>&, const PredictorConfig&, const ViTConfig&,         \
      const EncoderOutput<T>&, const PredictorCache<T>&, const Tensor<T>&,         \
      PredictorParams<T>&);

BOOTLEG_INSTANTIATE(float)
BOOTLEG_INSTANTIATE(double)

}  // namespace bootleg
