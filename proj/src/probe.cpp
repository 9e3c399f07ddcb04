#include "bootleg/probe.hpp"

#include <cmath>
#include <numbers>

#include "bootleg/error.hpp"
#include "bootleg/kernels.hpp"
#include "bootleg/train.hpp"

namespace bootleg {

namespace k = kernels;

constexpr double kBatchNormEps = 1e-5;
constexpr double kBatchNormMomentum = 0.1;

ProbeKind parse_probe_kind(const std::string& name) {
  if (name == "patch") return ProbeKind::PatchMean;
  if (name == "cls") return ProbeKind::CLS;
  if (name == "xattn") return ProbeKind::XAttn;
  if (name == "xblk") return ProbeKind::XBlk;
  fail(ErrorCode::InvalidConfig, "unknown probe kind '" + name + "'");
}

std::string to_string(ProbeKind kind) {
  switch (kind) {
    case ProbeKind::PatchMean: return "patch";
    case ProbeKind::CLS: return "cls";
    case ProbeKind::XAttn: return "xattn";
    case ProbeKind::XBlk: return "xblk";
  }
  return "?";
}

void ProbeSpec::validate() const {
  require(!lr_grid.empty() && !wd_grid.empty(), ErrorCode::InvalidConfig,
          "probe lr and wd grids must be non-empty");
  require(epochs >= 1 && batch_size >= 1, ErrorCode::InvalidConfig,
          "probe epochs and batch size must be positive");
  require(warmup_epochs >= 0, ErrorCode::InvalidConfig, "probe warmup must be >= 0");
  require(eval_crop > 0 && eval_crop <= 1, ErrorCode::InvalidConfig,
          "probe eval crop must be in (0, 1]");
}

template <class T>
ProbeParams<T> init_probe(ProbeKind kind, int width, int heads, int classes, Rng& rng) {
  require(width % heads == 0, ErrorCode::DimNotDivisible, "probe width must divide by heads");
  const std::size_t D = width;
  auto tn = [&](Tensor<T>& t) {
    for (auto& v : t.vec()) v = static_cast<T>(rng.trunc_normal(0.02));
  };
  auto linear = [&](std::size_t in, std::size_t out) {
    LinearParams<T> p{Tensor<T>(in, out), Tensor<T>(Shape{out})};
    tn(p.weight);
    return p;
  };
  auto norm = [&] { return NormParams<T>{Tensor<T>(Shape{D}, T{1}), Tensor<T>(Shape{D})}; };
  ProbeParams<T> p;
  p.kind = kind;
  p.heads = heads;
  if (kind == ProbeKind::PatchMean) {
    p.bn_mean = Tensor<T>(Shape{D});
    p.bn_var = Tensor<T>(Shape{D}, T{1});
  }
  if (kind == ProbeKind::XAttn || kind == ProbeKind::XBlk) {
    p.query = Tensor<T>(1, D);
    tn(p.query);
    p.ln = norm();
    p.q = linear(D, D);
    p.k = linear(D, D);
    p.v = linear(D, D);
    p.o = linear(D, D);
  }
  if (kind == ProbeKind::XBlk) {
    p.ln2 = norm();
    p.fc1 = linear(D, 4 * D);
    p.fc2 = linear(4 * D, D);
  }
  p.head = linear(D, classes);
  return p;
}

template <class T>
Tensor<T> probe_forward(ProbeParams<T>& p, const ProbeFeatures<T>& f, bool training,
                        ProbeCache<T>* cache) {
  const std::size_t B = f.batch, L = f.tokens_per_sample, D = f.tokens.cols();
  const std::size_t G = f.globals;
  require(f.tokens.rows() == B * L, ErrorCode::ShapeMismatch, "probe feature rows mismatch");
  ProbeCache<T> local;
  ProbeCache<T>& c = cache ? *cache : local;
  Tensor<T> logits;

  if (p.kind == ProbeKind::PatchMean) {
    require(L > G, ErrorCode::ShapeMismatch, "patch probe needs patch tokens");
    c.pooled = Tensor<T>(B, D);
    for (std::size_t b = 0; b < B; ++b) {
      T* dst = c.pooled.row(b);
      for (std::size_t t = G; t < L; ++t) {
        const T* src = f.tokens.row(b * L + t);
        for (std::size_t j = 0; j < D; ++j) dst[j] += src[j];
      }
      for (std::size_t j = 0; j < D; ++j) dst[j] /= static_cast<T>(L - G);
    }
    c.bn_mean = Tensor<T>(Shape{D});
    c.bn_rstd = Tensor<T>(Shape{D});
    for (std::size_t j = 0; j < D; ++j) {
      double mean = p.bn_mean[j], var = p.bn_var[j];
      if (training) {
        double s = 0, ss = 0;
        for (std::size_t b = 0; b < B; ++b) s += c.pooled(b, j);
        mean = s / static_cast<double>(B);
        for (std::size_t b = 0; b < B; ++b) ss += (c.pooled(b, j) - mean) * (c.pooled(b, j) - mean);
        var = ss / static_cast<double>(B);
        const double unbiased = B > 1 ? ss / static_cast<double>(B - 1) : var;
        p.bn_mean[j] = static_cast<T>((1 - kBatchNormMomentum) * p.bn_mean[j] +
                                      kBatchNormMomentum * mean);
        p.bn_var[j] = static_cast<T>((1 - kBatchNormMomentum) * p.bn_var[j] +
                                     kBatchNormMomentum * unbiased);
      }
      c.bn_mean[j] = static_cast<T>(mean);
      c.bn_rstd[j] = static_cast<T>(1.0 / std::sqrt(var + kBatchNormEps));
    }
    c.y = Tensor<T>(B, D);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < D; ++j)
        c.y(b, j) = (c.pooled(b, j) - c.bn_mean[j]) * c.bn_rstd[j];
    linear_forward(c.y, p.head, logits);
    return logits;
  }

  if (p.kind == ProbeKind::CLS) {
    require(f.cls_count >= 1, ErrorCode::MissingCLS,
            "CLS probe requested but the encoder has no CLS token");
    c.pooled = Tensor<T>(B, D);
    for (std::size_t b = 0; b < B; ++b)
      std::copy(f.tokens.row(b * L), f.tokens.row(b * L) + D, c.pooled.row(b));
    layernorm(c.pooled, static_cast<const NormParams<T>*>(nullptr), c.y, c.ln_mean, c.ln_rstd);
    linear_forward(c.y, p.head, logits);
    return logits;
  }

  // Attentive probes: one learnable query attends over every token.
  const std::size_t H = p.heads, dh = D / H;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  layernorm(f.tokens, &p.ln, c.ln_out, c.ln_mean, c.ln_rstd);
  linear_forward(c.ln_out, p.k, c.K);
  linear_forward(c.ln_out, p.v, c.V);
  linear_forward(p.query, p.q, c.qrow);
  c.probs = Tensor<T>(Shape{B, H, L});
  c.attn = Tensor<T>(B, D);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h) {
      T* P = c.probs.data() + (b * H + h) * L;
      for (std::size_t t = 0; t < L; ++t) {
        const T* kr = c.K.row(b * L + t) + h * dh;
        T s = 0;
        for (std::size_t j = 0; j < dh; ++j) s += c.qrow[h * dh + j] * kr[j];
        P[t] = s * scale;
      }
      k::softmax_rows<T>(1, L, P);
      T* o = c.attn.row(b) + h * dh;
      for (std::size_t t = 0; t < L; ++t) {
        const T* vr = c.V.row(b * L + t) + h * dh;
        for (std::size_t j = 0; j < dh; ++j) o[j] += P[t] * vr[j];
      }
    }
  linear_forward(c.attn, p.o, c.a);
  c.out = c.a;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < D; ++j) c.out(b, j) += p.query[j];
  if (p.kind == ProbeKind::XBlk) {
    layernorm(c.out, &p.ln2, c.ln2_out, c.ln2_mean, c.ln2_rstd);
    linear_forward(c.ln2_out, p.fc1, c.u);
    c.g = Tensor<T>(c.u.rows(), c.u.cols());
    k::gelu_forward(c.u.size(), c.u.data(), c.g.data());
    Tensor<T> r;
    linear_forward(c.g, p.fc2, r);
    c.y = c.out;
    add_into(c.y, r);
  } else {
    c.y = c.out;
  }
  linear_forward(c.y, p.head, logits);
  return logits;
}

template <class T>
void probe_backward(const ProbeParams<T>& p, const ProbeFeatures<T>& f,
                    const ProbeCache<T>& c, const Tensor<T>& dlogits, ProbeParams<T>& g) {
  // Batch norm and the parameter-free layer norm carry no parameters and the
  // encoder is frozen, so the linear probes stop at the head.
  if (p.kind == ProbeKind::PatchMean || p.kind == ProbeKind::CLS) {
    linear_backward(c.y, p.head, dlogits, static_cast<Tensor<T>*>(nullptr), g.head);
    return;
  }
  const std::size_t B = f.batch, L = f.tokens_per_sample, D = f.tokens.cols();
  const std::size_t H = p.heads, dh = D / H;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));

  Tensor<T> dy;
  linear_backward(c.y, p.head, dlogits, &dy, g.head);
  Tensor<T> dout = dy;
  if (p.kind == ProbeKind::XBlk) {
    Tensor<T> dg, dln2;
    linear_backward(c.g, p.fc2, dy, &dg, g.fc2);
    Tensor<T> du(dg.rows(), dg.cols());
    k::gelu_backward(dg.size(), c.u.data(), dg.data(), du.data());
    linear_backward(c.ln2_out, p.fc1, du, &dln2, g.fc1);
    Tensor<T> dres(B, D);
    k::layernorm_backward(B, D, c.out.data(), p.ln2.gamma.data(), c.ln2_mean.data(),
                          c.ln2_rstd.data(), dln2.data(), dres.data(), g.ln2.gamma.data(),
                          g.ln2.beta.data());
    add_into(dout, dres);
  }
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < D; ++j) g.query[j] += dout(b, j);
  Tensor<T> dattn;
  linear_backward(c.attn, p.o, dout, &dattn, g.o);

  Tensor<T> dK(B * L, D), dV(B * L, D), dq(1, D);
  std::vector<T> dp(L);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h) {
      const T* P = c.probs.data() + (b * H + h) * L;
      const T* da = dattn.row(b) + h * dh;
      T dot = 0;
      for (std::size_t t = 0; t < L; ++t) {
        const T* vr = c.V.row(b * L + t) + h * dh;
        T* dvr = dV.row(b * L + t) + h * dh;
        T s = 0;
        for (std::size_t j = 0; j < dh; ++j) {
          s += da[j] * vr[j];
          dvr[j] += P[t] * da[j];
        }
        dp[t] = s;
        dot += s * P[t];
      }
      for (std::size_t t = 0; t < L; ++t) {
        const T ds = P[t] * (dp[t] - dot) * scale;
        const T* kr = c.K.row(b * L + t) + h * dh;
        T* dkr = dK.row(b * L + t) + h * dh;
        for (std::size_t j = 0; j < dh; ++j) {
          dq[h * dh + j] += ds * kr[j];
          dkr[j] += ds * c.qrow[h * dh + j];
        }
      }
    }
  Tensor<T> dquery;
  linear_backward(p.query, p.q, dq, &dquery, g.q);
  add_into(g.query, dquery);
  Tensor<T> dln, dln_v;
  linear_backward(c.ln_out, p.k, dK, &dln, g.k);
  linear_backward(c.ln_out, p.v, dV, &dln_v, g.v);
  add_into(dln, dln_v);
  Tensor<T> dx(B * L, D);
  k::layernorm_backward(B * L, D, f.tokens.data(), p.ln.gamma.data(), c.ln_mean.data(),
                        c.ln_rstd.data(), dln.data(), dx.data(), g.ln.gamma.data(),
                        g.ln.beta.data());
}

template <class T>
double cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels,
                     Tensor<T>* dlogits) {
  const std::size_t B = logits.rows(), K = logits.cols();
  require(labels.size() == B, ErrorCode::ShapeMismatch, "one label per logit row");
  if (dlogits) *dlogits = Tensor<T>(B, K);
  double loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const T* z = logits.row(b);
    const double mx = *std::max_element(z, z + K);
    double s = 0;
    for (std::size_t j = 0; j < K; ++j) s += std::exp(z[j] - mx);
    const auto y = static_cast<std::size_t>(labels[b]);
    require(y < K, ErrorCode::BadIndex, "label outside class range");
    loss += std::log(s) + mx - z[y];
    if (dlogits)
      for (std::size_t j = 0; j < K; ++j)
        (*dlogits)(b, j) = static_cast<T>((std::exp(z[j] - mx) / s - (j == y)) / B);
  }
  return loss / static_cast<double>(B);
}

ProbeFeatures<float> encoder_features(const EncoderParams<float>& enc, const ViTConfig& cfg,
                                      const Tensor<float>& images) {
  const std::size_t B = images.dim(0);
  const Tensor<float> patches = patchify_batch(images, cfg);
  auto out = encode(enc, cfg, patches, B, {}, {});
  ProbeFeatures<float> f;
  f.tokens = std::move(out.normed);
  f.batch = B;
  f.tokens_per_sample = cfg.globals() + cfg.patches();
  f.cls_count = cfg.cls_count;
  f.globals = cfg.globals();
  return f;
}

namespace {

Tensor<float> probe_images(const Dataset& ds, const std::vector<std::size_t>& idx, int side,
                           const Normalization& norm,
                           const std::function<Tensor<float>(const Image&, std::size_t)>& view) {
  const std::size_t per = static_cast<std::size_t>(side) * side * 3;
  Tensor<float> out(Shape{idx.size(), static_cast<std::size_t>(side),
                          static_cast<std::size_t>(side), 3});
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < idx.size(); ++i) {
    Tensor<float> img = view(ds.images[idx[i]], idx[i]);
    normalize(img, norm);
    std::copy(img.data(), img.data() + per, out.data() + i * per);
  }
  return out;
}

}  // namespace

ProbeReport train_probe(const EncoderParams<float>& enc, const ViTConfig& cfg,
                        const Dataset& train, const Dataset& test, const ProbeSpec& spec,
                        const Normalization& norm) {
  spec.validate();
  require(train.size() > 0, ErrorCode::EmptyDataset, "probe training set is empty");
  require(test.size() > 0, ErrorCode::EmptyDataset, "probe evaluation set is empty");
  const int classes = std::max(train.classes(), 1);
  const int side = cfg.image_side;

  Rng init_rng(derive_seed(spec.seed ^ kProbeStream, 0, 0));
  const ProbeParams<float> init =
      init_probe<float>(spec.kind, cfg.width, cfg.heads, classes, init_rng);
  struct Run {
    double lr, wd;
    ProbeParams<float> params;
    AdamState<ProbeParams<float>> adam;
  };
  std::vector<Run> runs;
  for (double lr : spec.lr_grid)
    for (double wd : spec.wd_grid)
      runs.push_back({lr, wd, init, {zeros_like(init), zeros_like(init)}});

  const std::size_t bs = std::min(spec.batch_size, train.size());
  const std::size_t spe = train.size() / bs;
  const std::size_t total = spe * spec.epochs;
  const double warm = std::min(spec.warmup_epochs * spe, static_cast<double>(total - 1));
  auto lr_factor = [&](std::size_t step) {
    const double t = static_cast<double>(step);
    if (t < warm) return t / warm;
    return 0.5 * (1 + std::cos(std::numbers::pi * (t - warm) / (total - warm)));
  };

  std::size_t step = 0;
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    std::vector<std::size_t> perm(train.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    Rng shuffle(derive_seed(spec.seed ^ kProbeStream ^ kShuffleStream, epoch, 0));
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[shuffle.below(i)]);
    for (std::size_t b = 0; b < spe; ++b, ++step) {
      std::vector<std::size_t> idx(perm.begin() + b * bs, perm.begin() + (b + 1) * bs);
      const Tensor<float> images = probe_images(
          train, idx, side, norm, [&](const Image& img, std::size_t i) {
            return augment(img, side, derive_seed(spec.seed ^ kProbeStream, epoch, i),
                           spec.augment);
          });
      const ProbeFeatures<float> feats = encoder_features(enc, cfg, images);
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(train.labels[i]);
      const double f = lr_factor(step);
      for (auto& run : runs) {
        ProbeCache<float> cache;
        const Tensor<float> logits = probe_forward(run.params, feats, true, &cache);
        Tensor<float> dlogits;
        cross_entropy(logits, labels, &dlogits);
        ProbeParams<float> grads = zeros_like(run.params);
        probe_backward(run.params, feats, cache, dlogits, grads);
        adamw_update(run.params, grads, run.adam, step + 1, run.lr * f, run.wd, spec.beta1,
                     spec.beta2, 1e-8);
      }
    }
  }

  std::vector<std::size_t> correct(runs.size(), 0);
  const std::size_t ebs = std::max<std::size_t>(spec.batch_size, 1);
  for (std::size_t start = 0; start < test.size(); start += ebs) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(test.size(), start + ebs); ++i) idx.push_back(i);
    const Tensor<float> images =
        probe_images(test, idx, side, norm, [&](const Image& img, std::size_t) {
          return center_crop(img, side, spec.eval_crop);
        });
    const ProbeFeatures<float> feats = encoder_features(enc, cfg, images);
    for (std::size_t r = 0; r < runs.size(); ++r) {
      const Tensor<float> logits = probe_forward(runs[r].params, feats, false);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const float* z = logits.row(i);
        const auto pred = std::max_element(z, z + logits.cols()) - z;
        correct[r] += pred == test.labels[idx[i]];
      }
    }
  }

  ProbeReport rep;
  for (std::size_t r = 0; r < runs.size(); ++r) {
    const double acc = static_cast<double>(correct[r]) / static_cast<double>(test.size());
    rep.rows.push_back({spec.kind, runs[r].lr, runs[r].wd, acc});
    if (r == 0 || acc > rep.best_accuracy) {
      rep.best_accuracy = acc;
      rep.best_index = r;
    }
  }
  return rep;
}

#define BOOTLEG_INSTANTIATE(T)                                                            \
  template ProbeParams<T> init_probe<T>(ProbeKind, int, int, int, Rng&);                  \
  template Tensor<T> probe_forward<T>(ProbeParams<T>&, const ProbeFeatures<T>&, bool,     \
                                      ProbeCache<T>*);                                    \
  template void probe_backward<T>(const ProbeParams<T>&, const ProbeFeatures<T>&,         \
                                  const ProbeCache<T>&, const Tensor<T>&, ProbeParams<T>&); \
  template double cross_entropy<T>(const Tensor<T>&, const std::vector<int>&, Tensor<T>*);

BOOTLEG_INSTANTIATE(float)
BOOTLEG_INSTANTIATE(double)

}  // namespace bootleg
