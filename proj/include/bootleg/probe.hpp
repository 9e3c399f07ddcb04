#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bootleg/data.hpp"
#include "bootleg/vit.hpp"

namespace bootleg {

enum class ProbeKind { PatchMean, CLS, XAttn, XBlk };

ProbeKind parse_probe_kind(const std::string& name);
std::string to_string(ProbeKind k);

struct ProbeSpec {
  ProbeKind kind = ProbeKind::PatchMean;
  int epochs = 20;
  double warmup_epochs = 5;
  std::vector<double> lr_grid{0.0005, 0.002, 0.008};
  std::vector<double> wd_grid{0.0005, 0.002, 0.008};
  std::size_t batch_size = 256;
  double beta1 = 0.9;
  double beta2 = 0.999;
  AugmentConfig augment{0.3, 1.0, 3.0 / 4.0, 4.0 / 3.0, 0.5, true, 0.4};
  double eval_crop = 0.875;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Encoder features for a batch: every sample has the same token count.
template <class T>
struct ProbeFeatures {
  Tensor<T> tokens;      // [batch * tokens_per_sample, D], final-normed
  std::size_t batch = 0;
  std::size_t tokens_per_sample = 0;
  int cls_count = 0;
  int globals = 0;       // cls + registers, leading each sample
};

template <class T>
struct ProbeParams {
  ProbeKind kind = ProbeKind::PatchMean;
  int heads = 1;
  // PatchMean batch-norm running statistics; not trained.
  Tensor<T> bn_mean, bn_var;
  // Attentive probes.
  Tensor<T> query;  // [1, D]
  NormParams<T> ln;
  LinearParams<T> q, k, v, o;
  NormParams<T> ln2;
  LinearParams<T> fc1, fc2;  // XBlk only
  LinearParams<T> head;

  template <class Self, class F>
  static void visit(Self& s, F&& f) {
    if (s.kind == ProbeKind::XAttn || s.kind == ProbeKind::XBlk) {
      f("query", s.query);
      s.ln.for_each("ln", f);
      s.q.for_each("q", f);
      s.k.for_each("k", f);
      s.v.for_each("v", f);
      s.o.for_each("o", f);
    }
    if (s.kind == ProbeKind::XBlk) {
      s.ln2.for_each("ln2", f);
      s.fc1.for_each("fc1", f);
      s.fc2.for_each("fc2", f);
    }
    s.head.for_each("head", f);
  }
  /// Trainable arrays only.
  template <class F>
  void for_each(F&& f) { visit(*this, f); }
  template <class F>
  void for_each(F&& f) const { visit(*this, f); }
};

template <class T>
ProbeParams<T> init_probe(ProbeKind kind, int width, int heads, int classes, Rng& rng);

template <class T>
struct ProbeCache {
  Tensor<T> pooled;            // probe input to the head path (PatchMean/CLS)
  Tensor<T> bn_mean, bn_rstd;  // batch statistics used (PatchMean)
  Tensor<T> ln_out, ln_mean, ln_rstd;   // token layer norm
  Tensor<T> K, V, qrow, probs, attn, a, out;
  Tensor<T> ln2_out, ln2_mean, ln2_rstd, u, g, y;
};

/// training = true uses batch statistics for PatchMean batch norm and
/// updates the running estimates (momentum 0.1).
template <class T>
Tensor<T> probe_forward(ProbeParams<T>& params, const ProbeFeatures<T>& feats, bool training,
                        ProbeCache<T>* cache = nullptr);

/// dlogits [batch, classes]; gradients accumulate into grads.
template <class T>
void probe_backward(const ProbeParams<T>& params, const ProbeFeatures<T>& feats,
                    const ProbeCache<T>& cache, const Tensor<T>& dlogits,
                    ProbeParams<T>& grads);

/// Mean softmax cross-entropy; writes d(loss)/d(logits).
template <class T>
double cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels,
                     Tensor<T>* dlogits);

/// Final-normed encoder states over full images, [batch*tokens, D].
ProbeFeatures<float> encoder_features(const EncoderParams<float>& enc, const ViTConfig& cfg,
                                      const Tensor<float>& images);

struct ProbeRow {
  ProbeKind kind;
  double lr = 0;
  double wd = 0;
  double accuracy = 0;
};

struct ProbeReport {
  std::vector<ProbeRow> rows;
  double best_accuracy = 0;
  std::size_t best_index = 0;
};

/// Trains one probe per (lr, wd) pair on shared features of the frozen
/// encoder and reports held-out top-1 accuracy for each.
ProbeReport train_probe(const EncoderParams<float>& enc, const ViTConfig& cfg,
                        const Dataset& train, const Dataset& test, const ProbeSpec& spec,
                        const Normalization& norm);

}  // namespace bootleg
