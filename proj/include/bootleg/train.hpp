#pragma once

#include <cstdint>
#include <filesystem>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bootleg/data.hpp"
#include "bootleg/distill.hpp"
#include "bootleg/loss.hpp"
#include "bootleg/masking.hpp"
#include "bootleg/vit.hpp"

namespace bootleg {

struct TrainConfig {
  ViTConfig vit;
  PredictorConfig predictor;  // output_dim is derived from `targets`
  StrategyConfig masking;     // masking.multiblock grid follows the encoder
  TargetSpec targets;
  LossSpec loss;

  int epochs = 100;
  std::size_t steps = 0;  // 0: epochs * steps_per_epoch
  std::size_t batch_size = 128;
  std::size_t per_worker_batch = 128;  // mask-generation granularity

  // Learning rates are quoted for reference_batch and scaled linearly.
  double lr_init = 3e-5;
  double lr_max = 3e-3;
  double lr_final = 3e-5;
  double reference_batch = 2048;
  double warmup_epochs = -1;  // negative: round(33 + 0.12 * epochs)
  double schedule_stretch = 1.0;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double ema_momentum = 0.9985;

  AugmentConfig augment;
  Normalization normalization;
  std::uint64_t seed = 0;

  /// Fills derived fields (mask grid, predictor output width) and checks
  /// invariants.
  void finalize();
  double lr_scale() const { return static_cast<double>(batch_size) / reference_batch; }
};

/// round(33 + 0.12 * epochs)
int warmup_epochs(int epochs);

/// Warmup steps and total steps for a given dataset size.
struct Schedule {
  std::size_t steps_per_epoch = 0;
  std::size_t total_steps = 0;
  double warmup_steps = 0;
};

Schedule make_schedule(const TrainConfig& cfg, std::size_t dataset_size);

/// Linear ramp lr_init -> lr_max over the warmup, then cosine from lr_max to
/// lr_final over a horizon of schedule_stretch * (total_steps - 1) steps,
/// evaluated only up to total_steps - 1. Values are pre-scaling.
double lr_at(std::size_t step, const Schedule& sched, const TrainConfig& cfg);

template <class P>
struct AdamState {
  P m, v;
};

/// Decoupled weight decay on arrays where is_decayed(name) holds. t is the
/// 1-based step count used for bias correction.
template <class P>
void adamw_update(P& params, const P& grads, AdamState<P>& st, std::uint64_t t, double lr,
                  double wd, double beta1, double beta2, double eps) {
  struct Slot {
    std::string name;
    float* p;
    const float* g;
    float* m;
    float* v;
    std::size_t n;
  };
  std::vector<Slot> slots;
  params.for_each([&](const std::string& n, Tensor<float>& x) {
    slots.push_back({n, x.data(), nullptr, nullptr, nullptr, x.size()});
  });
  std::size_t i = 0;
  grads.for_each([&](const std::string&, const Tensor<float>& x) { slots[i++].g = x.data(); });
  i = 0;
  st.m.for_each([&](const std::string&, Tensor<float>& x) { slots[i++].m = x.data(); });
  i = 0;
  st.v.for_each([&](const std::string&, Tensor<float>& x) { slots[i++].v = x.data(); });

  const double bc1 = 1 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1 - std::pow(beta2, static_cast<double>(t));
  const float b1 = static_cast<float>(beta1), b2 = static_cast<float>(beta2);
  const float step = static_cast<float>(lr / bc1);
  const float inv_bc2 = static_cast<float>(1 / bc2);
  const float feps = static_cast<float>(eps);
  for (const Slot& s : slots) {
    const float decay = is_decayed(s.name) ? static_cast<float>(1 - lr * wd) : 1.0f;
#pragma omp parallel for simd schedule(static) if (s.n > (1u << 16))
    for (std::size_t j = 0; j < s.n; ++j) {
      const float g = s.g[j];
      s.m[j] = b1 * s.m[j] + (1 - b1) * g;
      s.v[j] = b2 * s.v[j] + (1 - b2) * g * g;
      s.p[j] = s.p[j] * decay - step * s.m[j] / (std::sqrt(s.v[j] * inv_bc2) + feps);
    }
  }
}

struct TrainState {
  EncoderParams<float> student;
  EncoderParams<float> teacher;
  PredictorParams<float> predictor;
  AdamState<EncoderParams<float>> adam_student;
  AdamState<PredictorParams<float>> adam_predictor;
  std::uint64_t step = 0;  // completed optimizer steps
};

TrainState init_train_state(const TrainConfig& cfg);

struct StepMetrics {
  std::uint64_t step = 0;  // 1-based index of the step just taken
  double lr = 0;
  std::optional<double> loss;  // present on monitored steps
  double grad_norm = 0;
  double seen_fraction = 0;
  double wall_ms = 0;
};

/// Number of times the true loss value was evaluated, for monitoring tests.
std::uint64_t loss_evaluations();

/// images: [batch, R, R, 3] normalized. One optimizer step plus EMA.
StepMetrics train_step(TrainState& state, const TrainConfig& cfg, const Tensor<float>& images,
                       const std::vector<MaskSet>& masks, double lr);

/// Masks for global batch `batch_index`, split into per-worker chunks.
std::vector<MaskSet> batch_masks(const TrainConfig& cfg, std::uint64_t epoch,
                                 std::uint64_t batch_index);

/// Indices of the samples in batch `b` of `epoch` (shuffled, drop-last).
std::vector<std::size_t> batch_indices(const TrainConfig& cfg, std::size_t dataset_size,
                                       std::uint64_t epoch, std::size_t b);

Tensor<float> load_batch(const TrainConfig& cfg, const Dataset& ds,
                         const std::vector<std::size_t>& idx, std::uint64_t epoch);

struct RunOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume_from;
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint
  std::size_t stop_after = 0;        // 0: run to the end of the schedule
  std::string config_text;           // resolved config, hashed into manifests
  std::function<void(const StepMetrics&)> on_step;
};

TrainState run_pretraining(const TrainConfig& cfg, const Dataset& ds, const RunOptions& opt);

void save_train_state(const std::filesystem::path& dir, const TrainState& st,
                      const TrainConfig& cfg, const std::string& config_text);
TrainState load_train_state(const std::filesystem::path& dir, const TrainConfig& cfg);

}  // namespace bootleg
