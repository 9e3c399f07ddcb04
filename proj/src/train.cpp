#include "bootleg/train.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "bootleg/checkpoint.hpp"
#include "bootleg/error.hpp"

namespace bootleg {

namespace fs = std::filesystem;

void TrainConfig::finalize() {
  vit.validate();
  require(vit.channels == 3, ErrorCode::InvalidConfig,
          "training images are RGB; vit.channels must be 3");
  masking.multiblock.grid_h = vit.grid();
  masking.multiblock.grid_w = vit.grid();
  masking.multiblock.validate();
  targets.validate(vit);
  predictor.output_dim = targets.output_dim(vit);
  predictor.validate();
  loss.validate();
  require(batch_size >= 1, ErrorCode::InvalidConfig, "batch_size must be >= 1");
  require(per_worker_batch >= 1 && per_worker_batch <= batch_size, ErrorCode::InvalidConfig,
          "per_worker_batch must be in [1, batch_size]");
  require(epochs >= 1, ErrorCode::InvalidConfig, "epochs must be >= 1");
  require(lr_init >= 0 && lr_max > 0 && lr_final >= 0, ErrorCode::InvalidConfig,
          "learning rates must be non-negative with lr_max > 0");
  require(reference_batch > 0, ErrorCode::InvalidConfig, "reference_batch must be positive");
  require(schedule_stretch >= 1, ErrorCode::InvalidConfig, "schedule_stretch must be >= 1");
  require(ema_momentum >= 0 && ema_momentum <= 1, ErrorCode::InvalidConfig,
          "ema momentum must be in [0, 1]");
  require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0,
          ErrorCode::InvalidConfig, "bad AdamW constants");
  require(weight_decay >= 0, ErrorCode::InvalidConfig, "weight_decay must be >= 0");
}

int warmup_epochs(int epochs) {
  require(epochs >= 1, ErrorCode::InvalidConfig, "epochs must be >= 1");
  return static_cast<int>(std::lround(33.0 + 0.12 * epochs));
}

Schedule make_schedule(const TrainConfig& cfg, std::size_t dataset_size) {
  Schedule s;
  s.steps_per_epoch = dataset_size / cfg.batch_size;
  require(s.steps_per_epoch >= 1, ErrorCode::EmptyDataset,
          "dataset of " + std::to_string(dataset_size) + " samples is smaller than one batch");
  s.total_steps = cfg.steps ? cfg.steps : cfg.epochs * s.steps_per_epoch;
  const double wu = cfg.warmup_epochs < 0 ? warmup_epochs(cfg.epochs) : cfg.warmup_epochs;
  s.warmup_steps = wu * static_cast<double>(s.steps_per_epoch);
  require(s.total_steps >= 2, ErrorCode::InvalidConfig, "schedule needs at least 2 steps");
  require(s.warmup_steps < cfg.schedule_stretch * static_cast<double>(s.total_steps - 1),
          ErrorCode::InvalidConfig,
          "warmup (" + std::to_string(s.warmup_steps) +
              " steps) must end before the stretched schedule horizon");
  return s;
}

double lr_at(std::size_t step, const Schedule& sched, const TrainConfig& cfg) {
  const double t = static_cast<double>(step);
  if (t < sched.warmup_steps)
    return cfg.lr_init + (cfg.lr_max - cfg.lr_init) * t / sched.warmup_steps;
  const double horizon = cfg.schedule_stretch * static_cast<double>(sched.total_steps - 1);
  const double p = std::clamp((t - sched.warmup_steps) / (horizon - sched.warmup_steps), 0.0, 1.0);
  return cfg.lr_final +
         (cfg.lr_max - cfg.lr_final) * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

TrainState init_train_state(const TrainConfig& cfg) {
  Rng rng(derive_seed(cfg.seed ^ kInitStream, 0, 0));
  TrainState st;
  st.student = init_encoder<float>(cfg.vit, rng);
  st.predictor = init_predictor<float>(cfg.predictor, cfg.vit, rng);
  st.teacher = st.student;
  st.adam_student = {zeros_like(st.student), zeros_like(st.student)};
  st.adam_predictor = {zeros_like(st.predictor), zeros_like(st.predictor)};
  return st;
}

namespace {

std::atomic<std::uint64_t> g_loss_evaluations{0};

template <class P>
double sum_squares(const P& grads) {
  double s = 0;
  grads.for_each([&](const std::string&, const Tensor<float>& t) {
    for (float v : t.vec()) s += static_cast<double>(v) * v;
  });
  return s;
}

}  // namespace

std::uint64_t loss_evaluations() { return g_loss_evaluations.load(); }

StepMetrics train_step(TrainState& st, const TrainConfig& cfg, const Tensor<float>& images,
                       const std::vector<MaskSet>& masks, double lr) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t B = images.dim(0);
  require(masks.size() == B, ErrorCode::ShapeMismatch, "one mask per image required");
  const Tensor<float> patches = patchify_batch(images, cfg.vit);

  std::vector<LayerTap> teacher_taps;
  for (const auto& t : cfg.targets.taps)
    if (t.kind != TapKind::Pixels) teacher_taps.push_back(t);
  const auto teacher_out = encode(st.teacher, cfg.vit, patches, B, {}, teacher_taps);
  const auto targets = build_targets(teacher_out, patches, masks, cfg.targets, cfg.vit);

  std::vector<std::vector<std::int32_t>> visible(B);
  double seen = 0;
  for (std::size_t i = 0; i < B; ++i) {
    visible[i] = masks[i].visible;
    seen += static_cast<double>(visible[i].size()) / cfg.vit.patches();
  }
  EncoderCache<float> ecache;
  const auto student_out = encode(st.student, cfg.vit, patches, B, visible, {}, &ecache);
  PredictorCache<float> pcache;
  const Tensor<float> pred =
      predict(st.predictor, cfg.predictor, cfg.vit, student_out, masks, &pcache);

  StepMetrics m;
  m.step = st.step + 1;
  m.lr = lr;
  m.seen_fraction = seen / static_cast<double>(B);
  const LossResult<float> loss = loss_and_grad(pred, targets.values, cfg.loss, 1.0f);
  if (cfg.loss.monitored(st.step)) {
    m.loss = cfg.loss.kind == LossKind::MSENoForward
                 ? mse(pred, targets.values, cfg.loss.reduction)
                 : loss.value;
    ++g_loss_evaluations;
    require(std::isfinite(*m.loss), ErrorCode::NonFiniteLoss,
            "loss is not finite at step " + std::to_string(m.step));
  }

  auto gp = zeros_like(st.predictor);
  auto ge = zeros_like(st.student);
  const Tensor<float> dctx =
      predict_backward(st.predictor, cfg.predictor, cfg.vit, student_out, pcache, loss.grad, gp);
  encode_backward(st.student, cfg.vit, student_out, ecache, dctx, ge);
  m.grad_norm = std::sqrt(sum_squares(gp) + sum_squares(ge));
  require(std::isfinite(m.grad_norm), ErrorCode::NonFiniteLoss,
          "gradient is not finite at step " + std::to_string(m.step));

  adamw_update(st.student, ge, st.adam_student, m.step, lr, cfg.weight_decay, cfg.beta1,
               cfg.beta2, cfg.adam_eps);
  adamw_update(st.predictor, gp, st.adam_predictor, m.step, lr, cfg.weight_decay, cfg.beta1,
               cfg.beta2, cfg.adam_eps);
  ema_update(st.teacher, st.student, cfg.ema_momentum);
  st.step = m.step;
  m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                  .count();
  return m;
}

std::vector<MaskSet> batch_masks(const TrainConfig& cfg, std::uint64_t epoch,
                                 std::uint64_t batch_index) {
  const std::uint64_t stream = cfg.seed ^ kMaskStream;
  std::vector<MaskSet> out;
  out.reserve(cfg.batch_size);
  if (cfg.masking.strategy == MaskStrategy::MultiBlock) {
    const std::size_t pw = cfg.per_worker_batch;
    const std::size_t chunks = (cfg.batch_size + pw - 1) / pw;
    for (std::size_t w = 0; w < chunks; ++w) {
      const std::size_t n = std::min(pw, cfg.batch_size - w * pw);
      auto wb = generate_worker_batch_masks(derive_seed(stream, epoch, batch_index * chunks + w),
                                            n, cfg.masking.multiblock);
      for (auto& s : wb.samples) out.push_back(std::move(s));
    }
  } else {
    Rng rng(derive_seed(stream, epoch, batch_index));
    for (std::size_t i = 0; i < cfg.batch_size; ++i)
      out.push_back(generate_strategy_mask(cfg.masking, rng));
  }
  return out;
}

std::vector<std::size_t> batch_indices(const TrainConfig& cfg, std::size_t n,
                                       std::uint64_t epoch, std::size_t b) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng(derive_seed(cfg.seed ^ kShuffleStream, epoch, 0));
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  require((b + 1) * cfg.batch_size <= n, ErrorCode::BadIndex, "batch index past epoch end");
  return {perm.begin() + static_cast<std::ptrdiff_t>(b * cfg.batch_size),
          perm.begin() + static_cast<std::ptrdiff_t>((b + 1) * cfg.batch_size)};
}

Tensor<float> load_batch(const TrainConfig& cfg, const Dataset& ds,
                         const std::vector<std::size_t>& idx, std::uint64_t epoch) {
  const std::size_t R = cfg.vit.image_side, per = R * R * 3;
  Tensor<float> out(Shape{idx.size(), R, R, 3});
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < idx.size(); ++i) {
    Tensor<float> img = augment(ds.images[idx[i]], static_cast<int>(R),
                                derive_seed(cfg.seed, epoch, idx[i]), cfg.augment);
    normalize(img, cfg.normalization);
    std::copy(img.data(), img.data() + per, out.data() + i * per);
  }
  return out;
}

void save_train_state(const fs::path& dir, const TrainState& st, const TrainConfig& cfg,
                      const std::string& config_text) {
  NamedArrays arrays;
  collect_arrays(st.student, "student.", arrays);
  collect_arrays(st.teacher, "teacher.", arrays);
  collect_arrays(st.predictor, "predictor.", arrays);
  collect_arrays(st.adam_student.m, "adam.student.m.", arrays);
  collect_arrays(st.adam_student.v, "adam.student.v.", arrays);
  collect_arrays(st.adam_predictor.m, "adam.predictor.m.", arrays);
  collect_arrays(st.adam_predictor.v, "adam.predictor.v.", arrays);
  nlohmann::json man;
  man["step"] = st.step;
  man["seed"] = cfg.seed;
  man["config_hash"] = fnv1a_hex(config_text);
  man["config"] = config_text;
  man["encoder"] = {{"image_side", cfg.vit.image_side}, {"patch_side", cfg.vit.patch_side},
                    {"channels", cfg.vit.channels},     {"depth", cfg.vit.depth},
                    {"width", cfg.vit.width},           {"heads", cfg.vit.heads},
                    {"registers", cfg.vit.registers},   {"cls_count", cfg.vit.cls_count}};
  save_checkpoint(dir, arrays, std::move(man));
}

TrainState load_train_state(const fs::path& dir, const TrainConfig& cfg) {
  const Checkpoint ck = load_checkpoint(dir);
  TrainState st = init_train_state(cfg);
  restore_arrays(st.student, "student.", ck);
  restore_arrays(st.teacher, "teacher.", ck);
  restore_arrays(st.predictor, "predictor.", ck);
  restore_arrays(st.adam_student.m, "adam.student.m.", ck);
  restore_arrays(st.adam_student.v, "adam.student.v.", ck);
  restore_arrays(st.adam_predictor.m, "adam.predictor.m.", ck);
  restore_arrays(st.adam_predictor.v, "adam.predictor.v.", ck);
  st.step = ck.manifest.at("step").get<std::uint64_t>();
  return st;
}

namespace {

std::string metrics_line(const StepMetrics& m, std::uint64_t epoch) {
  nlohmann::json j;
  j["step"] = m.step;
  j["epoch"] = epoch;
  j["lr"] = m.lr;
  if (m.loss) j["loss"] = *m.loss;
  j["grad_norm"] = m.grad_norm;
  j["seen_fraction"] = m.seen_fraction;
  j["wall_ms"] = m.wall_ms;
  return j.dump();
}

}  // namespace

TrainState run_pretraining(const TrainConfig& cfg, const Dataset& ds, const RunOptions& opt) {
  require(!ds.images.empty(), ErrorCode::EmptyDataset, "pretraining dataset is empty");
  const Schedule sched = make_schedule(cfg, ds.size());
  TrainState st;
  if (opt.resume_from) {
    const Checkpoint probe = load_checkpoint(*opt.resume_from);
    require(probe.manifest.value("config_hash", "") == fnv1a_hex(opt.config_text),
            ErrorCode::InvalidConfig,
            "checkpoint " + opt.resume_from->string() + " was written with a different config");
    st = load_train_state(*opt.resume_from, cfg);
  } else {
    st = init_train_state(cfg);
  }

  std::error_code ec;
  fs::create_directories(opt.out_dir, ec);
  require(!ec, ErrorCode::Io, "cannot create " + opt.out_dir.string());
  std::ofstream metrics(opt.out_dir / "metrics.jsonl",
                        opt.resume_from ? std::ios::app : std::ios::trunc);
  require(static_cast<bool>(metrics), ErrorCode::Io, "cannot open metrics.jsonl");

  const std::size_t end =
      opt.stop_after ? std::min(sched.total_steps, opt.stop_after) : sched.total_steps;
  while (st.step < end) {
    const std::size_t s = st.step;
    const std::uint64_t epoch = s / sched.steps_per_epoch;
    const auto idx = batch_indices(cfg, ds.size(), epoch, s % sched.steps_per_epoch);
    const Tensor<float> images = load_batch(cfg, ds, idx, epoch);
    const auto masks = batch_masks(cfg, epoch, s);
    const double lr = lr_at(s, sched, cfg) * cfg.lr_scale();
    StepMetrics m;
    try {
      m = train_step(st, cfg, images, masks, lr);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::NonFiniteLoss)
        save_train_state(opt.out_dir / "diagnostic", st, cfg, opt.config_text);
      throw;
    }
    metrics << metrics_line(m, epoch) << "\n" << std::flush;
    if (opt.on_step) opt.on_step(m);
    if (opt.checkpoint_every && st.step % opt.checkpoint_every == 0 && st.step < end)
      save_train_state(opt.out_dir / "checkpoint", st, cfg, opt.config_text);
  }
  save_train_state(opt.out_dir / "checkpoint", st, cfg, opt.config_text);
  return st;
}

}  // namespace bootleg
