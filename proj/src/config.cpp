#include "bootleg/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "bootleg/error.hpp"

#ifndef BOOTLEG_VERSION
#define BOOTLEG_VERSION "dev"
#endif
#ifndef BOOTLEG_GIT_REV
#define BOOTLEG_GIT_REV "unknown"
#endif

namespace bootleg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& v, const char* want) {
  fail(ErrorCode::InvalidConfig, "key '" + key + "': cannot parse '" + v + "' as " + want);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc{} || r.ptr != v.data() + v.size()) bad_value(key, v, "a number");
  return out;
}

template <class I>
I to_int(const std::string& key, const std::string& v) {
  I out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc{} || r.ptr != v.data() + v.size()) bad_value(key, v, "an integer");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "a boolean");
}

std::vector<double> to_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_double(key, trim(item)));
  return out;
}

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
template <class I>
std::string fmt_int(I v) {
  return std::to_string(v);
}
std::string fmt_bool(bool v) { return v ? "true" : "false"; }
std::string fmt_list(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
  return out;
}
template <std::size_t N>
std::string fmt_array(const std::array<float, N>& v) {
  std::string out;
  for (std::size_t i = 0; i < N; ++i) out += (i ? "," : "") + fmt(v[i]);
  return out;
}
template <std::size_t N>
std::array<float, N> to_array(const std::string& key, const std::string& v) {
  const auto list = to_list(key, v);
  if (list.size() != N) bad_value(key, v, "a 3-element list");
  std::array<float, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = static_cast<float>(list[i]);
  return out;
}

TruncationPolicy to_truncation(const std::string& key, const std::string& v) {
  if (v == "keep_first") return TruncationPolicy::KeepFirst;
  if (v == "random_corner_edge") return TruncationPolicy::RandomCornerEdge;
  bad_value(key, v, "keep_first | random_corner_edge");
}
std::string fmt_truncation(TruncationPolicy p) {
  return p == TruncationPolicy::KeepFirst ? "keep_first" : "random_corner_edge";
}

struct Entry {
  ConfigKey key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define KEY_NUM(name, doc, field)                                                      \
  Entry {                                                                              \
    {name, doc}, [](RunConfig& c, const std::string& v) { c.field = to_double(name, v); }, \
        [](const RunConfig& c) { return fmt(c.field); }                                \
  }
#define KEY_INT(name, doc, field)                                                       \
  Entry {                                                                               \
    {name, doc},                                                                        \
        [](RunConfig& c, const std::string& v) {                                        \
          c.field = to_int<std::decay_t<decltype(c.field)>>(name, v);                   \
        },                                                                              \
        [](const RunConfig& c) { return fmt_int(c.field); }                             \
  }
#define KEY_BOOL(name, doc, field)                                                     \
  Entry {                                                                              \
    {name, doc}, [](RunConfig& c, const std::string& v) { c.field = to_bool(name, v); }, \
        [](const RunConfig& c) { return fmt_bool(c.field); }                           \
  }
#define KEY_STR(name, doc, field)                                          \
  Entry {                                                                  \
    {name, doc}, [](RunConfig& c, const std::string& v) { c.field = v; }, \
        [](const RunConfig& c) { return c.field; }                         \
  }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      KEY_INT("seed", "global seed; every random stream derives from it", train.seed),

      KEY_INT("vit.image_side", "input resolution R (square)", train.vit.image_side),
      KEY_INT("vit.patch_side", "patch size P", train.vit.patch_side),
      KEY_INT("vit.depth", "encoder blocks", train.vit.depth),
      KEY_INT("vit.width", "encoder width D", train.vit.width),
      KEY_INT("vit.heads", "encoder attention heads", train.vit.heads),
      KEY_INT("vit.registers", "encoder register tokens", train.vit.registers),
      KEY_INT("vit.cls_count", "CLS tokens (0 or 1)", train.vit.cls_count),
      KEY_INT("vit.mlp_ratio", "encoder MLP expansion", train.vit.mlp_ratio),

      KEY_INT("predictor.depth", "predictor blocks", train.predictor.depth),
      KEY_INT("predictor.width", "predictor width", train.predictor.width),
      KEY_INT("predictor.heads", "predictor attention heads", train.predictor.heads),
      KEY_INT("predictor.registers", "predictor register tokens", train.predictor.registers),
      KEY_INT("predictor.mlp_ratio", "predictor MLP expansion", train.predictor.mlp_ratio),

      Entry{{"mask.preset", "bootleg | ijepa; applied before the other mask.* keys"},
            [](RunConfig& c, const std::string& v) {
              if (v == "bootleg")
                c.train.masking.multiblock = bootleg_mask_config();
              else if (v == "ijepa")
                c.train.masking.multiblock = ijepa_mask_config();
              else
                bad_value("mask.preset", v, "bootleg | ijepa");
              c.mask_preset = v;
            },
            [](const RunConfig& c) { return c.mask_preset; }},
      Entry{{"mask.strategy",
             "multiblock | random | inverse_block | cyclic_block | green_noise"},
            [](RunConfig& c, const std::string& v) {
              c.train.masking.strategy = parse_mask_strategy(v);
            },
            [](const RunConfig& c) { return to_string(c.train.masking.strategy); }},
      KEY_INT("mask.num_rects", "predictor regions per sample", train.masking.multiblock.num_rects),
      KEY_NUM("mask.scale_min", "rectangle area fraction, lower", train.masking.multiblock.scale_min),
      KEY_NUM("mask.scale_max", "rectangle area fraction, upper", train.masking.multiblock.scale_max),
      KEY_NUM("mask.aspect_min", "rectangle aspect h/w, lower", train.masking.multiblock.aspect_min),
      KEY_NUM("mask.aspect_max", "rectangle aspect h/w, upper", train.masking.multiblock.aspect_max),
      KEY_NUM("mask.background_min", "background area fraction, lower",
              train.masking.multiblock.background_min),
      KEY_NUM("mask.background_max", "background area fraction, upper",
              train.masking.multiblock.background_max),
      KEY_BOOL("mask.alternate_aspect", "swap h and w for rectangles 2 and 4",
               train.masking.multiblock.alternate_aspect),
      Entry{{"mask.truncation", "keep_first | random_corner_edge"},
            [](RunConfig& c, const std::string& v) {
              c.train.masking.multiblock.truncation = to_truncation("mask.truncation", v);
            },
            [](const RunConfig& c) {
              return fmt_truncation(c.train.masking.multiblock.truncation);
            }},
      KEY_BOOL("mask.legacy_ijepa", "reproduce the reference I-JEPA sampler quirks",
               train.masking.multiblock.legacy_ijepa),
      KEY_NUM("mask.seen_rate", "inverse_block / random visible fraction",
              train.masking.seen_rate),
      KEY_NUM("mask.seen_min", "cyclic_block visible fraction, lower", train.masking.seen_min),
      KEY_NUM("mask.seen_max", "cyclic_block visible fraction, upper", train.masking.seen_max),
      KEY_INT("mask.cyclic_block", "cyclic_block cell side in tokens", train.masking.cyclic_block),
      KEY_NUM("mask.inverse_aspect_min", "inverse_block aspect, lower",
              train.masking.inverse_aspect_min),
      KEY_NUM("mask.inverse_aspect_max", "inverse_block aspect, upper",
              train.masking.inverse_aspect_max),
      KEY_NUM("mask.inverse_area_tolerance", "inverse_block relative area tolerance",
              train.masking.inverse_area_tolerance),

      KEY_STR("targets.taps", "\"default\" or e.g. block:1,block:4,mid:8", taps),
      Entry{{"targets.merge", "concat | average | joint"},
            [](RunConfig& c, const std::string& v) {
              c.train.targets.merge = parse_merge_op(v);
            },
            [](const RunConfig& c) { return to_string(c.train.targets.merge); }},
      KEY_NUM("targets.epsilon", "added to the per-token std in z-scoring",
              train.targets.epsilon),

      Entry{{"loss.kind", "mse | mse_no_forward | smooth_l1 | l1"},
            [](RunConfig& c, const std::string& v) { c.train.loss.kind = parse_loss_kind(v); },
            [](const RunConfig& c) { return to_string(c.train.loss.kind); }},
      Entry{{"loss.reduction", "mean | sum"},
            [](RunConfig& c, const std::string& v) {
              c.train.loss.reduction = parse_reduction(v);
            },
            [](const RunConfig& c) { return to_string(c.train.loss.reduction); }},
      KEY_INT("loss.monitor_every", "evaluate the true loss every k steps",
              train.loss.monitor_every),
      KEY_NUM("loss.smooth_l1_beta", "smooth_l1 transition point", train.loss.smooth_l1_beta),

      KEY_INT("train.epochs", "pretraining epochs E", train.epochs),
      KEY_INT("train.steps", "total steps; 0 derives E * steps_per_epoch", train.steps),
      KEY_INT("train.batch_size", "global batch", train.batch_size),
      KEY_INT("train.per_worker_batch", "mask-generation chunk", train.per_worker_batch),
      KEY_NUM("train.lr_init", "lr at step 0, quoted for reference_batch", train.lr_init),
      KEY_NUM("train.lr_max", "lr after warmup, quoted for reference_batch", train.lr_max),
      KEY_NUM("train.lr_final", "lr at the stretched horizon", train.lr_final),
      KEY_NUM("train.reference_batch", "batch the lr values are quoted for",
              train.reference_batch),
      KEY_NUM("train.warmup_epochs", "negative derives round(33 + 0.12 E)",
              train.warmup_epochs),
      KEY_NUM("train.schedule_stretch", "cosine horizon multiplier (>= 1)",
              train.schedule_stretch),
      KEY_NUM("train.weight_decay", "decoupled weight decay", train.weight_decay),
      KEY_NUM("train.beta1", "AdamW beta1", train.beta1),
      KEY_NUM("train.beta2", "AdamW beta2", train.beta2),
      KEY_NUM("train.adam_eps", "AdamW epsilon", train.adam_eps),
      KEY_NUM("train.ema_momentum", "teacher EMA momentum", train.ema_momentum),
      KEY_INT("train.checkpoint_every", "steps between checkpoints; 0 only at the end",
              checkpoint_every),

      KEY_NUM("augment.area_min", "random crop area fraction, lower", train.augment.area_min),
      KEY_NUM("augment.area_max", "random crop area fraction, upper", train.augment.area_max),
      KEY_NUM("augment.aspect_min", "random crop aspect, lower", train.augment.aspect_min),
      KEY_NUM("augment.aspect_max", "random crop aspect, upper", train.augment.aspect_max),
      KEY_NUM("augment.flip_prob", "horizontal flip probability", train.augment.flip_prob),
      Entry{{"norm.mean", "per-channel mean, r,g,b"},
            [](RunConfig& c, const std::string& v) {
              c.train.normalization.mean = to_array<3>("norm.mean", v);
            },
            [](const RunConfig& c) { return fmt_array(c.train.normalization.mean); }},
      Entry{{"norm.std", "per-channel std, r,g,b"},
            [](RunConfig& c, const std::string& v) {
              c.train.normalization.std = to_array<3>("norm.std", v);
            },
            [](const RunConfig& c) { return fmt_array(c.train.normalization.std); }},

      KEY_STR("data.train", "\"synthetic\" or an image-folder root", train_data),
      KEY_STR("data.test", "\"synthetic\" or an image-folder root", test_data),
      KEY_INT("data.synthetic_train", "generated training images", synthetic_train),
      KEY_INT("data.synthetic_test", "generated held-out images", synthetic_test),
      KEY_INT("data.synthetic_classes", "generated classes (<= 16)", synthetic_classes),

      Entry{{"probe.kind", "patch | cls | xattn | xblk"},
            [](RunConfig& c, const std::string& v) { c.probe.kind = parse_probe_kind(v); },
            [](const RunConfig& c) { return to_string(c.probe.kind); }},
      KEY_INT("probe.epochs", "probe training epochs", probe.epochs),
      KEY_NUM("probe.warmup_epochs", "probe lr warmup", probe.warmup_epochs),
      Entry{{"probe.lr_grid", "comma-separated learning rates"},
            [](RunConfig& c, const std::string& v) { c.probe.lr_grid = to_list("probe.lr_grid", v); },
            [](const RunConfig& c) { return fmt_list(c.probe.lr_grid); }},
      Entry{{"probe.wd_grid", "comma-separated weight decays"},
            [](RunConfig& c, const std::string& v) { c.probe.wd_grid = to_list("probe.wd_grid", v); },
            [](const RunConfig& c) { return fmt_list(c.probe.wd_grid); }},
      KEY_INT("probe.batch_size", "probe batch", probe.batch_size),
      KEY_NUM("probe.eval_crop", "centre-crop fraction at evaluation", probe.eval_crop),

      KEY_INT("stats.batches", "mask-stats: per-worker batches to sample", stats_batches),
      KEY_INT("dump.images", "dump-embeddings: held-out images to encode", dump_images),
  };
  return table;
}

#undef KEY_NUM
#undef KEY_INT
#undef KEY_BOOL
#undef KEY_STR

const Entry* find_entry(const std::string& name) {
  for (const auto& e : entries())
    if (e.key.name == name) return &e;
  return nullptr;
}

}  // namespace

void RunConfig::finalize() {
  train.targets.taps =
      taps == "default" ? default_tap_set(train.vit.depth) : parse_tap_list(taps);
  train.finalize();
  probe.seed = train.seed;
  probe.validate();
  require(synthetic_classes >= 1 && synthetic_classes <= 16, ErrorCode::InvalidConfig,
          "data.synthetic_classes must be in [1, 16]");
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const auto& e : entries()) out.push_back(e.key);
    return out;
  }();
  return keys;
}

std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::InvalidConfig,
            "line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    require(find_entry(key) != nullptr, ErrorCode::UnknownKey, "unknown config key '" + key + "'");
    out.emplace_back(std::move(key), trim(line.substr(eq + 1)));
  }
  return out;
}

RunConfig build_config(const std::vector<std::pair<std::string, std::string>>& assignments) {
  std::map<std::string, std::string> last;
  for (const auto& [k, v] : assignments) {
    require(find_entry(k) != nullptr, ErrorCode::UnknownKey, "unknown config key '" + k + "'");
    last[k] = v;
  }
  RunConfig cfg;
  for (const auto& e : entries()) {
    const auto it = last.find(e.key.name);
    if (it != last.end()) e.set(cfg, it->second);
  }
  cfg.finalize();
  return cfg;
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::vector<std::pair<std::string, std::string>> assignments;
  if (!path.empty()) {
    std::ifstream is(path);
    require(static_cast<bool>(is), ErrorCode::InvalidConfig, "cannot read config " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    assignments = parse_config_text(ss.str());
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    require(eq != std::string::npos, ErrorCode::InvalidConfig,
            "override '" + o + "' is not key=value");
    std::string key = trim(o.substr(0, eq));
    require(find_entry(key) != nullptr, ErrorCode::UnknownKey, "unknown config key '" + key + "'");
    assignments.emplace_back(std::move(key), trim(o.substr(eq + 1)));
  }
  return build_config(assignments);
}

std::string resolved_config_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& e : entries()) out += e.key.name + " = " + e.get(cfg) + "\n";
  return out;
}

std::string version_stamp() { return std::string(BOOTLEG_VERSION) + "+" + BOOTLEG_GIT_REV; }

}  // namespace bootleg
