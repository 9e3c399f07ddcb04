#include "bootleg/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bootleg/error.hpp"

namespace bootleg {

void MaskConfig::validate() const {
  auto bad = [](const std::string& msg) { fail(ErrorCode::InvalidConfig, msg); };
  if (grid_h < 1 || grid_w < 1) bad("mask grid must be at least 1x1");
  if (num_rects < 1) bad("mask.num_rects must be >= 1");
  if (!(scale_min > 0 && scale_min <= scale_max && scale_max <= 1))
    bad("mask scale range must satisfy 0 < min <= max <= 1");
  if (!(aspect_min > 0 && aspect_min <= aspect_max))
    bad("mask aspect range must satisfy 0 < min <= max");
  if (!(background_min > 0 && background_min <= background_max &&
        background_max <= 1))
    bad("mask background range must satisfy 0 < min <= max <= 1");
  if (legacy_ijepa && (grid_h < 2 || grid_w < 2))
    bad("legacy_ijepa masking needs a grid of at least 2x2");
}

MaskConfig bootleg_mask_config(int grid_h, int grid_w) {
  MaskConfig cfg;
  cfg.grid_h = grid_h;
  cfg.grid_w = grid_w;
  return cfg;
}

MaskConfig ijepa_mask_config(int grid_h, int grid_w) {
  MaskConfig cfg;
  cfg.grid_h = grid_h;
  cfg.grid_w = grid_w;
  cfg.scale_min = 0.15;
  cfg.scale_max = 0.20;
  cfg.aspect_min = 0.75;
  cfg.aspect_max = 1.5;
  cfg.alternate_aspect = false;
  cfg.truncation = TruncationPolicy::KeepFirst;
  cfg.legacy_ijepa = true;
  return cfg;
}

std::vector<std::int32_t> MaskSet::target_union() const {
  std::vector<std::int32_t> out;
  for (const auto& r : regions) out.insert(out.end(), r.begin(), r.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

int round_half_away(double x) {
  return static_cast<int>(x < 0 ? -std::floor(-x + 0.5) : std::floor(x + 0.5));
}

RectShape sample_rect_shape(Rng& rng, const MaskConfig& cfg) {
  double scale, aspect;
  if (cfg.legacy_ijepa) {
    const double u = rng.uniform();
    scale = cfg.scale_min + u * (cfg.scale_max - cfg.scale_min);
    aspect = cfg.aspect_min + u * (cfg.aspect_max - cfg.aspect_min);
  } else {
    scale = rng.uniform(cfg.scale_min, cfg.scale_max);
    const double lo = std::log(cfg.aspect_min), hi = std::log(cfg.aspect_max);
    const double v = rng.uniform();
    aspect = cfg.aspect_min == cfg.aspect_max ? cfg.aspect_min
                                              : std::exp(lo + v * (hi - lo));
  }
  // Whole-token budget first, then the rectangle sides.
  const double keep = std::floor(scale * cfg.grid_h * cfg.grid_w);
  RectShape s{round_half_away(std::sqrt(keep * aspect)),
              round_half_away(std::sqrt(keep / aspect))};
  const int max_h = cfg.legacy_ijepa ? cfg.grid_h - 1 : cfg.grid_h;
  const int max_w = cfg.legacy_ijepa ? cfg.grid_w - 1 : cfg.grid_w;
  s.h = std::clamp(s.h, 1, max_h);
  s.w = std::clamp(s.w, 1, max_w);
  return s;
}

RectShape sample_background_shape(Rng& rng, const MaskConfig& cfg) {
  const double u = rng.uniform(cfg.background_min, cfg.background_max);
  if (cfg.legacy_ijepa) {
    const double keep = std::floor(u * cfg.grid_h * cfg.grid_w);
    const int side = round_half_away(std::sqrt(keep));
    return {std::clamp(side, 1, cfg.grid_h - 1), std::clamp(side, 1, cfg.grid_w - 1)};
  }
  const double root = std::sqrt(u);
  return {std::clamp(round_half_away(cfg.grid_h * root), 1, cfg.grid_h),
          std::clamp(round_half_away(cfg.grid_w * root), 1, cfg.grid_w)};
}

std::map<RectShape, std::uint64_t> shape_histogram(const MaskConfig& cfg,
                                                   std::uint64_t seed,
                                                   std::uint64_t draws) {
  cfg.validate();
  Rng rng(seed);
  std::map<RectShape, std::uint64_t> hist;
  for (std::uint64_t i = 0; i < draws; ++i) {
    RectShape s = sample_rect_shape(rng, cfg);
    if (cfg.alternate_aspect && (i & 1)) std::swap(s.h, s.w);
    ++hist[s];
  }
  return hist;
}

namespace {

// Scan order starting at one grid corner, sweeping rows or columns inward.
std::vector<std::int32_t> corner_scan(int H, int W, int corner, bool by_columns) {
  const bool from_bottom = corner & 1;
  const bool from_right = corner & 2;
  std::vector<std::int32_t> order;
  order.reserve(static_cast<std::size_t>(H) * W);
  auto row_at = [&](int i) { return from_bottom ? H - 1 - i : i; };
  auto col_at = [&](int j) { return from_right ? W - 1 - j : j; };
  if (by_columns) {
    for (int j = 0; j < W; ++j)
      for (int i = 0; i < H; ++i) order.push_back(row_at(i) * W + col_at(j));
  } else {
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) order.push_back(row_at(i) * W + col_at(j));
  }
  return order;
}

}  // namespace

std::vector<std::vector<std::int32_t>> truncate_visible(
    const std::vector<std::vector<std::int32_t>>& visible, int grid_h,
    int grid_w, TruncationPolicy policy, Rng& rng) {
  require(!visible.empty(), ErrorCode::InvalidConfig,
          "truncate_visible needs at least one list");
  std::size_t target = visible.front().size();
  for (const auto& v : visible) target = std::min(target, v.size());

  std::vector<std::vector<std::int32_t>> out;
  out.reserve(visible.size());
  for (const auto& v : visible) {
    if (policy == TruncationPolicy::KeepFirst) {
      out.emplace_back(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(target));
      continue;
    }
    const int corner = static_cast<int>(rng.below(4));
    const bool by_columns = rng.below(2) == 1;
    std::size_t excess = v.size() - target;
    if (excess == 0) {
      out.push_back(v);
      continue;
    }
    std::vector<char> keep(static_cast<std::size_t>(grid_h) * grid_w, 0);
    for (auto idx : v) keep[idx] = 1;
    for (auto idx : corner_scan(grid_h, grid_w, corner, by_columns)) {
      if (excess == 0) break;
      if (keep[idx]) {
        keep[idx] = 0;
        --excess;
      }
    }
    std::vector<std::int32_t> kept;
    kept.reserve(target);
    for (auto idx : v)
      if (keep[idx]) kept.push_back(idx);
    out.push_back(std::move(kept));
  }
  return out;
}

namespace {

std::vector<std::int32_t> rect_indices(int top, int left, RectShape s, int W) {
  std::vector<std::int32_t> idx;
  idx.reserve(static_cast<std::size_t>(s.h) * s.w);
  for (int i = top; i < top + s.h; ++i)
    for (int j = left; j < left + s.w; ++j) idx.push_back(i * W + j);
  return idx;
}

}  // namespace

WorkerBatchMasks generate_worker_batch_masks(std::uint64_t seed,
                                             std::size_t batch_size,
                                             const MaskConfig& cfg) {
  cfg.validate();
  require(batch_size >= 1, ErrorCode::InvalidConfig, "batch_size must be >= 1");
  const int H = cfg.grid_h, W = cfg.grid_w;
  Rng rng(seed);

  WorkerBatchMasks out;
  out.shape = sample_rect_shape(rng, cfg);
  out.background = sample_background_shape(rng, cfg);

  // Legacy off-by-one: corners drawn from [0, grid - 1 - side].
  auto place = [&](int extent, int side) {
    const int range = cfg.legacy_ijepa ? extent - side : extent - side + 1;
    return static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(range, 1))));
  };

  std::vector<std::vector<std::int32_t>> visible;
  visible.reserve(batch_size);
  out.samples.resize(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b) {
    MaskSet& m = out.samples[b];
    m.grid_h = H;
    m.grid_w = W;
    std::vector<char> masked(static_cast<std::size_t>(H) * W, 0);
    for (int r = 0; r < cfg.num_rects; ++r) {
      RectShape s = out.shape;
      if (cfg.alternate_aspect && (r & 1)) std::swap(s.h, s.w);
      s.h = std::min(s.h, H);
      s.w = std::min(s.w, W);
      const int top = place(H, s.h);
      const int left = place(W, s.w);
      m.regions.push_back(rect_indices(top, left, s, W));
      for (auto idx : m.regions.back()) masked[idx] = 1;
    }
    const int btop = place(H, out.background.h);
    const int bleft = place(W, out.background.w);
    std::vector<std::int32_t> vis;
    for (auto idx : rect_indices(btop, bleft, out.background, W))
      if (!masked[idx]) vis.push_back(idx);
    if (vis.empty())
      fail(ErrorCode::EmptyVisible,
           "sample " + std::to_string(b) + " of mask batch seed " +
               std::to_string(seed) + " has no visible tokens");
    visible.push_back(std::move(vis));
  }

  const TruncationPolicy policy =
      cfg.legacy_ijepa ? TruncationPolicy::KeepFirst : cfg.truncation;
  auto truncated = truncate_visible(visible, H, W, policy, rng);
  out.visible_len = truncated.front().size();
  for (std::size_t b = 0; b < batch_size; ++b)
    out.samples[b].visible = std::move(truncated[b]);
  return out;
}

MaskStrategy parse_mask_strategy(const std::string& name) {
  if (name == "multiblock") return MaskStrategy::MultiBlock;
  if (name == "random") return MaskStrategy::UniformRandom;
  if (name == "inverse_block") return MaskStrategy::InverseBlock;
  if (name == "cyclic_block") return MaskStrategy::CyclicBlock;
  if (name == "green_noise") return MaskStrategy::GreenNoise;
  fail(ErrorCode::InvalidConfig, "unknown mask strategy '" + name + "'");
}

std::string to_string(MaskStrategy s) {
  switch (s) {
    case MaskStrategy::MultiBlock: return "multiblock";
    case MaskStrategy::UniformRandom: return "random";
    case MaskStrategy::InverseBlock: return "inverse_block";
    case MaskStrategy::CyclicBlock: return "cyclic_block";
    case MaskStrategy::GreenNoise: return "green_noise";
  }
  return "unknown";
}

namespace {

MaskSet from_visible(int H, int W, std::vector<std::int32_t> visible) {
  std::sort(visible.begin(), visible.end());
  MaskSet m;
  m.grid_h = H;
  m.grid_w = W;
  std::vector<char> seen(static_cast<std::size_t>(H) * W, 0);
  for (auto idx : visible) seen[idx] = 1;
  std::vector<std::int32_t> target;
  for (int i = 0; i < H * W; ++i)
    if (!seen[i]) target.push_back(i);
  m.visible = std::move(visible);
  m.regions.push_back(std::move(target));
  return m;
}

MaskSet uniform_random_mask(const StrategyConfig& cfg, Rng& rng) {
  const int H = cfg.multiblock.grid_h, W = cfg.multiblock.grid_w, N = H * W;
  const int n = std::clamp(round_half_away(cfg.seen_rate * N), 1, N);
  std::vector<std::int32_t> perm(N);
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = 0; i < n; ++i) {
    const int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(N - i)));
    std::swap(perm[i], perm[j]);
  }
  perm.resize(n);
  return from_visible(H, W, std::move(perm));
}

MaskSet inverse_block_mask(const StrategyConfig& cfg, Rng& rng) {
  const int H = cfg.multiblock.grid_h, W = cfg.multiblock.grid_w;
  const double area = cfg.seen_rate * H * W;
  std::vector<RectShape> in_aspect;
  for (int h = 1; h <= H; ++h)
    for (int w = 1; w <= W; ++w) {
      const double a = static_cast<double>(h) / w;
      if (a >= cfg.inverse_aspect_min && a <= cfg.inverse_aspect_max)
        in_aspect.push_back({h, w});
    }
  require(!in_aspect.empty(), ErrorCode::InvalidConfig,
          "inverse_block aspect range admits no rectangle");
  auto err = [&](RectShape s) { return std::abs(s.h * s.w - area); };
  std::vector<RectShape> cands;
  for (auto s : in_aspect)
    if (err(s) <= std::max(1.0, cfg.inverse_area_tolerance * area)) cands.push_back(s);
  if (cands.empty()) {
    double best = err(in_aspect.front());
    for (auto s : in_aspect) best = std::min(best, err(s));
    for (auto s : in_aspect)
      if (err(s) == best) cands.push_back(s);
  }
  const RectShape s = cands[rng.below(cands.size())];
  const int top = static_cast<int>(rng.below(static_cast<std::uint64_t>(H - s.h + 1)));
  const int left = static_cast<int>(rng.below(static_cast<std::uint64_t>(W - s.w + 1)));
  return from_visible(H, W, rect_indices(top, left, s, W));
}

MaskSet cyclic_block_mask(const StrategyConfig& cfg, Rng& rng) {
  const int H = cfg.multiblock.grid_h, W = cfg.multiblock.grid_w;
  const int b = std::max(1, cfg.cyclic_block);
  const int gh = (H + b - 1) / b, gw = (W + b - 1) / b, cells = gh * gw;
  const double rate = rng.uniform(cfg.seen_min, cfg.seen_max);
  const int k = std::clamp(round_half_away(rate * cells), 1, cells);
  const int phase = static_cast<int>(rng.below(static_cast<std::uint64_t>(cells)));
  // Golden-ratio stride spreads consecutive cells across the grid.
  int stride = std::max(1, round_half_away(cells * 0.6180339887498949));
  while (std::gcd(stride, cells) != 1) ++stride;
  std::vector<std::int32_t> vis;
  for (int i = 0; i < k; ++i) {
    const int cell = static_cast<int>((phase + static_cast<long>(i) * stride) % cells);
    const int ci = cell / gw, cj = cell % gw;
    for (int y = ci * b; y < std::min(H, (ci + 1) * b); ++y)
      for (int x = cj * b; x < std::min(W, (cj + 1) * b); ++x) vis.push_back(y * W + x);
  }
  return from_visible(H, W, std::move(vis));
}

}  // namespace

MaskSet generate_strategy_mask(const StrategyConfig& cfg, Rng& rng) {
  cfg.multiblock.validate();
  switch (cfg.strategy) {
    case MaskStrategy::UniformRandom:
      require(cfg.seen_rate > 0 && cfg.seen_rate <= 1, ErrorCode::InvalidConfig,
              "seen_rate must be in (0, 1]");
      return uniform_random_mask(cfg, rng);
    case MaskStrategy::InverseBlock:
      require(cfg.seen_rate > 0 && cfg.seen_rate <= 1, ErrorCode::InvalidConfig,
              "seen_rate must be in (0, 1]");
      return inverse_block_mask(cfg, rng);
    case MaskStrategy::CyclicBlock:
      require(cfg.seen_min > 0 && cfg.seen_min <= cfg.seen_max && cfg.seen_max <= 1,
              ErrorCode::InvalidConfig, "cyclic seen interval must be within (0, 1]");
      return cyclic_block_mask(cfg, rng);
    case MaskStrategy::MultiBlock:
      return generate_worker_batch_masks(rng.next_u64(), 1, cfg.multiblock).samples[0];
    default:
      break;
  }
  fail(ErrorCode::UnsupportedStrategy,
       "mask strategy '" + to_string(cfg.strategy) + "' is not supported");
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  if (values.empty()) return s;
  double sum = 0;
  s.min = values.front();
  s.max = values.front();
  for (double v : values) {
    sum += v;
    s.min = std::min(s.min, v);
    s.max = std::max(s.max, v);
  }
  s.mean = sum / static_cast<double>(values.size());
  double ss = 0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.stdev = std::sqrt(ss / static_cast<double>(values.size()));
  return s;
}

double adjacency_rate(const MaskSet& mask) {
  const int H = mask.grid_h, W = mask.grid_w;
  std::vector<char> vis(static_cast<std::size_t>(H) * W, 0);
  for (auto idx : mask.visible) vis[idx] = 1;
  const auto targets = mask.target_union();
  if (targets.empty()) return 0.0;
  std::size_t adjacent = 0;
  for (auto idx : targets) {
    const int i = idx / W, j = idx % W;
    const bool hit = (i > 0 && vis[idx - W]) || (i + 1 < H && vis[idx + W]) ||
                     (j > 0 && vis[idx - 1]) || (j + 1 < W && vis[idx + 1]);
    adjacent += hit;
  }
  return static_cast<double>(adjacent) / static_cast<double>(targets.size());
}

namespace {

struct BatchTally {
  std::vector<double> visible, target, adjacency;
  std::vector<std::uint32_t> vis_count, tgt_count;
};

}  // namespace

StatsReport mask_statistics(const StrategyConfig& cfg, std::size_t batch_size,
                            std::size_t n_batches, std::uint64_t seed) {
  const int H = cfg.multiblock.grid_h, W = cfg.multiblock.grid_w;
  const std::size_t N = static_cast<std::size_t>(H) * W;
  std::vector<BatchTally> tallies(n_batches);

  // Batches are independent given their derived seeds; merging in batch
  // order keeps the report identical for any thread count.
#pragma omp parallel for schedule(dynamic)
  for (std::size_t b = 0; b < n_batches; ++b) {
    const std::uint64_t bseed = derive_seed(seed ^ kMaskStream, 0, b);
    std::vector<MaskSet> masks;
    if (cfg.strategy == MaskStrategy::MultiBlock) {
      masks = generate_worker_batch_masks(bseed, batch_size, cfg.multiblock).samples;
    } else {
      Rng rng(bseed);
      for (std::size_t i = 0; i < batch_size; ++i)
        masks.push_back(generate_strategy_mask(cfg, rng));
    }
    BatchTally& t = tallies[b];
    t.vis_count.assign(N, 0);
    t.tgt_count.assign(N, 0);
    for (const auto& m : masks) {
      const auto tu = m.target_union();
      t.visible.push_back(static_cast<double>(m.visible.size()) / N);
      t.target.push_back(static_cast<double>(tu.size()) / N);
      t.adjacency.push_back(adjacency_rate(m));
      for (auto idx : m.visible) ++t.vis_count[idx];
      for (auto idx : tu) ++t.tgt_count[idx];
    }
  }

  StatsReport rep;
  rep.grid_h = H;
  rep.grid_w = W;
  std::vector<double> vis, tgt, adj;
  std::vector<std::uint64_t> vc(N, 0), tc(N, 0);
  for (const auto& t : tallies) {
    vis.insert(vis.end(), t.visible.begin(), t.visible.end());
    tgt.insert(tgt.end(), t.target.begin(), t.target.end());
    adj.insert(adj.end(), t.adjacency.begin(), t.adjacency.end());
    for (std::size_t i = 0; i < N; ++i) {
      vc[i] += t.vis_count[i];
      tc[i] += t.tgt_count[i];
    }
  }
  rep.samples = vis.size();
  rep.visible_fraction = summarize(vis);
  rep.target_fraction = summarize(tgt);
  rep.adjacency_rate = summarize(adj);
  rep.visible_freq.resize(N);
  rep.target_freq.resize(N);
  for (std::size_t i = 0; i < N; ++i) {
    rep.visible_freq[i] = rep.samples ? static_cast<double>(vc[i]) / rep.samples : 0;
    rep.target_freq[i] = rep.samples ? static_cast<double>(tc[i]) / rep.samples : 0;
  }
  return rep;
}

}  // namespace bootleg
