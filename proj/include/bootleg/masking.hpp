#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "bootleg/rng.hpp"

namespace bootleg {

enum class TruncationPolicy { KeepFirst, RandomCornerEdge };

/// Multi-block mask sampler settings. Fractions are of the token-grid area.
struct MaskConfig {
  int grid_h = 14;
  int grid_w = 14;
  int num_rects = 4;
  double scale_min = 0.160;
  double scale_max = 0.183;
  double aspect_min = 0.667;
  double aspect_max = 1.5;
  double background_min = 0.85;
  double background_max = 1.0;
  bool alternate_aspect = true;
  TruncationPolicy truncation = TruncationPolicy::RandomCornerEdge;
  /// Reproduces the reference I-JEPA sampler: one uniform draw drives both
  /// scale and aspect, background capped at grid-1 per side, rectangle
  /// corners restricted to the top-left (grid-1)^2 region, keep-first
  /// truncation.
  bool legacy_ijepa = false;

  void validate() const;
  int tokens() const { return grid_h * grid_w; }
};

/// Bootleg defaults on a 14x14 grid.
MaskConfig bootleg_mask_config(int grid_h = 14, int grid_w = 14);
/// I-JEPA's published sampler: scale [0.15, 0.2], aspect [0.75, 1.5], with
/// the legacy bugs enabled.
MaskConfig ijepa_mask_config(int grid_h = 14, int grid_w = 14);

struct RectShape {
  int h = 0;
  int w = 0;
  auto operator<=>(const RectShape&) const = default;
};

/// One sample's mask: visible token indices (row-major, ascending) and the
/// predictor regions, each the filled index set of one rectangle.
struct MaskSet {
  int grid_h = 0;
  int grid_w = 0;
  std::vector<std::int32_t> visible;
  std::vector<std::vector<std::int32_t>> regions;

  /// Sorted, de-duplicated union of all regions.
  std::vector<std::int32_t> target_union() const;
};

struct WorkerBatchMasks {
  std::vector<MaskSet> samples;
  RectShape shape;       // rectangle dims for odd-numbered rectangles 1, 3, ...
  RectShape background;  // background dims shared by the batch
  std::size_t visible_len = 0;  // V' after truncation
};

/// Round half away from zero.
int round_half_away(double x);

RectShape sample_rect_shape(Rng& rng, const MaskConfig& cfg);
RectShape sample_background_shape(Rng& rng, const MaskConfig& cfg);

/// Rectangle-shape histogram over `draws` independent draws. With
/// alternate_aspect, odd draws are recorded with height and width swapped,
/// mirroring rectangles 2 and 4 of each batch.
std::map<RectShape, std::uint64_t> shape_histogram(const MaskConfig& cfg,
                                                   std::uint64_t seed,
                                                   std::uint64_t draws);

/// Cuts every visible list to the shortest length in the batch. The rng is
/// consumed only by RandomCornerEdge (two draws per list).
std::vector<std::vector<std::int32_t>> truncate_visible(
    const std::vector<std::vector<std::int32_t>>& visible, int grid_h,
    int grid_w, TruncationPolicy policy, Rng& rng);

WorkerBatchMasks generate_worker_batch_masks(std::uint64_t seed,
                                             std::size_t batch_size,
                                             const MaskConfig& cfg);

enum class MaskStrategy { UniformRandom, InverseBlock, CyclicBlock, MultiBlock, GreenNoise };

MaskStrategy parse_mask_strategy(const std::string& name);
std::string to_string(MaskStrategy s);

/// Settings for the ablation strategies. The geometry of InverseBlock and
/// CyclicBlock is this library's own parameterisation:
///  - InverseBlock: one visible rectangle whose area is the closest
///    achievable to seen_rate * tokens (within inverse_area_tolerance of it
///    when possible) with aspect in [inverse_aspect_min, inverse_aspect_max],
///    placed uniformly; the complement is the single target region.
///  - CyclicBlock: the grid is tiled by cyclic_block x cyclic_block cells;
///    a rate r ~ U[seen_min, seen_max] picks k = round(r * cells) cells,
///    taken as phase + i * stride (mod cells) for i < k with a per-sample
///    random phase and a fixed stride coprime with the cell count.
struct StrategyConfig {
  MaskStrategy strategy = MaskStrategy::MultiBlock;
  MaskConfig multiblock;
  double seen_rate = 0.25;
  double seen_min = 0.25;
  double seen_max = 0.35;
  int cyclic_block = 2;
  double inverse_aspect_min = 0.5;
  double inverse_aspect_max = 2.0;
  double inverse_area_tolerance = 0.05;
};

MaskSet generate_strategy_mask(const StrategyConfig& cfg, Rng& rng);

struct Summary {
  double mean = 0, stdev = 0, min = 0, max = 0;
};

Summary summarize(const std::vector<double>& values);

struct StatsReport {
  std::uint64_t samples = 0;
  Summary visible_fraction;
  Summary target_fraction;
  Summary adjacency_rate;
  int grid_h = 0, grid_w = 0;
  /// Per-position frequency (0..1) of being visible / being a target.
  std::vector<double> visible_freq;
  std::vector<double> target_freq;
};

/// Fraction of target-union tokens with at least one 4-neighbour visible.
double adjacency_rate(const MaskSet& mask);

StatsReport mask_statistics(const StrategyConfig& cfg, std::size_t batch_size,
                            std::size_t n_batches, std::uint64_t seed);

}  // namespace bootleg
