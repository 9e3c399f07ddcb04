#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "bootleg/error.hpp"
#include "bootleg/masking.hpp"

using namespace bootleg;

namespace {

// Shape of one draw, written out independently of the library.
RectShape oracle_shape(double scale, double aspect, int H, int W, bool legacy) {
  const double keep = std::floor(scale * H * W);
  auto rnd = [](double x) { return static_cast<int>(std::floor(x + 0.5)); };
  int h = rnd(std::sqrt(keep * aspect)), w = rnd(std::sqrt(keep / aspect));
  const int mh = legacy ? H - 1 : H, mw = legacy ? W - 1 : W;
  return {std::clamp(h, 1, mh), std::clamp(w, 1, mw)};
}

/// Exact-by-quadrature shape probabilities (alternation ignored).
std::map<RectShape, double> oracle_distribution(const MaskConfig& c) {
  std::map<RectShape, double> p;
  if (c.legacy_ijepa) {
    const int n = 1000000;
    for (int i = 0; i < n; ++i) {
      const double u = (i + 0.5) / n;
      p[oracle_shape(c.scale_min + u * (c.scale_max - c.scale_min),
                     c.aspect_min + u * (c.aspect_max - c.aspect_min), c.grid_h, c.grid_w,
                     true)] += 1.0 / n;
    }
    return p;
  }
  const int n = 1500;
  const double lo = std::log(c.aspect_min), hi = std::log(c.aspect_max);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double s = c.scale_min + (i + 0.5) / n * (c.scale_max - c.scale_min);
      const double a = std::exp(lo + (j + 0.5) / n * (hi - lo));
      p[oracle_shape(s, a, c.grid_h, c.grid_w, false)] += 1.0 / (double(n) * n);
    }
  return p;
}

bool is_rectangle(const std::vector<std::int32_t>& r, int W, RectShape s) {
  if (r.size() != static_cast<std::size_t>(s.h * s.w)) return false;
  const int top = r.front() / W, left = r.front() % W;
  for (int i = 0; i < s.h; ++i)
    for (int j = 0; j < s.w; ++j)
      if (r[static_cast<std::size_t>(i * s.w + j)] != (top + i) * W + left + j) return false;
  return true;
}

}  // namespace

TEST_CASE("round_half_away") {
  CHECK(round_half_away(2.5) == 3);
  CHECK(round_half_away(-2.5) == -3);
  CHECK(round_half_away(0.49999) == 0);
  CHECK(round_half_away(5.5) == 6);
}

TEST_CASE("degenerate ranges give fixed shapes") {
  MaskConfig c;
  c.scale_min = c.scale_max = 0.25;
  c.aspect_min = c.aspect_max = 1.0;
  Rng rng(1);
  for (int i = 0; i < 100; ++i) CHECK(sample_rect_shape(rng, c) == RectShape{7, 7});
  MaskConfig d;
  d.aspect_min = d.aspect_max = 1.0;
  for (int i = 0; i < 1000; ++i) CHECK(sample_rect_shape(rng, d) == RectShape{6, 6});
}

TEST_CASE("shape histogram matches quadrature of the sampling law") {
  for (bool legacy : {false, true}) {
    CAPTURE(legacy);
    MaskConfig c = legacy ? ijepa_mask_config() : bootleg_mask_config();
    c.alternate_aspect = false;
    const std::uint64_t draws = 400000;
    const auto hist = shape_histogram(c, 5, draws);
    const auto oracle = oracle_distribution(c);
    std::set<RectShape> keys;
    for (const auto& [k, v] : hist) keys.insert(k);
    for (const auto& [k, v] : oracle) keys.insert(k);
    for (const auto& k : keys) {
      const double p = oracle.count(k) ? oracle.at(k) : 0.0;
      const double got = hist.count(k) ? double(hist.at(k)) / draws : 0.0;
      const double sigma = std::sqrt(std::max(p * (1 - p), 1e-12) / draws);
      CAPTURE(k.h);
      CAPTURE(k.w);
      CHECK(std::abs(got - p) <= 5 * sigma + 2e-3);
    }
  }
}

TEST_CASE("alternate aspect symmetrises the histogram") {
  const auto hist = shape_histogram(bootleg_mask_config(), 9, 200000);
  for (const auto& [k, v] : hist) {
    const RectShape t{k.w, k.h};
    REQUIRE(hist.count(t));
    CHECK(std::abs(double(v) - double(hist.at(t))) < 5 * std::sqrt(double(v) + 1) + 50);
  }
}

TEST_CASE("legacy background is 13x13 and bootleg background is 13 or 14") {
  Rng rng(2);
  std::set<int> boot, legacy;
  for (int i = 0; i < 2000; ++i) {
    const auto b = sample_background_shape(rng, bootleg_mask_config());
    CHECK(b.h == b.w);
    boot.insert(b.h);
    legacy.insert(sample_background_shape(rng, ijepa_mask_config()).h);
  }
  CHECK(boot == std::set<int>{13, 14});
  CHECK(legacy == std::set<int>{13});
}

TEST_CASE("worker batch structure") {
  for (bool legacy : {false, true}) {
    CAPTURE(legacy);
    const MaskConfig c = legacy ? ijepa_mask_config() : bootleg_mask_config();
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto wb = generate_worker_batch_masks(seed, 64, c);
      REQUIRE(wb.samples.size() == 64);
      std::size_t min_len = 1000;
      for (const auto& m : wb.samples) {
        CHECK(m.visible.size() == wb.visible_len);
        CHECK(std::is_sorted(m.visible.begin(), m.visible.end()));
        REQUIRE(m.regions.size() == 4);
        for (int r = 0; r < 4; ++r) {
          RectShape s = wb.shape;
          if (c.alternate_aspect && (r & 1)) std::swap(s.h, s.w);
          CHECK(is_rectangle(m.regions[r], c.grid_w, s));
        }
        const auto tu = m.target_union();
        for (auto v : m.visible) CHECK(!std::binary_search(tu.begin(), tu.end(), v));
        // Visible tokens sit inside one background square.
        int rmin = 99, rmax = -1, cmin = 99, cmax = -1;
        for (auto v : m.visible) {
          rmin = std::min(rmin, v / c.grid_w);
          rmax = std::max(rmax, v / c.grid_w);
          cmin = std::min(cmin, v % c.grid_w);
          cmax = std::max(cmax, v % c.grid_w);
        }
        CHECK(rmax - rmin + 1 <= wb.background.h);
        CHECK(cmax - cmin + 1 <= wb.background.w);
        min_len = std::min(min_len, m.visible.size());
      }
      CHECK(min_len == wb.visible_len);
    }
  }
}

TEST_CASE("mask generation is a pure function of the seed") {
  const auto a = generate_worker_batch_masks(77, 32, bootleg_mask_config());
  const auto b = generate_worker_batch_masks(77, 32, bootleg_mask_config());
  const auto c = generate_worker_batch_masks(78, 32, bootleg_mask_config());
  bool differs = false;
  for (std::size_t i = 0; i < 32; ++i) {
    CHECK(a.samples[i].visible == b.samples[i].visible);
    CHECK(a.samples[i].regions == b.samples[i].regions);
    differs = differs || a.samples[i].regions != c.samples[i].regions;
  }
  CHECK(differs);
}

TEST_CASE("keep-first truncation keeps a prefix") {
  Rng rng(0);
  const std::vector<std::vector<std::int32_t>> v{{1, 2, 3, 4, 5}, {0, 9}, {3, 4, 7}};
  const auto t = truncate_visible(v, 4, 4, TruncationPolicy::KeepFirst, rng);
  CHECK(t == std::vector<std::vector<std::int32_t>>{{1, 2}, {0, 9}, {3, 4}});
}

TEST_CASE("random corner/edge truncation drops the first tokens of a corner scan") {
  const int H = 6, W = 5;
  // All eight scans (4 corners x row/column sweeps), built independently.
  auto scans = [&] {
    std::vector<std::vector<int>> out;
    for (int corner = 0; corner < 4; ++corner)
      for (int cols = 0; cols < 2; ++cols) {
        std::vector<int> o;
        for (int a = 0; a < (cols ? W : H); ++a)
          for (int b = 0; b < (cols ? H : W); ++b) {
            int r = cols ? b : a, c = cols ? a : b;
            if (corner & 1) r = H - 1 - r;
            if (corner & 2) c = W - 1 - c;
            o.push_back(r * W + c);
          }
        out.push_back(o);
      }
    return out;
  }();
  Rng data(4);
  std::vector<std::vector<std::int32_t>> lists;
  for (int i = 0; i < 400; ++i) {
    std::vector<std::int32_t> l;
    for (int t = 0; t < H * W; ++t)
      if (data.uniform() < 0.5) l.push_back(t);
    if (l.size() < 3) l = {0, 1, 2};
    lists.push_back(l);
  }
  Rng rng(8);
  const auto out = truncate_visible(lists, H, W, TruncationPolicy::RandomCornerEdge, rng);
  std::size_t target = 1000;
  for (const auto& l : lists) target = std::min(target, l.size());
  std::map<int, int> scan_hits;
  for (std::size_t i = 0; i < lists.size(); ++i) {
    REQUIRE(out[i].size() == target);
    CHECK(std::is_sorted(out[i].begin(), out[i].end()));
    const std::size_t excess = lists[i].size() - target;
    std::set<int> dropped;
    for (auto v : lists[i])
      if (!std::binary_search(out[i].begin(), out[i].end(), v)) dropped.insert(v);
    CHECK(dropped.size() == excess);
    bool explained = excess == 0;
    for (std::size_t s = 0; s < scans.size() && !explained; ++s) {
      std::set<int> first;
      for (int idx : scans[s]) {
        if (first.size() == excess) break;
        if (std::find(lists[i].begin(), lists[i].end(), idx) != lists[i].end())
          first.insert(idx);
      }
      if (first == dropped) {
        explained = true;
        ++scan_hits[static_cast<int>(s)];
      }
    }
    CHECK(explained);
  }
}

TEST_CASE("legacy placement never touches the last row or column") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto wb = generate_worker_batch_masks(seed, 16, ijepa_mask_config());
    for (const auto& m : wb.samples) {
      for (auto v : m.visible) {
        CHECK(v / 14 != 13);
        CHECK(v % 14 != 13);
      }
      for (const auto& r : m.regions)
        for (auto v : r) {
          CHECK(v / 14 != 13);
          CHECK(v % 14 != 13);
        }
    }
  }
}

TEST_CASE("bootleg placement reaches every grid cell") {
  StrategyConfig sc;
  const auto rep = mask_statistics(sc, 64, 200, 3);
  for (double f : rep.visible_freq) CHECK(f > 0);
  for (double f : rep.target_freq) CHECK(f > 0);
  // Visibility is symmetric under 180-degree rotation up to noise.
  for (int i = 0; i < 196; ++i)
    CHECK(std::abs(rep.visible_freq[i] - rep.visible_freq[195 - i]) < 0.03);
}

TEST_CASE("larger worker batches truncate to fewer visible tokens") {
  StrategyConfig sc;
  const auto small = mask_statistics(sc, 16, 100, 1);
  const auto large = mask_statistics(sc, 256, 100, 1);
  CHECK(large.visible_fraction.mean < small.visible_fraction.mean);
}

TEST_CASE("ablation strategies") {
  StrategyConfig sc;
  Rng rng(12);
  SUBCASE("uniform random") {
    sc.strategy = MaskStrategy::UniformRandom;
    const auto m = generate_strategy_mask(sc, rng);
    CHECK(m.visible.size() == 49);
    CHECK(m.regions.size() == 1);
    CHECK(m.regions[0].size() == 196 - 49);
  }
  SUBCASE("inverse block") {
    sc.strategy = MaskStrategy::InverseBlock;
    for (int i = 0; i < 50; ++i) {
      const auto m = generate_strategy_mask(sc, rng);
      const double area = static_cast<double>(m.visible.size());
      CHECK(std::abs(area - 49) <= std::max(1.0, 0.05 * 49));
      const int h = m.visible.back() / 14 - m.visible.front() / 14 + 1;
      const int w = static_cast<int>(m.visible.size()) / h;
      CHECK(is_rectangle(m.visible, 14, {h, w}));
      CHECK(m.regions[0].size() + m.visible.size() == 196);
    }
  }
  SUBCASE("cyclic block") {
    sc.strategy = MaskStrategy::CyclicBlock;
    for (int i = 0; i < 50; ++i) {
      const auto m = generate_strategy_mask(sc, rng);
      const double f = m.visible.size() / 196.0;
      CHECK(f >= 0.25 - 0.02);
      CHECK(f <= 0.35 + 0.02);
      CHECK(m.visible.size() % 4 == 0);  // whole 2x2 cells on a 14-grid
    }
  }
  SUBCASE("green noise is reported as unsupported") {
    sc.strategy = MaskStrategy::GreenNoise;
    try {
      generate_strategy_mask(sc, rng);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::UnsupportedStrategy);
    }
  }
}

TEST_CASE("invalid configs are rejected") {
  MaskConfig c;
  c.scale_min = 0.3;
  c.scale_max = 0.2;
  CHECK_THROWS_AS(c.validate(), Error);
  MaskConfig d;
  d.aspect_min = 0;
  CHECK_THROWS_AS(d.validate(), Error);
  CHECK_THROWS_AS(parse_mask_strategy("checkerboard"), Error);
}

TEST_CASE("adjacency rate") {
  MaskSet m;
  m.grid_h = m.grid_w = 3;
  m.visible = {0};
  m.regions = {{1, 8}};
  CHECK(adjacency_rate(m) == doctest::Approx(0.5));
}
