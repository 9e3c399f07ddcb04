#pragma once

#include <array>
#include <cstdint>

namespace bootleg {

/// splitmix64 finalizer. Constants are the published splitmix64 ones
/// (gamma 0x9e3779b97f4a7c15, multipliers 0xbf58476d1ce4e5b9 and
/// 0x94d049bb133111eb).
std::uint64_t splitmix64(std::uint64_t x);

/// Maps (global seed, epoch, index) to a per-item seed. Used with the sample
/// index for augmentations and with the global batch index for masks.
std::uint64_t derive_seed(std::uint64_t global_seed, std::uint64_t epoch,
                          std::uint64_t index);

/// Stream tags xored into the global seed so that mask, augmentation and
/// shuffle seeds never coincide for equal (epoch, index) pairs.
inline constexpr std::uint64_t kMaskStream = 0x6d61736b00000000ULL;     // "mask"
inline constexpr std::uint64_t kShuffleStream = 0x7368756600000000ULL;  // "shuf"
inline constexpr std::uint64_t kInitStream = 0x696e697400000000ULL;     // "init"
inline constexpr std::uint64_t kProbeStream = 0x70726f6200000000ULL;    // "prob"
inline constexpr std::uint64_t kDataStream = 0x6461746100000000ULL;     // "data"

/// xoshiro256** generator with portable derived distributions. Everything
/// here is bit-reproducible across platforms except normal(), which goes
/// through libm log/cos.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  double normal();
  /// Normal(0, stddev) rejected outside [-2 stddev, 2 stddev].
  double trunc_normal(double stddev);

  using State = std::array<std::uint64_t, 4>;
  State state() const { return s_; }
  void set_state(const State& s) { s_ = s; }

 private:
  State s_{};
};

}  // namespace bootleg
