#pragma once

#include <array>
#include <cstdint>

namespace udc {

/// Counter-based Philox4x32-10 stream. State is exactly three 64-bit
/// words (seed, stream id, draw counter), so streams are splittable by
/// stream id, replayable from any point, and serialization is the
/// canonical little-endian encoding of those words.
class Philox {
 public:
  Philox() : Philox(0, 0) {}
  Philox(uint64_t seed, uint64_t stream);

  uint32_t next_u32();
  uint64_t next_u64();

  /// Uniform in [0,1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Integer in [0, n).
  uint64_t uniform_index(uint64_t n);
  /// Standard normal via Box-Muller (two fresh uniforms per draw, no
  /// cached twin, so the state stays a pure counter).
  double normal();
  /// Standard Gumbel(0,1): -log(-log(u)), u clamped away from {0,1}.
  double gumbel();
  bool bernoulli(double p);

  uint64_t seed() const { return seed_; }
  uint64_t stream() const { return stream_; }
  uint64_t counter() const { return counter_; }

  std::array<uint64_t, 3> state() const { return {seed_, stream_, counter_}; }
  static Philox from_state(const std::array<uint64_t, 3>& s);

  /// Raw keyed block function (exposed for known-answer tests).
  static std::array<uint32_t, 4> block(std::array<uint32_t, 4> counter, std::array<uint32_t, 2> key);

 private:
  uint64_t seed_ = 0;
  uint64_t stream_ = 0;
  uint64_t counter_ = 0;  // number of u32 draws so far
  uint64_t cached_block_index_;
  std::array<uint32_t, 4> cached_block_{};
};

/// Stable 64-bit mix for deriving per-trial / per-purpose seeds.
uint64_t derive_seed(uint64_t seed, uint64_t salt);

}  // namespace udc
