#include "udc/rng.hpp"

#include <cmath>

namespace udc {

namespace {

constexpr uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr uint32_t kPhiloxW0 = 0x9E3779B9u;
constexpr uint32_t kPhiloxW1 = 0xBB67AE85u;

inline void mulhilo(uint32_t a, uint32_t b, uint32_t& hi, uint32_t& lo) {
  uint64_t p = static_cast<uint64_t>(a) * b;
  hi = static_cast<uint32_t>(p >> 32);
  lo = static_cast<uint32_t>(p);
}

}  // namespace

std::array<uint32_t, 4> Philox::block(std::array<uint32_t, 4> c, std::array<uint32_t, 2> k) {
  for (int round = 0; round < 10; ++round) {
    uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kPhiloxM0, c[0], hi0, lo0);
    mulhilo(kPhiloxM1, c[2], hi1, lo1);
    c = {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
    k[0] += kPhiloxW0;
    k[1] += kPhiloxW1;
  }
  return c;
}

Philox::Philox(uint64_t seed, uint64_t stream)
    : seed_(seed), stream_(stream), cached_block_index_(~0ull) {}

uint32_t Philox::next_u32() {
  uint64_t block_index = counter_ >> 2;
  if (block_index != cached_block_index_) {
    std::array<uint32_t, 4> ctr = {static_cast<uint32_t>(block_index), static_cast<uint32_t>(block_index >> 32),
                                   static_cast<uint32_t>(stream_), static_cast<uint32_t>(stream_ >> 32)};
    std::array<uint32_t, 2> key = {static_cast<uint32_t>(seed_), static_cast<uint32_t>(seed_ >> 32)};
    cached_block_ = block(ctr, key);
    cached_block_index_ = block_index;
  }
  return cached_block_[counter_++ & 3];
}

uint64_t Philox::next_u64() {
  uint64_t lo = next_u32();
  uint64_t hi = next_u32();
  return (hi << 32) | lo;
}

double Philox::uniform() {
  // 53-bit mantissa
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Philox::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

uint64_t Philox::uniform_index(uint64_t n) {
  if (n == 0) return 0;
  return static_cast<uint64_t>(uniform() * static_cast<double>(n)) % n;
}

double Philox::normal() {
  double u1 = uniform();
  double u2 = uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double Philox::gumbel() {
  double u = uniform();
  if (u < 1e-300) u = 1e-300;
  if (u > 1.0 - 1e-16) u = 1.0 - 1e-16;
  return -std::log(-std::log(u));
}

bool Philox::bernoulli(double p) { return uniform() < p; }

Philox Philox::from_state(const std::array<uint64_t, 3>& s) {
  Philox g(s[0], s[1]);
  g.counter_ = s[2];
  return g;
}

uint64_t derive_seed(uint64_t seed, uint64_t salt) {
  // splitmix64 finalizer over the pair
  uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace udc
