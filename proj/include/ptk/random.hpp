#pragma once

// Portable pseudorandom primitives.
//
// Everything here is specified bit-for-bit so that streams agree across
// compilers and standard libraries (the <random> distributions do not).
// The base generator is SplitMix64: state advances by the golden-ratio
// increment 0x9E3779B97F4A7C15 and each output is the MurmurHash3-style
// finalizer of the new state.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace ptk::random {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Element `index` of the SplitMix64 stream started at `seed`.
constexpr std::uint64_t splitmix_at(std::uint64_t seed, std::uint64_t index) noexcept {
  return mix64(seed + (index + 1) * kGolden);
}

/// Folds a sequence of keys into one seed. Order matters.
constexpr std::uint64_t derive_seed(std::initializer_list<std::uint64_t> keys) noexcept {
  std::uint64_t h = 0x243F6A8885A308D3ULL;
  for (auto k : keys) h = mix64(h ^ mix64(k + kGolden));
  return h;
}

/// Top 53 bits mapped to [0, 1).
constexpr double to_unit(std::uint64_t bits) noexcept {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit constexpr SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

  constexpr std::uint64_t operator()() noexcept {
    state_ += kGolden;
    return mix64(state_);
  }

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return ~result_type{0}; }

  constexpr double uniform() noexcept { return to_unit((*this)()); }

  /// Unbiased integer in [0, bound) by rejection on the top of the range.
  constexpr std::uint64_t below(std::uint64_t bound) noexcept {
    const std::uint64_t limit = max() - max() % bound;
    std::uint64_t x = (*this)();
    while (x >= limit) x = (*this)();
    return x % bound;
  }

  /// Standard normal via Box-Muller (cosine branch only).
  double normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  constexpr std::uint64_t state() const noexcept { return state_; }

 private:
  std::uint64_t state_;
};

/// Keyed bijection on [0, n) built from a 4-round Feistel network over the
/// smallest even bit width covering n, with cycle walking for values >= n.
/// O(1) memory, so document orders of any size can be permuted lazily.
class FeistelPermutation {
 public:
  FeistelPermutation(std::uint64_t n, std::uint64_t key) noexcept : n_(n), key_(key) {
    unsigned bits = 2;
    while (bits < 64 && (std::uint64_t{1} << bits) < n) bits += 2;
    half_bits_ = bits / 2;
    half_mask_ = (std::uint64_t{1} << half_bits_) - 1;
  }

  std::uint64_t operator()(std::uint64_t x) const noexcept {
    do {
      x = encrypt(x);
    } while (x >= n_);
    return x;
  }

  std::uint64_t size() const noexcept { return n_; }

 private:
  std::uint64_t encrypt(std::uint64_t x) const noexcept {
    std::uint64_t left = x >> half_bits_;
    std::uint64_t right = x & half_mask_;
    for (std::uint64_t round = 0; round < 4; ++round) {
      const std::uint64_t f = mix64(right ^ derive_seed({key_, round})) & half_mask_;
      const std::uint64_t next = left ^ f;
      left = right;
      right = next;
    }
    return (left << half_bits_) | right;
  }

  std::uint64_t n_;
  std::uint64_t key_;
  unsigned half_bits_ = 1;
  std::uint64_t half_mask_ = 1;
};

}  // namespace ptk::random
