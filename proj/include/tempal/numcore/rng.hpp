#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string_view>

namespace tempal {

/// Counter-based generator: output i is a SplitMix64 finalizer of key + i·φ.
///
/// The full state is (key, counter), which makes streams cheap to split,
/// compare, and persist exactly. Satisfies UniformRandomBitGenerator.
class Rng {
 public:
  using result_type = std::uint64_t;

  Rng() = default;
  explicit Rng(std::uint64_t key, std::uint64_t counter = 0) : key_(key), counter_(counter) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return mix(key_ + (counter_++) * kGolden); }

  /// Independent child stream; does not advance this stream.
  Rng split(std::string_view tag, std::uint64_t index = 0) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the tag
    for (unsigned char ch : tag) h = (h ^ ch) * 0x100000001b3ULL;
    return Rng(mix(key_ ^ mix(h + index * kGolden)));
  }

  /// Uniform in [0, 1) with 53 bits (double) or 24 bits (float).
  template <typename Real = double>
  Real uniform() {
    if constexpr (sizeof(Real) <= 4) {
      return static_cast<Real>((*this)() >> 40) * Real(0x1.0p-24);
    } else {
      return static_cast<Real>((*this)() >> 11) * Real(0x1.0p-53);
    }
  }

  /// Uniform integer in [lo, hi] (inclusive), Lemire's nearly-divisionless method.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
    if (range == 0) return static_cast<std::int64_t>((*this)());
    __uint128_t m = static_cast<__uint128_t>((*this)()) * range;
    std::uint64_t low = static_cast<std::uint64_t>(m);
    if (low < range) {
      const std::uint64_t threshold = (0 - range) % range;
      while (low < threshold) {
        m = static_cast<__uint128_t>((*this)()) * range;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return lo + static_cast<std::int64_t>(m >> 64);
  }

  bool bernoulli(double p) { return uniform<double>() < p; }

  /// Standard normal via Box-Muller (no cached second value, so state stays (key, counter)).
  double normal() {
    double u1 = uniform<double>();
    while (u1 <= 0.0) u1 = uniform<double>();
    const double u2 = uniform<double>();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_ = 0x853c49e6748fea9bULL;
  std::uint64_t counter_ = 0;
};

}  // namespace tempal
