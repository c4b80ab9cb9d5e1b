#pragma once

// Deterministic random number plumbing.
//
// Per-pulse choices come from a counter-based hash of (seed, domain, index) so
// that any pulse can be regenerated in O(1) without replaying a stream. Bulk
// sampling (skip gaps, jitter, dark counts) uses std::mt19937_64, whose output
// sequence is fixed by the standard. All distribution transforms are written
// out here instead of using <random> distributions, which are not
// bit-reproducible across standard library implementations.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>

namespace qkd {

/// Stream domains keep independent consumers of the same run seed apart.
enum class Domain : std::uint64_t {
  SyncPattern = 0x53594e43,
  PulseState = 0x53544154,
  PulseIntensity = 0x494e5453,
  SignalBlock = 0x5349474e,
  DarkCount = 0x4441524b,
  Sifting = 0x53494654,
  GroundTruth = 0x54525554,
  SyncSeed = 0x53454544,
  Trial = 0x54524c53,
};

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t mix(std::uint64_t seed, Domain domain, std::uint64_t a = 0,
                            std::uint64_t b = 0) noexcept {
  std::uint64_t h = splitmix64(seed ^ 0x6a09e667f3bcc909ULL);
  h = splitmix64(h ^ static_cast<std::uint64_t>(domain));
  h = splitmix64(h ^ a);
  return splitmix64(h ^ (b + 0x3c6ef372fe94f82bULL));
}

/// Uniform double in [0, 1) from the top 53 bits.
constexpr double to_unit(std::uint64_t bits) noexcept {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t bits() { return engine_(); }

  /// [0, 1)
  double uniform() { return to_unit(engine_()); }

  /// (0, 1], safe for log().
  double uniform_open() { return 1.0 - uniform(); }

  bool bernoulli(double p) { return uniform() < p; }

  double exponential(double rate) { return -std::log(uniform_open()) / rate; }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double r = std::sqrt(-2.0 * std::log(uniform_open()));
    const double theta = 2.0 * std::numbers::pi * uniform();
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  /// Poisson by inversion; large means are split into chunks so exp() never
  /// underflows.
  std::uint64_t poisson(double mean) {
    constexpr double kChunk = 30.0;
    std::uint64_t total = 0;
    while (mean > kChunk) {
      total += poisson_small(kChunk);
      mean -= kChunk;
    }
    return total + poisson_small(mean);
  }

  /// Poisson conditioned on a nonzero outcome.
  std::uint64_t poisson_nonzero(double mean) {
    if (mean <= 0.0) return 1;
    const double p0 = std::exp(-mean);
    double u = uniform() * (1.0 - p0);
    double term = p0 * mean;
    std::uint64_t k = 1;
    while (u >= term && k < 10000) {
      u -= term;
      ++k;
      term *= mean / static_cast<double>(k);
    }
    return k;
  }

 private:
  std::uint64_t poisson_small(double mean) {
    if (mean <= 0.0) return 0;
    double u = uniform();
    double term = std::exp(-mean);
    std::uint64_t k = 0;
    while (u >= term && k < 10000) {
      u -= term;
      ++k;
      term *= mean / static_cast<double>(k);
    }
    return k;
  }

  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Poisson draw keyed purely by a hash value (used for test oracles that must
/// not depend on stream position).
inline std::uint64_t hashed_poisson(std::uint64_t key, double mean) {
  Rng rng(key);
  return rng.poisson(mean);
}

}  // namespace qkd
