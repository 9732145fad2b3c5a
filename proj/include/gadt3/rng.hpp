#pragma once

#include <cstdint>
#include <random>

namespace gadt3 {

// Seeded random source with platform-independent distributions.
//
// std::mt19937_64 is fully specified by the standard, but the std::*_distribution
// adaptors are not, so draws are derived from raw engine output here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, bound). bound must be positive.
  std::uint64_t below(std::uint64_t bound);

  double normal();

  bool bernoulli(double p) { return uniform() < p; }

  // Derives an independent child stream; used to give each phase its own
  // sequence without coupling draw counts across phases.
  Rng fork(std::uint64_t salt);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace gadt3
