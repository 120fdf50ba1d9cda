#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "cfdt/errors.hpp"

// Seeded randomness. Everything random in the pipeline flows through Rng and
// derive_seed so that a run is a pure function of its master seed. mt19937_64
// is fully specified by the standard; the distributions are hand-rolled
// because the std ones are implementation-defined.

namespace cfdt {

inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9E3779B97F4A7C15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Order-sensitive combine: mix_seed(a, b) != mix_seed(b, a) in general.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t s = a;
  uint64_t x = splitmix64(s);
  s = x ^ (b + 0x9E3779B97F4A7C15ull);
  return splitmix64(s);
}

// Named seed streams. Disjoint streams mean that e.g. counterfactual layout
// draws can never collide with target layout draws for the same master seed.
namespace seed_stream {
constexpr uint64_t kSourceLayout = 0x01;
constexpr uint64_t kCfLayout = 0x02;
constexpr uint64_t kTargetLayout = 0x03;
constexpr uint64_t kFactualRollout = 0x04;
constexpr uint64_t kCfRollout = 0x05;
constexpr uint64_t kAte = 0x06;
constexpr uint64_t kTrainInit = 0x07;
constexpr uint64_t kSampler = 0x08;
constexpr uint64_t kDropout = 0x09;
constexpr uint64_t kEval = 0x0A;
constexpr uint64_t kFailSafe = 0x0B;
}  // namespace seed_stream

inline uint64_t derive_seed(uint64_t master, uint64_t stream, uint64_t index = 0) {
  return mix_seed(mix_seed(master, stream), index);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n), unbiased via rejection.
  int below(int n) {
    if (n <= 0) throw UsageError("Rng::below: n must be positive");
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return static_cast<int>(x % un);
  }

  // Box-Muller without caching the spare: each call consumes exactly two
  // uniforms, which keeps draw counts predictable.
  double normal(double mean = 0.0, double stddev = 1.0) {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(6.283185307179586476925286766559 * u2);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace cfdt
