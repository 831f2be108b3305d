#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace trajcluster {

// Deterministic random number generation. All stochastic code in the toolkit
// draws from this engine so that a given seed produces the same stream on
// every platform: xoshiro256** for the raw bits, explicit conversions for the
// distributions (no std::<distribution>, whose algorithms are
// implementation-defined).
//
// Substreams are derived from a master seed plus one or two stream labels via
// the SplitMix64 finalizer, so that e.g. patient i or start s owns the same
// stream regardless of the order in which work is scheduled.

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t rotl(std::uint64_t x, int k) {
  return (x << k) | (x >> (64 - k));
}
}  // namespace detail

class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& s : state_) s = detail::splitmix64(sm);
  }

  // Independent substream labelled (a, b) under the same master seed.
  static Rng derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t sm = seed;
    std::uint64_t h = detail::splitmix64(sm);
    sm = h ^ (a * 0xD6E8FEB86659FD93ULL);
    h = detail::splitmix64(sm);
    sm = h ^ (b * 0xCA5A826395121157ULL);
    std::uint64_t mixed = detail::splitmix64(sm);
    return Rng(mixed);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = detail::rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = detail::rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n), rejection-free enough for our n (bias < 2^-53).
  std::size_t uniform_index(std::size_t n) {
    return static_cast<std::size_t>(uniform() * double(n)) % n;
  }

  // Standard normal via the Marsaglia polar method.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    have_spare_ = true;
    return u * f;
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  // N(mean, sd) conditioned on being >= lower, by rejection.
  double truncated_normal_below(double mean, double sd, double lower) {
    if (sd <= 0.0) return mean < lower ? lower : mean;
    for (int k = 0; k < 100000; ++k) {
      const double x = normal(mean, sd);
      if (x >= lower) return x;
    }
    throw std::runtime_error("truncated normal: acceptance region too small");
  }

  // Index drawn from the categorical distribution given by `probs`
  // (non-negative, summing to ~1; the final cell absorbs rounding).
  std::size_t categorical(const std::vector<double>& probs) {
    const double u = uniform();
    double cum = 0.0;
    for (std::size_t g = 0; g + 1 < probs.size(); ++g) {
      cum += probs[g];
      if (u < cum) return g;
    }
    return probs.size() - 1;
  }

 private:
  std::uint64_t state_[4] = {};
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace trajcluster
