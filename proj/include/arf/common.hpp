#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace arf {

// Error for malformed or unreadable files (weight files, checkpoints, datasets).
struct LoadError : std::runtime_error {
  explicit LoadError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void check_arg(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline void check_state(bool cond, const std::string& msg) {
  if (!cond) throw std::logic_error(msg);
}

// Deterministic 64-bit RNG (splitmix64). Used for all stochastic parts of the
// library so results are reproducible across platforms and standard libraries.
struct SplitMix64 {
  uint64_t state;

  explicit SplitMix64(uint64_t seed) : state(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

  float next_float() { return float(next_u64() >> 40) * 0x1.0p-24f; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  uint64_t next_below(uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller.
  double gaussian() {
    double u1 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  template <typename Vec>
  void shuffle(Vec& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = size_t(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }
};

}  // namespace arf
