#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace brainmt {

// Deterministic RNG. Normal variates use Box-Muller on top of mt19937_64
// uniforms instead of std::normal_distribution, whose algorithm is
// implementation-defined; this keeps generated datasets identical across
// standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // [0, 1)
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive range via rejection-free Lemire-style reduction is overkill
  // here; modulo bias at 64 bits is negligible but we reject to stay exact.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t v;
    do {
      v = eng_();
    } while (v >= limit);
    return lo + static_cast<int64_t>(v % span);
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  // Resampled truncation at +/- 2 sigma.
  double trunc_normal(double sigma) {
    double v;
    do {
      v = normal();
    } while (std::abs(v) > 2.0);
    return v * sigma;
  }

  // Derive independent streams from a base seed (splitmix64 finalizer).
  static uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace brainmt
