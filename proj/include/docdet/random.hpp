#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace docdet {

// Deterministic RNG. mt19937_64 is bit-exact across platforms; the
// distributions below are hand-rolled because the standard library's
// distribution objects are implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // uniform in [0, 1)
  double uniform() { return (eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [lo, hi] inclusive
  int uniform_int(int lo, int hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(eng_() % span);
  }

  // standard normal via Box-Muller (pair cached)
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Derive an independent stream from (seed, stream id) without sharing state.
  static Rng child(uint64_t seed, uint64_t stream) {
    return Rng(mix(mix(seed ^ 0x9e3779b97f4a7c15ull, stream), 0x2545f4914f6cdd1dull));
  }

 private:
  // splitmix64 finalizer
  static uint64_t mix(uint64_t x, uint64_t salt) {
    x += 0x9e3779b97f4a7c15ull + salt;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace docdet
