#pragma once

#include <cmath>
#include <cstdint>

namespace polarbev {

// xoshiro256** seeded via splitmix64. Self-contained so that fixed seeds
// produce identical streams on every platform/toolchain; std distributions
// are implementation-defined and would break golden fixtures.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& si : s_) si = splitmix64(x);
    has_gauss_ = false;
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // uniform in [0,1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, deterministic pair caching
  double gaussian() {
    if (has_gauss_) {
      has_gauss_ = false;
      return cached_;
    }
    double u1 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    has_gauss_ = true;
    return r * std::cos(a);
  }

  int64_t uniform_int(int64_t lo, int64_t hi_inclusive) {
    const uint64_t span = static_cast<uint64_t>(hi_inclusive - lo + 1);
    return lo + static_cast<int64_t>(next_u64() % span);
  }

 private:
  static uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

  uint64_t s_[4];
  double cached_ = 0.0;
  bool has_gauss_;
};

}  // namespace polarbev
