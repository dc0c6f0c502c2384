#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "lmdet/error.hpp"

namespace lmdet {

inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// xoshiro256** seeded through splitmix64. All randomness in the project goes
// through this so runs are bit-reproducible per seed; parallel work derives
// independent streams with fork().
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed) {
    uint64_t sm = seed;
    for (auto& s : s_) s = splitmix64(sm);
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

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    // Box-Muller; consumes two uniforms per call, no cached spare.
    double u1 = uniform(), u2 = uniform();
    double r = std::sqrt(-2.0 * std::log1p(-u1));
    return r * std::cos(6.283185307179586477 * u2);
  }

  int64_t randint(int64_t n) {
    require(n > 0, "randint: n must be positive");
    return int64_t(next_u64() % uint64_t(n));
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <class T>
  const T& choice(const std::vector<T>& v) {
    require(!v.empty(), "choice: empty pool");
    return v[size_t(randint(int64_t(v.size())))];
  }

  // Independent stream derived from the base seed and a stream id.
  Rng fork(uint64_t stream) const {
    uint64_t sm = stream * 0xda942042e4dd58b5ULL + 0x2545f4914f6cdd1dULL;
    return Rng(seed_ ^ splitmix64(sm));
  }

  uint64_t seed() const { return seed_; }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  uint64_t seed_;
  uint64_t s_[4];
};

}  // namespace lmdet
