#pragma once
// Seeded randomness with named sub-streams. Every stochastic routine takes an
// explicit Rng (or derives one via child()), so a run is reproducible from its
// seed alone and independent sub-streams can be drawn in any order.
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace ckptdiff {

// splitmix64 finalizer; used to hash stream names and decorrelate seeds.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d4a2c62d13d6a3ull;
  return x ^ (x >> 31);
}

inline uint64_t hash_name(std::string_view s) {
  uint64_t h = 0x2545f4914f6cdd1dull;
  for (char c : s) h = mix64(h ^ (uint8_t)c);
  return h;
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed), seed_(seed) {}

  // Independent stream addressed by a name and up to two indices.
  Rng child(std::string_view name, uint64_t a = 0, uint64_t b = 0) const {
    uint64_t s = mix64(seed_ ^ hash_name(name));
    s = mix64(s ^ a);
    s = mix64(s ^ b);
    return Rng(s);
  }

  uint64_t seed() const { return seed_; }
  uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return (double)(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) {
    // Rejection sampling to avoid modulo bias.
    uint64_t lim = n * ((~0ull) / n);
    uint64_t v;
    do {
      v = next_u64();
    } while (v >= lim);
    return v % n;
  }

  // Standard normal via Box-Muller (the spare is cached).
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
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }
  double normal(double mean, double std) { return mean + std * normal(); }

  // Fisher-Yates; permutes v in place.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = (size_t)below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct values from [0, n) via Floyd's algorithm, in increasing order.
  std::vector<uint64_t> sample_without_replacement(uint64_t n, uint64_t k) {
    std::vector<uint64_t> out;
    out.reserve(k);
    for (uint64_t j = n - k; j < n; ++j) {
      uint64_t t = below(j + 1);
      bool seen = std::find(out.begin(), out.end(), t) != out.end();
      out.push_back(seen ? j : t);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  std::mt19937_64 eng_;
  uint64_t seed_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace ckptdiff
