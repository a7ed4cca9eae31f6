#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace prognet {

// Deterministic PRNG (xoshiro256** seeded via splitmix64). The standard
// library distributions are implementation-defined, so all sampling is done
// here to keep runs byte-reproducible across toolchains.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) { reseed(seed); }

  void reseed(uint64_t seed) {
    uint64_t x = seed;
    for (auto& word : state_) word = splitmix64(x);
  }

  // Independent substream for (seed, stream, index), e.g. one per sample.
  static Rng substream(uint64_t seed, uint64_t stream, uint64_t index = 0) {
    uint64_t x = seed;
    uint64_t a = splitmix64(x);
    x ^= stream * 0x9e3779b97f4a7c15ULL;
    uint64_t b = splitmix64(x);
    x ^= index * 0xbf58476d1ce4e5b9ULL;
    Rng r;
    r.state_[0] = a;
    r.state_[1] = b;
    r.state_[2] = splitmix64(x);
    r.state_[3] = splitmix64(x);
    if ((r.state_[0] | r.state_[1] | r.state_[2] | r.state_[3]) == 0) r.state_[0] = 1;
    return r;
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform integer in [0, n) without modulo bias (Lemire reduction).
  uint64_t uniform_int(uint64_t n) {
    return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
  }

  bool bernoulli(double p) { return uniform01() < p; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform01() - 1.0;
      v = 2.0 * uniform01() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    has_spare_ = true;
    return u * m;
  }

  // Normal resampled until within two standard deviations.
  double truncated_normal(double sigma) {
    double z;
    do {
      z = normal();
    } while (std::abs(z) > 2.0);
    return z * sigma;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Index drawn from a discrete distribution (weights need not be normalized).
  int discrete(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    const double r = uniform01() * total;
    double cum = 0.0;
    for (size_t i = 0; i < weights.size(); ++i) {
      cum += weights[i];
      if (r < cum) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size()) - 1;
  }

  std::vector<uint64_t> save_state() const {
    return {state_[0], state_[1], state_[2], state_[3],
            has_spare_ ? 1ULL : 0ULL,
            spare_bits()};
  }

  void restore_state(const std::vector<uint64_t>& s) {
    if (s.size() != 6) return;
    for (int i = 0; i < 4; ++i) state_[i] = s[static_cast<size_t>(i)];
    has_spare_ = s[4] != 0;
    uint64_t bits = s[5];
    double d;
    static_assert(sizeof(d) == sizeof(bits));
    __builtin_memcpy(&d, &bits, sizeof(d));
    spare_ = d;
  }

 private:
  static uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t spare_bits() const {
    uint64_t bits;
    __builtin_memcpy(&bits, &spare_, sizeof(bits));
    return bits;
  }

  uint64_t state_[4] = {1, 2, 3, 4};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace prognet
