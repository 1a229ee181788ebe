#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace ats {

// Deterministic RNG wrapper. All sampling goes through explicit helpers so
// that a given seed reproduces the same stream on every run, and independent
// substreams can be forked without coupling consumption order.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : seed_base_(seed), gen_(mix(seed)) {}

  uint64_t next_u64() { return gen_(); }

  // uniform in [0,1)
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller; one value per call keeps the stream
  // position independent of caller parity
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // uniform integer in [0, n)
  uint64_t integer(uint64_t n) {
    // rejection sampling avoids modulo bias
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x = gen_();
    while (x >= limit) x = gen_();
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // independent substream keyed by tag; forking does not advance this stream
  Rng fork(uint64_t tag) const {
    return Rng(mix(seed_base_ ^ mix(tag + 0x9e3779b97f4a7c15ULL)));
  }

 private:
  static uint64_t mix(uint64_t x) {
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  uint64_t seed_base_;
  std::mt19937_64 gen_;
};

}  // namespace ats
