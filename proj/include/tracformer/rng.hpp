#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "tracformer/error.hpp"

namespace tracformer {

// splitmix64; used to derive independent substreams from (seed, step, index)
// so results do not depend on thread scheduling.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b = 0) {
  return splitmix64(splitmix64(seed ^ splitmix64(a)) ^ splitmix64(b ^ 0xa5a5a5a5a5a5a5a5ULL));
}

// Thin wrapper around mt19937_64 with explicitly coded distributions, so
// sampled values are a pure function of the seed (std:: distributions are
// implementation-defined).
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // uniform in [0, 1)
  double uniform() {
    return (engine_() >> 11) * (1.0 / 9007199254740992.0);  // 53-bit mantissa
  }

  // uniform integer in [0, n)
  int64_t uniform_int(int64_t n) {
    if (n <= 0) throw DomainError("uniform_int: n must be positive");
    // rejection sampling to avoid modulo bias
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t v;
    do {
      v = engine_();
    } while (v >= limit);
    return static_cast<int64_t>(v % un);
  }

  // standard normal via Box-Muller (no cached spare: keeps the stream
  // position a simple function of the call count)
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Geometric on {1, 2, ...} with mean mu: P(k) = (1/mu) (1 - 1/mu)^(k-1).
  int64_t geometric(double mu) {
    if (mu < 1.0) throw DomainError("geometric: mean must be >= 1");
    if (mu == 1.0) return 1;
    const double q = 1.0 - 1.0 / mu;
    const double u = uniform();
    // smallest k >= 1 with CDF(k) = 1 - q^k >= u
    const double k = std::ceil(std::log1p(-u) / std::log(q));
    return k < 1.0 ? 1 : static_cast<int64_t>(k);
  }

  // Discretized logistic: continuous logistic(mu, sigma) rounded to the
  // nearest integer, resampled until >= 1.
  int64_t dlogistic(double mu, double sigma) {
    if (sigma <= 0.0) throw DomainError("dlogistic: sigma must be positive");
    for (int attempt = 0; attempt < 100000; ++attempt) {
      double u = uniform();
      while (u <= 0.0 || u >= 1.0) u = uniform();
      const double x = mu + sigma * std::log(u / (1.0 - u));
      const long long k = std::llround(x);
      if (k >= 1) return k;
    }
    throw SamplingError("dlogistic: resample budget exhausted (mu too small?)");
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace tracformer
