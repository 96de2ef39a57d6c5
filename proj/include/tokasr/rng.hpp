#pragma once

#include <cmath>
#include <cstdint>

namespace tokasr {

// SplitMix64. Small state, identical output on every platform, which is
// what the reproducibility contracts need (std:: distributions are
// implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, n). Modulo bias is < n / 2^64, far below anything the
  // statistical tests can resolve at corpus scale.
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  int next_int(int n) { return static_cast<int>(next_below(static_cast<std::uint64_t>(n))); }

  // Uniform in [0, 1).
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  bool bernoulli(double p) { return next_double() < p; }

  // Standard normal via Box-Muller; draws a fresh pair per call so the
  // generator stays stateless beyond the counter.
  double normal() {
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

 private:
  std::uint64_t state_;
};

// Derives an independent stream seed from a base seed and one or more
// labels. Used so that e.g. (corpus seed, utterance index) or
// (train seed, epoch, step) each get their own generator.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t label) {
  Rng r(seed ^ (0x9e3779b97f4a7c15ULL * (label + 0x632be59bd9b4e019ULL)));
  return r.next_u64();
}

template <typename... Rest>
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t label, Rest... rest) {
  return mix_seed(mix_seed(seed, label), rest...);
}

}  // namespace tokasr
