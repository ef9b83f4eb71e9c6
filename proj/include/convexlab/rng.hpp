#pragma once

// Deterministic random numbers. SplitMix64 is used everywhere instead of the
// std distributions so that every run is bit-identical for a given seed,
// independent of the standard library implementation.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace convexlab {

class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53 usable bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform in [-scale, scale).
  double symmetric(double scale) { return uniform(-scale, scale); }

  std::size_t index(std::size_t n) {
    if (n == 0) throw std::invalid_argument("index: n must be positive");
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
  }

  // Inverse-CDF draw from a normalized mass vector.
  std::size_t categorical(std::span<const double> masses) {
    const double u = uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < masses.size(); ++i) {
      acc += masses[i];
      if (u < acc) return i;
    }
    return masses.size() - 1;
  }

 private:
  std::uint64_t state_;
};

// Independent stream for (master seed, stream index): feeds the scrambler a
// distinct state so parallel runs never share a sequence.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  SplitMix64 g(master ^ (0x9e3779b97f4a7c15ull * (stream + 1)));
  g.next_u64();
  return g.next_u64();
}

}  // namespace convexlab
