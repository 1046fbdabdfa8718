#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace spiga {

// Deterministic RNG used everywhere. The engine (mt19937_64) is pinned by the
// standard; the uniform/normal transforms are hand-rolled because the standard
// library distributions are implementation-defined, which would break the
// byte-identical reproducibility contract across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Box-Muller; one value per call keeps the stream layout obvious.
  double normal() {
    double u1 = uniform01();
    double u2 = uniform01();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  std::uint64_t uniform_index(std::uint64_t n) { return n ? engine_() % n : 0; }

  bool bernoulli(double p) { return uniform01() < p; }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

// SplitMix64 finalizer; used to derive independent substreams from
// (seed, index, tag) triples so parallel or per-sample generation stays
// deterministic no matter the visiting order.
inline std::uint64_t mix_seed(std::uint64_t a) {
  a += 0x9e3779b97f4a7c15ULL;
  a = (a ^ (a >> 30)) * 0xbf58476d1ce4e5b9ULL;
  a = (a ^ (a >> 27)) * 0x94d049bb133111ebULL;
  return a ^ (a >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index, std::uint64_t tag = 0) {
  return mix_seed(seed ^ mix_seed(index + 0x51ed2701ULL) ^ mix_seed(tag + 0xabcd1234ULL));
}

}  // namespace spiga
