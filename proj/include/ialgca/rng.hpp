#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace ialgca {

// Deterministic random source. mt19937_64 is fully specified by the standard;
// the distributions below are spelled out explicitly so that streams are
// bit-identical across standard library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t u64() { return eng_(); }

  // Uniform in [0,1) with 53 random bits.
  double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi] inclusive (Lemire multiply-shift).
  int uniform_int(int lo, int hi) {
    uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
    unsigned __int128 m = static_cast<unsigned __int128>(u64()) * range;
    return lo + static_cast<int>(m >> 64);
  }

  // Standard normal via Box-Muller; always consumes exactly two draws.
  double gauss() {
    double u1 = 1.0 - uniform();  // (0,1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  double gauss(double mean, double std) { return mean + std * gauss(); }

  // Derive an independent stream, e.g. per clip or per split.
  Rng fork(uint64_t salt) {
    uint64_t z = u64() + 0x9e3779b97f4a7c15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return Rng(z ^ (z >> 31));
  }

  // Fisher-Yates over indices [0,n); used for epoch shuffles.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      int j = uniform_int(0, i);
      std::swap(v[i], v[static_cast<size_t>(j)]);
    }
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace ialgca
