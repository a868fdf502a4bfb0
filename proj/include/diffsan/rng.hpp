#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace diffsan {

// Deterministic stream of pseudo-random values. All distribution transforms are
// implemented here rather than with std:: distributions, whose output is
// implementation-defined; a given (seed, call sequence) must yield identical
// bytes on every build.
class RngStream {
 public:
  explicit RngStream(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // uniform in [0, 1), 53-bit resolution
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // unbiased integer in [0, n)
  uint64_t uniform_below(uint64_t n);

  // standard normal via Box-Muller (cosine branch only; two uniforms per draw)
  double normal();

  float normal_f() { return static_cast<float>(normal()); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

// Named child seeds: every component draws from its own stream so that adding
// or reordering consumers elsewhere cannot shift its sequence.
uint64_t child_seed(uint64_t parent, std::string_view name);
uint64_t child_seed(uint64_t parent, uint64_t index);

}  // namespace diffsan
