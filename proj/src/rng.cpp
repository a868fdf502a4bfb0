#include "diffsan/rng.hpp"

#include <cmath>

namespace diffsan {

uint64_t RngStream::uniform_below(uint64_t n) {
  if (n == 0) return 0;
  // rejection sampling on the top of the range to avoid modulo bias
  uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t x;
  do {
    x = gen_();
  } while (x >= limit);
  return x % n;
}

double RngStream::normal() {
  double u1 = uniform();
  double u2 = uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
}

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

uint64_t child_seed(uint64_t parent, std::string_view name) {
  return splitmix64(splitmix64(parent) ^ fnv1a(name));
}

uint64_t child_seed(uint64_t parent, uint64_t index) {
  return splitmix64(splitmix64(parent) ^ splitmix64(~index));
}

}  // namespace diffsan
