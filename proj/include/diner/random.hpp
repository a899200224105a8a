#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace diner {

using Rng = std::mt19937_64;

// Stable 64-bit FNV-1a; used wherever a name or token must map to a fixed number.
constexpr std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Named substream of a run seed ("corpus", "init", "dropout", "shuffle").
inline Rng substream(std::uint64_t seed, std::string_view name) {
  return Rng(splitmix64(seed ^ fnv1a(name)));
}

// Uniform double in [lo, hi) built from raw engine bits, so values do not
// depend on the standard library's distribution implementation.
inline double uniform(Rng& rng, double lo, double hi) {
  const double unit = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * unit;
}

inline bool bernoulli(Rng& rng, double p) { return uniform(rng, 0.0, 1.0) < p; }

// Uniform integer in [0, n); n must be positive.
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform(rng, 0.0, static_cast<double>(n)));
}

template <typename It>
void shuffle(It first, It last, Rng& rng) {
  const auto n = static_cast<std::size_t>(last - first);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = uniform_index(rng, i);
    std::swap(first[i - 1], first[j]);
  }
}

}  // namespace diner
