#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace mergesim {

/// Derives a child seed from a parent seed and a salt string, SplitMix64 over
/// an FNV-1a hash of the salt. Used to give each subsystem (equipment draw,
/// channel drops, per-vehicle sensors, ...) an independent deterministic
/// stream from one run seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view salt,
                                 std::uint64_t index = 0) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : salt) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (h + index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

using RandomEngine = std::mt19937_64;

inline double draw_gaussian(RandomEngine& rng, double mean = 0.0, double stddev = 1.0) {
  std::normal_distribution<double> d(mean, stddev);
  return d(rng);
}

inline double draw_uniform(RandomEngine& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  return d(rng);
}

/// Unbiased bounded draw in [0, n), rejection sampled so the sequence depends
/// only on the engine, not on library distribution internals.
inline std::uint64_t draw_index(RandomEngine& rng, std::uint64_t n) {
  if (n == 0) return 0;
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t v;
  do {
    v = rng();
  } while (v >= limit);
  return v % n;
}

template <typename T>
void shuffle_in_place(std::vector<T>& items, RandomEngine& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(draw_index(rng, i));
    std::swap(items[i - 1], items[j]);
  }
}

} // namespace mergesim
