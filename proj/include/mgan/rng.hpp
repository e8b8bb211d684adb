#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace mgan {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Seed for a named sub-stream of `root`, further keyed by integers such as
/// (client, round). Independent of evaluation order.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stream,
                                 std::initializer_list<std::uint64_t> keys = {}) {
  std::uint64_t h = splitmix64(root);
  for (char c : stream) h = splitmix64(h ^ static_cast<unsigned char>(c));
  for (auto k : keys) h = splitmix64(h ^ k);
  return h;
}

inline Rng make_rng(std::uint64_t root, std::string_view stream,
                    std::initializer_list<std::uint64_t> keys = {}) {
  return Rng(derive_seed(root, stream, keys));
}

inline float uniform(Rng& rng, float lo, float hi) {
  return std::uniform_real_distribution<float>(lo, hi)(rng);
}

inline float gaussian(Rng& rng, float mean = 0.0f, float stddev = 1.0f) {
  return std::normal_distribution<float>(mean, stddev)(rng);
}

}  // namespace mgan
