#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace vlmattack {

// std::mt19937_64 output is fixed by the standard; the distributions are not,
// so sampling goes through the helpers below to keep runs identical across
// standard libraries.
using Rng = std::mt19937_64;

// Uniform in [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

// Uniform integer in [0, n).
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  return static_cast<std::uint64_t>(uniform01(rng) * static_cast<double>(n)) % n;
}

inline bool bernoulli(Rng& rng, double p) { return uniform01(rng) < p; }

double standard_normal(Rng& rng);

// splitmix64 finalizer; used to derive independent child streams from a seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

}  // namespace vlmattack
