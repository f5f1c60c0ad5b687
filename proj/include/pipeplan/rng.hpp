// Copyright 2026 The pipeplan Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace pipeplan {

// Counter-based sampling: every draw is a pure function of (seed, key), so
// results never depend on the order in which events are processed.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_key(std::uint64_t seed, std::initializer_list<std::uint64_t> key) {
  std::uint64_t h = splitmix64(seed);
  for (auto k : key) h = splitmix64(h ^ k);
  return h;
}

/// Uniform in (0, 1).
inline double unit_uniform(std::uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

/// Standard normal draw via Box-Muller.
inline double standard_normal(std::uint64_t seed, std::initializer_list<std::uint64_t> key) {
  const std::uint64_t h = hash_key(seed, key);
  const double u1 = unit_uniform(h);
  const double u2 = unit_uniform(splitmix64(h));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace pipeplan
