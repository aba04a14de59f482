#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fedkei {

using Rng = std::mt19937_64;

// splitmix64 finalizer
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a list of tags.
/// Every random draw in the simulator goes through here so that a run is
/// fully determined by its base seed.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) noexcept {
  std::uint64_t h = mix64(base);
  for (auto t : tags) h = mix64(h ^ mix64(t + 0x632be59bd9b4e019ULL));
  return h;
}

/// Stream tags used with derive_seed.
namespace seed_tag {
inline constexpr std::uint64_t stream = 1;
inline constexpr std::uint64_t init = 2;
inline constexpr std::uint64_t inner = 3;
inline constexpr std::uint64_t actual_alpha = 4;
inline constexpr std::uint64_t finetune = 5;
inline constexpr std::uint64_t kmeans = 6;
inline constexpr std::uint64_t order = 7;
}  // namespace seed_tag

}  // namespace fedkei
