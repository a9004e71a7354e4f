#pragma once

// Counter-based randomness. Every consumer of randomness asks for a substream
// keyed by (seed, tag, index...) so that results never depend on the order in
// which paths, edges or environments are processed.

#include <cmath>
#include <cstdint>
#include <limits>

namespace condsim {

// Finalizer of SplitMix64 (Stafford variant 13).
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t derive(std::uint64_t seed) noexcept { return seed; }

// derive(seed, a, b, ...) folds each key into the seed through the mixer.
template <class... Ks>
constexpr std::uint64_t derive(std::uint64_t seed, std::uint64_t key, Ks... rest) noexcept {
  const std::uint64_t folded = mix64(seed ^ mix64(key + 0x9e3779b97f4a7c15ULL));
  return derive(folded, static_cast<std::uint64_t>(rest)...);
}

// Stream tags. Values are part of the reproducibility contract: changing one
// changes every number produced downstream.
enum class Tag : std::uint64_t {
  EnvEdgeStatic = 0x11,
  EnvEdgeAnchor = 0x12,
  EnvEdgeForward = 0x13,
  EnvEdgeBackward = 0x14,
  EnvLevelAnchor = 0x15,
  EnvLevelForward = 0x16,
  EnvLevelBackward = 0x17,
  WalkPath = 0x21,
  WalkEnv = 0x22,
  DualPath = 0x31,
  DualEnv = 0x32,
  KernelProbe = 0x41,
  KernelEnv = 0x42,
  CorrectorEnv = 0x51,
  CorrectorProbe = 0x52,
  HarnessStage = 0x61,
  Replicate = 0x62,
};

constexpr std::uint64_t derive_tag(std::uint64_t seed, Tag tag, std::uint64_t index) noexcept {
  return derive(seed, static_cast<std::uint64_t>(tag), index);
}

// SplitMix64 stream. Satisfies UniformRandomBitGenerator so it can drive the
// standard distributions when an exact sampler is needed (Poisson, binomial).
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit constexpr Rng(std::uint64_t seed) noexcept : state_(seed) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  constexpr result_type operator()() noexcept {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix64(state_);
  }

  // Uniform on the open interval (0, 1).
  double uniform() noexcept {
    return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53;
  }

  // Exponential(1).
  double exponential() noexcept { return -std::log(uniform()); }

  // +1 or -1 with probability 1/2 each.
  int sign() noexcept { return ((*this)() >> 63) ? 1 : -1; }

  // Uniform on {0, ..., n-1} (multiply-shift; bias below 2^-64 * n).
  std::uint64_t below(std::uint64_t n) noexcept {
    __extension__ using u128 = unsigned __int128;
    return static_cast<std::uint64_t>((static_cast<u128>((*this)()) * n) >> 64);
  }

 private:
  std::uint64_t state_;
};

}  // namespace condsim
