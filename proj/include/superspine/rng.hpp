#pragma once

// Per-replicate random streams. A stream is a pure function of
// (master seed, replicate index, purpose tag), so results do not depend on
// how replicates are scheduled across workers.

#include <cstdint>
#include <cmath>
#include <random>

namespace superspine {

using Rng = std::mt19937_64;

namespace stream_tag {
inline constexpr std::uint64_t particles = 1;
inline constexpr std::uint64_t spine = 2;
inline constexpr std::uint64_t marks = 3;
inline constexpr std::uint64_t switched = 4;
inline constexpr std::uint64_t nlfk = 5;
inline constexpr std::uint64_t decomposition = 6;
inline constexpr std::uint64_t flatness = 7;
}  // namespace stream_tag

inline Rng make_stream(std::uint64_t master_seed, std::uint64_t replicate, std::uint64_t tag = 0) {
  auto lo = [](std::uint64_t v) { return static_cast<std::uint32_t>(v & 0xffffffffu); };
  auto hi = [](std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); };
  std::seed_seq seq{lo(master_seed), hi(master_seed), lo(replicate), hi(replicate), lo(tag), hi(tag)};
  return Rng(seq);
}

/// Uniform on the open interval (0, 1).
inline double uniform_open(Rng& rng) {
  // 53 random bits, shifted off zero.
  return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

inline double exponential(Rng& rng, double rate) { return -std::log(uniform_open(rng)) / rate; }

}  // namespace superspine
