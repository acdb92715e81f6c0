#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace advpocket {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Seed for a stream identified by (master seed, tag, index...). Pure function of its arguments,
/// so per-input work is reproducible regardless of scheduling.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path) noexcept {
    std::uint64_t s = mix64(master);
    for (std::uint64_t p : path) s = mix64(s ^ mix64(p + 0x632be59bd9b4e019ULL));
    return s;
}

inline Rng make_rng(std::uint64_t master, std::initializer_list<std::uint64_t> path) {
    return Rng(derive_seed(master, path));
}

// Stream tags so that different consumers of the same input never share a stream.
namespace stream {
inline constexpr std::uint64_t c1_noise = 1;
inline constexpr std::uint64_t c2t_target = 2;
inline constexpr std::uint64_t attack = 3;
inline constexpr std::uint64_t pass_target = 4;
inline constexpr std::uint64_t dropout = 5;
inline constexpr std::uint64_t split = 6;
inline constexpr std::uint64_t init = 7;
inline constexpr std::uint64_t shuffle = 8;
}  // namespace stream

}  // namespace advpocket
