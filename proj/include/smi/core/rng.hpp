#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace smi {

using Rng = std::mt19937_64;

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t hash_tag(std::string_view tag) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Independent stream keyed by (seed, tag, index). Streams never depend on the
// order in which they are created, so per-fiber work can run in any order.
inline Rng make_stream(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0) {
    const std::uint64_t s = splitmix64(splitmix64(seed ^ hash_tag(tag)) + splitmix64(index + 0x632be59bd9b4e019ULL));
    std::seed_seq seq{static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(s >> 32)};
    return Rng(seq);
}

}  // namespace smi
