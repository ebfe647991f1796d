#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace tagnet {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; used to derive independent seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t hash_purpose(std::string_view purpose) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : purpose) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Derives a seed for one purpose (and optional item index) from a master seed,
/// so that separate random streams never share state.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose,
                                    std::uint64_t index = 0) {
    return mix64(mix64(master ^ hash_purpose(purpose)) + index);
}

inline Rng make_rng(std::uint64_t master, std::string_view purpose, std::uint64_t index = 0) {
    return Rng(derive_seed(master, purpose, index));
}

}  // namespace tagnet
