#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace smmini {

/// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t state = 0xcbf29ce484222325ULL) noexcept;

/// SplitMix64 finalizer; a good bijective mixer for counters and seeds.
std::uint64_t mix64(std::uint64_t x) noexcept;

/// Derives a child seed from a parent seed and a fixed label, so adding a new
/// consumer of randomness never shifts the streams of the existing ones.
std::uint64_t derive_seed(std::uint64_t parent, std::string_view label) noexcept;
std::uint64_t derive_seed(std::uint64_t parent, std::string_view label, std::uint64_t index) noexcept;

/// Uniform double in [0, 1) from a counter-style hash of (seed, a, b, c).
double hash_uniform(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) noexcept;

// std::mt19937_64 is bit-exact across standard libraries but the std
// distributions are not, so the few distributions we need live here.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    double uniform();

    /// Uniform integer in [0, bound) by rejection, bound > 0.
    std::uint64_t below(std::uint64_t bound);

    /// Standard normal via Box-Muller (no cached spare, so state is just the engine).
    double normal();

    template <class RandomIt>
    void shuffle(RandomIt first, RandomIt last) {
        const auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            const auto j = below(i);
            std::swap(first[i - 1], first[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace smmini
