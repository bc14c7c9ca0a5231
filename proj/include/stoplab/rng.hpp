#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace stoplab {

// xoshiro256** seeded through splitmix64. Self-contained so that streams are
// bit-reproducible across platforms and standard library versions; nothing in
// the training or verification paths may depend on std::*_distribution.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) noexcept {
        std::uint64_t x = seed;
        for (auto& word : state_) {
            word = splitmix64(x);
        }
    }

    // Derives an independent stream from (seed, stream id, step index).
    // Streams keyed per step make checkpoint resume trivially bit-exact:
    // nothing about the generator has to be serialized.
    static Rng stream(std::uint64_t seed, std::uint64_t stream_id, std::uint64_t step = 0) noexcept {
        std::uint64_t x = seed;
        x = splitmix64(x) ^ (0x9e3779b97f4a7c15ull * (stream_id + 1));
        x = splitmix64(x) ^ (0xbf58476d1ce4e5b9ull * (step + 1));
        return Rng(splitmix64(x));
    }

    std::uint64_t next_u64() noexcept {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform() noexcept {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) noexcept {
        return lo + (hi - lo) * uniform();
    }

    // Standard normal via Box-Muller. No cached spare: every call consumes
    // exactly two uniforms, which keeps stream accounting simple.
    double gauss() noexcept {
        const double u1 = uniform();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log1p(-u1));
        return radius * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Uniform integer in [0, n), unbiased by rejection.
    int below(int n) noexcept {
        const std::uint64_t bound = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        std::uint64_t draw = next_u64();
        while (draw >= limit) {
            draw = next_u64();
        }
        return static_cast<int>(draw % bound);
    }

  private:
    static std::uint64_t splitmix64(std::uint64_t& x) noexcept {
        x += 0x9e3779b97f4a7c15ull;
        std::uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    static std::uint64_t rotl(std::uint64_t v, int k) noexcept {
        return (v << k) | (v >> (64 - k));
    }

    std::uint64_t state_[4];
};

// Stream ids used by the trainer; kept here so every module derives
// non-overlapping streams from one run seed.
namespace rng_stream {
inline constexpr std::uint64_t init = 1;    // parameter initialization
inline constexpr std::uint64_t data = 2;    // batch sampling + masks
inline constexpr std::uint64_t noise = 3;   // positional noise draws
inline constexpr std::uint64_t dataset = 4; // synthetic dataset generation
} // namespace rng_stream

} // namespace stoplab
