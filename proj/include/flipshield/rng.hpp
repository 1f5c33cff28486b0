#ifndef FLIPSHIELD_RNG_HPP
#define FLIPSHIELD_RNG_HPP

#include <cstdint>

namespace flipshield {

/// Deterministic pseudo-random stream (SplitMix64, Steele et al.).
///
/// The generator is part of the reproducibility contract: the same seed
/// produces the same draw sequence on every platform, and every derived
/// quantity (uniform floats, bounded integers, forked streams) is defined
/// purely in terms of integer arithmetic plus one float multiply, so
/// campaign schedules and weight initializations are bit-stable.
/// Algorithm version: 1 (do not change the constants without bumping it).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    /// Next 64 bits of the stream.
    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint32_t next_u32() { return static_cast<std::uint32_t>(next_u64() >> 32); }

    /// Uniform in [0, 1) with 24 bits of resolution (exact in binary32).
    float uniform01() {
        return static_cast<float>(next_u64() >> 40) * 0x1p-24f;
    }

    /// Uniform in [lo, hi).
    float uniform(float lo, float hi) { return lo + uniform01() * (hi - lo); }

    /// Uniform index in [0, n). Modulo reduction: bias is < n / 2^64 and the
    /// draw sequence stays platform-independent.
    std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

    /// Independent child stream identified by `stream_id`.
    Rng fork(std::uint64_t stream_id) {
        return Rng(mix(state_ ^ 0x6A09E667F3BCC909ULL, stream_id));
    }

    /// Stateless combine of two 64-bit values into a derived seed.
    static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
        std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t state_;
};

} // namespace flipshield

#endif // FLIPSHIELD_RNG_HPP
