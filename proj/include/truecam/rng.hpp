#pragma once

#include <cstdint>
#include <vector>

namespace truecam {

/// pcg32 (O'Neill, XSH-RR output function) with a fixed stream constant.
/// The exact generator is part of the repo contract: a given seed yields the
/// same integer and uniform streams on every platform. normal() additionally
/// goes through libm (sqrt/log), so it is deterministic per platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed) {
        state_ = 0;
        inc_ = (kDefaultStream << 1u) | 1u;
        next_u32();
        state_ += seed;
        next_u32();
    }

    std::uint32_t next_u32() {
        const std::uint64_t old = state_;
        state_ = old * 6364136223846793005ULL + inc_;
        const std::uint32_t xorshifted =
            static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
        const std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
    }

    std::uint64_t next_u64() {
        const std::uint64_t hi = next_u32();
        const std::uint64_t lo = next_u32();
        return (hi << 32) | lo;
    }

    /// Uniform double in [0, 1) with 53-bit resolution.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via the Marsaglia polar method; one draw is cached.
    double normal();

    /// Uniform index in [0, n); rejection sampling, no modulo bias. n must be > 0.
    std::size_t uniform_index(std::size_t n);

    /// Fisher-Yates permutation of {0, ..., n-1}.
    std::vector<std::size_t> permutation(std::size_t n);

    std::uint64_t seed() const { return seed_; }

private:
    static constexpr std::uint64_t kDefaultStream = 0xda3e39cb94b95bdbULL;

    std::uint64_t seed_;
    std::uint64_t state_;
    std::uint64_t inc_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// splitmix64 finalizer; used to derive sub-seeds.
std::uint64_t splitmix64(std::uint64_t x);

/// Deterministically derives an independent seed for a tagged sub-task
/// (per-model seeds, per-restart seeds, ...).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag);

}  // namespace truecam
