// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace distscale {

/// splitmix64; used to expand one user-facing seed into independent stream
/// seeds and to initialize the main generator state.
inline std::uint64_t splitmix64_next(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

/// Deterministic random stream (xoshiro256**). Self-contained so that
/// sequences are identical across standard libraries and platforms.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& word : state_) word = splitmix64_next(sm);
        has_spare_normal_ = false;
    }

    std::uint64_t next_u64() {
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

    /// Uniform double in [0, 1) with 53 random bits.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform integer in [lo, hi], inclusive. Unbiased via rejection.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        if (lo > hi) throw std::invalid_argument("uniform_int: empty range");
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        if (span == 0) return static_cast<std::int64_t>(next_u64());  // full 64-bit range
        const int bits = std::bit_width(span - 1 == 0 ? std::uint64_t{1} : span - 1);
        std::uint64_t r;
        do {
            r = next_u64() >> (64 - (bits == 0 ? 1 : bits));
        } while (r >= span);
        return lo + static_cast<std::int64_t>(r);
    }

    /// Standard normal via Box-Muller; spare value cached.
    double normal() {
        if (has_spare_normal_) {
            has_spare_normal_ = false;
            return spare_normal_;
        }
        double u1 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        const double u2 = next_double();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * 3.14159265358979323846 * u2;
        spare_normal_ = radius * std::sin(angle);
        has_spare_normal_ = true;
        return radius * std::cos(angle);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t state_[4];
    bool has_spare_normal_;
    double spare_normal_ = 0.0;
};

/// One run seed derives two independent streams, one for initialization and
/// one for data order. Documented split: the first two splitmix64 outputs of
/// the run seed, in this order.
struct SeedStreams {
    std::uint64_t init_seed;
    std::uint64_t data_seed;
};

inline SeedStreams split_seed(std::uint64_t run_seed) {
    std::uint64_t sm = run_seed;
    SeedStreams s{};
    s.init_seed = splitmix64_next(sm);
    s.data_seed = splitmix64_next(sm);
    return s;
}

}  // namespace distscale
