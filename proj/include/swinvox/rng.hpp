#pragma once

#include <cmath>
#include <cstdint>

namespace swinvox {

/// Deterministic counter-free PRNG (xoshiro256**). Distributions are
/// implemented by hand so that streams are identical across platforms and
/// standard-library versions.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        // splitmix64 expansion of the seed into the xoshiro state
        uint64_t x = seed;
        for (auto& word : s_) {
            x += 0x9E3779B97F4A7C15ULL;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
            z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
            word = z ^ (z >> 31);
        }
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi] inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(next_u64() % span);
    }

    /// Standard normal via Box-Muller (pairs cached).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    /// Normal(0, std) truncated to +/- 2 std, by rejection.
    double trunc_normal(double stddev) {
        double z = normal();
        while (z < -2.0 || z > 2.0) z = normal();
        return z * stddev;
    }

    /// Derived independent stream; children of distinct keys never collide
    /// with the parent or each other in practice.
    Rng split(uint64_t key) const {
        uint64_t h = s_[0] ^ rotl(s_[3], 13);
        h ^= key + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
        return Rng(h);
    }

    template <typename It>
    void shuffle(It first, It last) {
        auto n = last - first;
        for (decltype(n) i = n - 1; i > 0; --i) {
            auto j = uniform_int(0, i);
            std::swap(first[i], first[j]);
        }
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t s_[4];
    double spare_ = 0.0;
    bool have_spare_ = false;
};

/// Stream key for (step, sample, role) draws; keeps augmentation independent
/// of batch-evaluation order.
inline uint64_t stream_key(uint64_t step, uint64_t sample, uint64_t role) {
    return (step << 24) ^ (sample << 8) ^ role;
}

}  // namespace swinvox
