#pragma once

#include <cstdint>
#include <cstring>

namespace mtp {

// Deterministic PRNG used everywhere instead of <random>: the standard
// distributions are implementation-defined, and every artifact we emit
// (datasets, weights, histories) must be reproducible bit-for-bit from a
// seed alone.
inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9E3779B97F4A7C15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0, 1)
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // uniform integer in [0, n)
    uint64_t next_below(uint64_t n) { return n ? next_u64() % n : 0; }

    bool bernoulli(double p) { return next_double() < p; }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t s_[4];
};

// FNV-1a, used for config hashing in checkpoint manifests.
inline uint64_t fnv1a64(const void* bytes, size_t len) {
    const unsigned char* p = static_cast<const unsigned char*>(bytes);
    uint64_t h = 0xCBF29CE484222325ull;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ull;
    }
    return h;
}

} // namespace mtp
