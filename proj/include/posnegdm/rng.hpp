#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace posnegdm {

// 64-bit FNV-1a, also used for checkpoint content hashes.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Deterministic xoshiro-style stream. Every consumer in the repo draws from a
// stream derived from (root seed, stream name), so enabling one consumer never
// perturbs another.
class RngStream {
public:
    RngStream() : RngStream(0, "default") {}

    RngStream(uint64_t root_seed, std::string_view name) {
        uint64_t h = fnv1a64(name.data(), name.size());
        uint64_t x = splitmix64(root_seed ^ h);
        for (auto& s : s_) {
            x = splitmix64(x);
            s = x;
        }
    }

    // Derive a child stream (e.g. per-trajectory) without advancing this one.
    RngStream child(uint64_t index) const {
        RngStream r;
        uint64_t x = splitmix64(s_[0] ^ splitmix64(index + 0x517cc1b727220a95ull));
        for (auto& s : r.s_) {
            x = splitmix64(x);
            s = x;
        }
        return r;
    }

    uint64_t next_u64() {
        // xoshiro256**
        uint64_t result = rotl(s_[1] * 5, 7) * 9;
        uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t uniform_int(uint64_t n) { return next_u64() % n; }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; draws exactly two uniforms per call.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
        return mean + stddev * z;
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t s_[4];
};

}  // namespace posnegdm
