#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace crossgen {

// Deterministic, platform-independent RNG (splitmix64 core). All stochastic
// draws in the project go through this; std:: distributions are avoided so
// that results are reproducible across standard library versions.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed * 0x9E3779B97F4A7C15ull + 0x2545F4914F6CDD1Dull) {}

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi] inclusive.
    int64_t randint(int64_t lo, int64_t hi) {
        return lo + int64_t(next_u64() % uint64_t(hi - lo + 1));
    }

    // Standard normal via Box-Muller, one value per call (no caching keeps
    // draw order independent of call sites).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(next_u64() % i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
};

// FNV-1a, used both for content checksums and for deriving independent seed
// streams from (seed, purpose, indices).
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xCBF29CE484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ull;
    }
    return h;
}

inline uint64_t hash_combine(uint64_t h, uint64_t v) {
    return fnv1a(&v, sizeof(v), h);
}

inline uint64_t hash_combine(uint64_t h, std::string_view s) {
    return fnv1a(s.data(), s.size(), h);
}

// Derives a child seed from a root seed, a purpose tag, and up to two
// indices. Keeps every consumer on its own stream so draw counts in one
// place never perturb another.
inline uint64_t derive_seed(uint64_t root, std::string_view purpose,
                            uint64_t a = 0, uint64_t b = 0) {
    uint64_t h = 0xCBF29CE484222325ull;
    h = hash_combine(h, root);
    h = hash_combine(h, purpose);
    h = hash_combine(h, a);
    h = hash_combine(h, b);
    return h;
}

}  // namespace crossgen
