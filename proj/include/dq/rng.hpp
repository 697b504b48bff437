#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "dq/common.hpp"

namespace dq {

// Deterministic RNG used everywhere. Gaussians come from an explicit
// Box-Muller transform rather than std::normal_distribution, whose output
// sequence is not pinned by the standard; this keeps artifacts reproducible
// across standard libraries.
struct Rng {
    std::mt19937_64 gen;
    bool has_spare = false;
    double spare = 0.0;

    explicit Rng(uint64_t seed) : gen(seed) {}

    uint64_t next_u64() { return gen(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(gen() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) {
        check(n > 0, "Rng::below requires n > 0");
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do {
            v = gen();
        } while (v >= limit);
        return v % n;
    }

    double normal() {
        if (has_spare) {
            has_spare = false;
            return spare;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare = r * std::sin(a);
        has_spare = true;
        return r * std::cos(a);
    }

    float normalf() { return static_cast<float>(normal()); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }
};

// splitmix64-style mixing for deriving independent child seeds from a base
// seed and a stream id, so parallel record/trajectory streams never overlap.
inline uint64_t mix_seed(uint64_t base, uint64_t stream) {
    uint64_t z = base + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace dq
