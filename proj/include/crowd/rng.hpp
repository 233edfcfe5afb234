#pragma once

#include <cmath>
#include <cstdint>

#include "crowd/errors.hpp"

namespace crowd {

inline std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Self-contained xoshiro256++ generator. Every stochastic operation in the
// project takes one of these explicitly; nothing draws from hidden global
// state, so runs are reproducible from the seed alone.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed) {
        std::uint64_t sm = seed;
        for (auto& s : s_) s = splitmix64(sm);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // [0,1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0,n) without modulo bias
    std::uint64_t uniform_index(std::uint64_t n) {
        if (n == 0) throw InvalidHyperparameter("uniform_index: n must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do { x = next_u64(); } while (x >= limit);
        return x % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Marsaglia polar method with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        has_spare_ = true;
        return u * m;
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Knuth product method, chunked so exp(-lambda) never underflows.
    long poisson(double lambda) {
        if (lambda < 0.0) throw InvalidHyperparameter("poisson: lambda must be >= 0");
        long n = 0;
        while (lambda > 0.0) {
            const double chunk = lambda > 500.0 ? 500.0 : lambda;
            const double threshold = std::exp(-chunk);
            double p = 1.0;
            long k = 0;
            do {
                ++k;
                p *= uniform();
            } while (p > threshold);
            n += k - 1;
            lambda -= chunk;
        }
        return n;
    }

    // Independent stream derived from the original seed, not the current state.
    Rng fork(std::uint64_t stream) const {
        std::uint64_t mix = seed_ ^ (0xd1b54a32d192ed03ull * (stream + 1));
        return Rng(splitmix64(mix));
    }

    std::uint64_t seed() const { return seed_; }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t seed_;
    std::uint64_t s_[4];
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace crowd
