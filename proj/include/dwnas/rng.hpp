#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace dwnas {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Deterministic RNG. Distribution transforms are hand-rolled so the stream
// does not depend on the standard library's implementation details.
class Rng {
   public:
    explicit Rng(uint64_t seed = 0) : gen_(seed), seed_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller, two draws per sample.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Standard Gumbel via inverse CDF; the uniform is clamped away from {0,1}.
    double gumbel() {
        double u = uniform();
        if (u < 1e-10) u = 1e-10;
        if (u > 1.0 - 1e-10) u = 1.0 - 1e-10;
        return -std::log(-std::log(u));
    }

    // Integer in [0, n).
    int64_t randint(int64_t n) { return static_cast<int64_t>(gen_() % static_cast<uint64_t>(n)); }

    template <typename Vec>
    void shuffle(Vec& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(randint(static_cast<int64_t>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent stream derived from this one's seed and a tag.
    Rng fork(uint64_t tag) const { return Rng(splitmix64(seed_ ^ splitmix64(tag))); }

    uint64_t seed() const { return seed_; }

   private:
    std::mt19937_64 gen_;
    uint64_t seed_;
};

}  // namespace dwnas
