#pragma once

#include <cmath>
#include <cstdint>
#include <string>

namespace patchcast {

// Deterministic, platform-independent random source. All stochastic code in
// the library draws through this class rather than <random> distributions,
// whose outputs differ between standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {
        // splitmix64 warmup so that small seeds do not produce small states
        next_u64();
        next_u64();
    }

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller; caches the second deviate
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 == 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Poisson draw; Knuth multiplication for small means, normal
    // approximation rounded and clamped for large ones.
    std::uint64_t poisson(double mean) {
        if (mean <= 0.0) return 0;
        if (mean < 30.0) {
            const double limit = std::exp(-mean);
            double prod = uniform();
            std::uint64_t k = 0;
            while (prod > limit) {
                prod *= uniform();
                ++k;
            }
            return k;
        }
        const double draw = std::round(normal(mean, std::sqrt(mean)));
        return draw < 0.0 ? 0 : static_cast<std::uint64_t>(draw);
    }

    std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

private:
    std::uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a over the run name mixed with the master seed. Every child seed in a
// multi-run experiment is derived this way so a single --seed reproduces the
// whole suite.
inline std::uint64_t derive_seed(std::uint64_t master, const std::string& name) {
    std::uint64_t h = 0xCBF29CE484222325ULL ^ master;
    for (unsigned char c : name) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    h ^= master >> 32;
    h *= 0x100000001B3ULL;
    return h;
}

}  // namespace patchcast
