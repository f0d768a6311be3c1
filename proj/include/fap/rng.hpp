#pragma once

#include <cstdint>
#include <cmath>

namespace fap {

// Deterministic RNG used everywhere. Distributions are hand-rolled on top of
// splitmix64/xoshiro-style mixing so that streams are reproducible independent
// of the standard library implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {
        // avoid the all-zero fixed point and decorrelate close seeds
        next();
        next();
    }

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0,1)
    double u01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // uniform in [lo,hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

    // uniform integer in [0,n)
    std::uint64_t below(std::uint64_t n) { return next() % n; }

    // standard normal via Box-Muller (one value per call, cached pair)
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = u01(), u2 = u01();
        while (u1 <= 1e-300) u1 = u01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // derived independent stream; tag keeps sibling streams apart
    Rng child(std::uint64_t tag) const {
        std::uint64_t z = state_ ^ (0x632be59bd9b4e019ULL * (tag + 1));
        return Rng(z);
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace fap
