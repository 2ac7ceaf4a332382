#pragma once

#include <cmath>
#include <cstdint>

namespace vdyn {

/// Counter-based generator: every draw is a pure function of (seed, stream,
/// counter), so independently seeded consumers (per pair, per step) produce
/// identical values no matter how work is scheduled across threads.
class Rng {
public:
    explicit Rng(uint64_t seed, uint64_t stream = 0)
        : key_(mix(seed ^ mix(stream + 0x9e3779b97f4a7c15ULL))), counter_(0) {}

    uint64_t next_u64() { return mix(key_ + (++counter_) * 0x9e3779b97f4a7c15ULL); }

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    uint64_t uniform_index(uint64_t n) {
        // 128-bit multiply avoids modulo bias well below any tolerance we test.
        return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    /// Standard normal via Box-Muller (deterministic draw pairing).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Normal truncated to [lo, hi] by resampling.
    double truncated_normal(double mean, double stddev, double lo, double hi) {
        for (;;) {
            double v = normal(mean, stddev);
            if (v >= lo && v <= hi) return v;
        }
    }

private:
    static uint64_t mix(uint64_t x) {
        // splitmix64 finalizer
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    uint64_t key_;
    uint64_t counter_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace vdyn
