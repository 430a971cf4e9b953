#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace dape {

// Deterministic RNG. All distributions are hand-rolled on top of
// std::mt19937_64 so that a seed produces the same stream on every
// platform (std:: distribution objects are implementation-defined).
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(mix(seed)), lineage_(mix(seed)) {}

    uint64_t next_u64() { return engine_(); }

    // [0, 1) with 53 bits of entropy
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [lo, hi] inclusive
    int uniform_int(int lo, int hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(engine_() % span);
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        if (have_spare_) {
            have_spare_ = false;
            return mean + stddev * spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return mean + stddev * r * std::cos(theta);
    }

    // n distinct values from [0, pool), ascending (selection sampling)
    std::vector<int> sample_without_replacement(int n, int pool) {
        std::vector<int> out;
        out.reserve(n);
        int needed = n;
        for (int v = 0; v < pool && needed > 0; ++v) {
            int remaining = pool - v;
            if (static_cast<int>(engine_() % static_cast<uint64_t>(remaining)) < needed) {
                out.push_back(v);
                --needed;
            }
        }
        return out;
    }

    // independent substream derived from this rng's seed lineage
    Rng fork(uint64_t stream) const { return Rng(lineage_ ^ mix(stream + 0x632be59bd9b4e019ULL)); }

    static uint64_t mix(uint64_t x) {
        // splitmix64 finalizer
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

private:
    std::mt19937_64 engine_;
    uint64_t lineage_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace dape
