#pragma once

#include <cstdint>
#include <random>

namespace latgen {

// Seedable RNG with cheap derived streams. Training code never shares one
// engine across items: each item/step derives its own stream via split(), so
// results do not depend on execution order.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed), base_seed_(seed) {}

    // splitmix64 finalizer; mixes a stream id into a seed.
    static uint64_t derive(uint64_t seed, uint64_t stream) {
        uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    Rng split(uint64_t stream) const { return Rng(derive(base_seed_, stream)); }

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }
    double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
    // integer in [0, n)
    int64_t uniform_int(int64_t n) {
        return std::uniform_int_distribution<int64_t>(0, n - 1)(engine_);
    }
    bool bernoulli(double p) { return uniform() < p; }
    uint64_t bits() { return engine_(); }

private:
    std::mt19937_64 engine_;
    uint64_t base_seed_;
};

} // namespace latgen
