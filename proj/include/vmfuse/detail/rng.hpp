#pragma once

#include <cstdint>
#include <random>

namespace vmfuse {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; derives independent stream seeds from one root seed.
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream) {
    std::uint64_t z = root + 0x9E3779B97F4A7C15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline double gaussian(Rng& rng, double sd) {
    if (sd == 0.0) return 0.0;
    std::normal_distribution<double> dist(0.0, sd);
    return dist(rng);
}

inline double uniform(Rng& rng, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    return dist(rng);
}

}  // namespace vmfuse
