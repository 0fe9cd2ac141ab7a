#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace lpvss {

/// SplitMix64 step. Used to derive independent stream seeds from a root
/// seed plus an index, so that e.g. every trajectory in a dataset gets its
/// own decorrelated generator regardless of how many came before it.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index) {
    std::uint64_t s = root;
    std::uint64_t a = splitmix64(s);
    s = root ^ (index * 0x9E3779B97F4A7C15ULL + 0xD1B54A32D192ED03ULL);
    std::uint64_t b = splitmix64(s);
    return a ^ (b + 0x8CB92BA72F3D8DD7ULL + (a << 6) + (a >> 2));
}

/// Deterministic RNG: mt19937_64 as the bit source, with hand-rolled
/// uniform / normal transforms. std::uniform_real_distribution and
/// std::normal_distribution are implementation-defined, so using them
/// would make datasets differ across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits (exactly representable grid).
    double uniform01() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Standard normal via Box-Muller. Caches the paired deviate.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        double u2 = uniform01();
        // guard against log(0)
        while (u1 <= 0.0) u1 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Integer in [0, n), n >= 1. Rejection-free modulo is fine here: n is
    /// tiny compared to 2^64, bias is ~n/2^64.
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace lpvss
