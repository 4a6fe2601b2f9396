#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace nfuse {

// Deterministic 64-bit generator (splitmix64). All randomness in the
// project flows from one top-level seed through named substreams so that
// init / data / mask draws can be varied independently.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

private:
    std::uint64_t state_;
};

inline std::uint64_t hash_str(std::string_view s) {
    // FNV-1a
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Derive an independent substream seed from (seed, name) and optional counters.
inline std::uint64_t substream(std::uint64_t seed, std::string_view name,
                               std::uint64_t a = 0, std::uint64_t b = 0) {
    Rng mix(seed ^ hash_str(name));
    std::uint64_t s = mix.next_u64();
    s ^= a * 0x9e3779b97f4a7c15ULL;
    Rng mix2(s);
    s = mix2.next_u64() ^ (b * 0xbf58476d1ce4e5b9ULL);
    Rng mix3(s);
    return mix3.next_u64();
}

}  // namespace nfuse
