// Seeded, stream-splittable RNG used everywhere randomness is needed.
// splitmix64 core with hand-rolled transforms so that byte-identical
// output does not depend on the standard library's distribution code.
#pragma once

#include <cmath>
#include <cstdint>

namespace diffrate {

inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Key derivation for independent streams: mix(seed, tag0, tag1, ...).
inline uint64_t mix_keys(uint64_t a, uint64_t b) {
    uint64_t s = a ^ (0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2));
    return splitmix64(s);
}
inline uint64_t mix_keys(uint64_t a, uint64_t b, uint64_t c) {
    return mix_keys(mix_keys(a, b), c);
}
inline uint64_t mix_keys(uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
    return mix_keys(mix_keys(a, b, c), d);
}

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() { return splitmix64(state_); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive bounds
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(next_u64() % span);
    }

    // Box-Muller, cosine branch only so one draw consumes exactly two words.
    double normal() {
        double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    double gumbel() {
        double u = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
        return -std::log(-std::log(u));
    }

private:
    uint64_t state_;
};

}  // namespace diffrate
