#pragma once
// Deterministic RNG. Streams are derived by hashing (seed, stream name,
// counter), so generation order never depends on call-site interleaving and
// any example/parameter can be regenerated in isolation.

#include <cstdint>
#include <cmath>
#include <string_view>

namespace gradsplit {

inline uint64_t splitmix64(uint64_t& s) {
    uint64_t z = (s += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t hash_combine(uint64_t h, uint64_t v) {
    h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    uint64_t s = h;
    return splitmix64(s);
}

inline uint64_t hash_str(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
    for (unsigned char c : s) { h ^= c; h *= 0x100000001b3ull; }
    return h;
}

class Rng {
  public:
    explicit Rng(uint64_t state) : state_(state) {}

    // Independent stream for (seed, purpose, counter).
    static Rng stream(uint64_t seed, std::string_view purpose, uint64_t counter = 0) {
        uint64_t h = hash_combine(seed, hash_str(purpose));
        h = hash_combine(h, counter);
        return Rng(h);
    }

    uint64_t next_u64() { return splitmix64(state_); }

    // Uniform in [0, 1). 53-bit mantissa; identical for float/double callers.
    double u01() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    int64_t uniform_int(int64_t n) { return int64_t(u01() * double(n)); }

    // Standard normal via Box-Muller (first deviate only: one call, two u01).
    double normal() {
        double u = u01(), v = u01();
        if (u < 1e-300) u = 1e-300;
        return std::sqrt(-2.0 * std::log(u)) * std::cos(6.283185307179586 * v);
    }

  private:
    uint64_t state_;
};

}  // namespace gradsplit
