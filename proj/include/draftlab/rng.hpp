#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace draftlab {

// Counter-based splittable RNG. Every draw is a pure function of
// (run seed, purpose tag, step, index), so checkpoint replay and
// cross-run determinism hold without any generator state.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed) {}

    uint64_t seed() const { return seed_; }

    static uint64_t hash_tag(std::string_view tag) {
        // FNV-1a
        uint64_t h = 1469598103934665603ull;
        for (char c : tag) {
            h ^= static_cast<uint8_t>(c);
            h *= 1099511628211ull;
        }
        return h;
    }

    uint64_t bits(uint64_t tag, uint64_t step, uint64_t index) const {
        uint64_t x = seed_;
        x = mix(x ^ rotl(tag, 17));
        x = mix(x ^ rotl(step, 31));
        x = mix(x ^ index);
        return mix(x);
    }

    // Uniform in [0, 1).
    double uniform(uint64_t tag, uint64_t step, uint64_t index) const {
        return static_cast<double>(bits(tag, step, index) >> 11) * 0x1.0p-53;
    }

    // Integer uniform in [lo, hi] inclusive.
    int64_t randint(uint64_t tag, uint64_t step, uint64_t index, int64_t lo, int64_t hi) const {
        uint64_t span = static_cast<uint64_t>(hi - lo + 1);
        return lo + static_cast<int64_t>(bits(tag, step, index) % span);
    }

    // Standard normal via Box-Muller; each index consumes its own counter pair.
    double normal(uint64_t tag, uint64_t step, uint64_t index) const {
        double u1 = uniform(tag, step, 2 * index);
        double u2 = uniform(tag, step, 2 * index + 1);
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        constexpr double two_pi = 6.283185307179586476925286766559;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

    template <class T>
    void fill_normal(std::vector<T>& out, uint64_t tag, uint64_t step, uint64_t base_index = 0) const {
        for (size_t i = 0; i < out.size(); ++i)
            out[i] = static_cast<T>(normal(tag, step, base_index + i));
    }

    template <class T>
    void fill_uniform(std::vector<T>& out, uint64_t tag, uint64_t step, double lo, double hi,
                      uint64_t base_index = 0) const {
        for (size_t i = 0; i < out.size(); ++i)
            out[i] = static_cast<T>(lo + (hi - lo) * uniform(tag, step, base_index + i));
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    // splitmix64 finalizer
    static uint64_t mix(uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    uint64_t seed_;
};

}  // namespace draftlab
