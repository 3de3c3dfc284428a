#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace peclr {

// Counter-free splitmix64 generator. Chosen over std::mt19937 because the
// whole state is one u64: checkpointing and named sub-stream derivation stay
// trivial and platform-independent.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform01() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + uniform01() * (hi - lo); }

    // Unbiased-enough bounded draw (Lemire multiply-shift).
    std::uint64_t below(std::uint64_t n) {
        return std::uint64_t((static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    // Box-Muller; the second variate is discarded so the stream position is a
    // pure function of call count.
    double normal(double mean = 0.0, double sd = 1.0) {
        double u1 = uniform01();
        double u2 = uniform01();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        double r = std::sqrt(-2.0 * std::log(u1));
        return mean + sd * r * std::cos(2.0 * std::numbers::pi * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t state() const { return state_; }
    void set_state(std::uint64_t s) { state_ = s; }

    // Derived stream keyed on (root seed, name, index). Independent of the
    // parent's current position, so workers can be seeded up front.
    Rng substream(std::string_view name, std::uint64_t index = 0) const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (char c : name) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ULL;
        }
        Rng r(mix(mix(seed_ ^ h, index), 0x6a09e667f3bcc909ULL));
        return r;
    }

private:
    static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
        std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t seed_;
    std::uint64_t state_;
};

struct Range {
    double lo = 0, hi = 0;
    double sample(Rng& rng) const { return rng.uniform(lo, hi); }
};

}  // namespace peclr
