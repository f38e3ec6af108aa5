#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace mrdetr {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

inline std::uint64_t hash_str(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

// Counter-based generator: every draw is a pure function of (key, index),
// so the order in which values are consumed never changes them.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t key) : key_(key) {}
    CounterRng(std::uint64_t seed, std::string_view stream) : key_(hash_combine(seed, hash_str(stream))) {}

    std::uint64_t bits(std::uint64_t index) const { return splitmix64(key_ ^ splitmix64(index + 0x632BE59BD9B4E019ull)); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform(std::uint64_t index) const { return static_cast<double>(bits(index) >> 11) * 0x1.0p-53; }
    double uniform(std::uint64_t index, double lo, double hi) const { return lo + (hi - lo) * uniform(index); }

    // Uniform integer in [lo, hi].
    std::int64_t integer(std::uint64_t index, std::int64_t lo, std::int64_t hi) const {
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(bits(index) % span);
    }

    // Standard normal via Box-Muller on draws (2i, 2i+1).
    double normal(std::uint64_t index) const {
        const double u1 = 1.0 - uniform(2 * index);
        const double u2 = uniform(2 * index + 1);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    CounterRng derive(std::uint64_t sub) const { return CounterRng(hash_combine(key_, sub)); }
    CounterRng derive(std::string_view sub) const { return CounterRng(hash_combine(key_, hash_str(sub))); }
    std::uint64_t key() const { return key_; }

private:
    std::uint64_t key_;
};

// Sequential convenience wrapper over a counter stream.
class RngStream {
public:
    explicit RngStream(CounterRng rng) : rng_(rng) {}
    double uniform() { return rng_.uniform(next_++); }
    double uniform(double lo, double hi) { return rng_.uniform(next_++, lo, hi); }
    double normal() { return rng_.normal(next_++); }
    std::int64_t integer(std::int64_t lo, std::int64_t hi) { return rng_.integer(next_++, lo, hi); }

private:
    CounterRng rng_;
    std::uint64_t next_ = 0;
};

}  // namespace mrdetr
