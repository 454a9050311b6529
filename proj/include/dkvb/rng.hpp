#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace dkvb::rng {

// splitmix64 step; fully specified so streams are identical across platforms.
inline std::uint64_t splitmix64_next(std::uint64_t& state) {
    state += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// Deterministic stream of draws. Streams are derived from (seed, tag, index)
// so that e.g. the mean of class c never depends on how many classes exist.
class Stream {
public:
    explicit Stream(std::uint64_t state) : state_(state) {}

    std::uint64_t next_u64() { return splitmix64_next(state_); }

    // uniform in [0, 1)
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // standard normal via Box-Muller; consumes two uniforms per draw
    double next_normal() {
        double u1 = 1.0 - next_double();  // (0, 1], keeps log() finite
        double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // uniform integer in [0, bound) via multiply-shift
    std::uint64_t next_below(std::uint64_t bound) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * bound) >> 64);
    }

private:
    std::uint64_t state_;
};

inline Stream make_stream(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0) {
    std::uint64_t s = seed;
    s = splitmix64_next(s) ^ fnv1a64(tag);
    s = splitmix64_next(s) ^ index;
    splitmix64_next(s);
    return Stream(s);
}

template <typename T>
void shuffle(std::vector<T>& items, Stream& stream) {
    if (items.size() < 2) return;
    for (std::size_t i = 0; i + 1 < items.size(); ++i) {
        std::size_t j = i + static_cast<std::size_t>(stream.next_below(items.size() - i));
        std::swap(items[i], items[j]);
    }
}

// First k entries of a seeded permutation of [0, n). For a fixed stream the
// sample for k1 <= k2 is a prefix of the sample for k2.
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k,
                                                           Stream& stream) {
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    for (std::size_t i = 0; i < k && i + 1 < n; ++i) {
        std::size_t j = i + static_cast<std::size_t>(stream.next_below(n - i));
        std::swap(perm[i], perm[j]);
    }
    perm.resize(k);
    return perm;
}

}  // namespace dkvb::rng
