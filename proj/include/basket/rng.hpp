#pragma once

// Reproducible randomness. Each replicate draws from its own stream whose
// seed is a counter-based mix of (master seed, stream index), so results do
// not depend on scheduling or thread count. Uniform doubles are built from
// raw mt19937_64 output bits; the standard pins that sequence down to the
// bit, which keeps archives byte-identical across platforms.

#include <cstdint>
#include <random>

namespace basket {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

}  // namespace detail

// Seed for stream `stream` derived from `master`.
inline std::uint64_t derive_stream_seed(std::uint64_t master, std::uint64_t stream) {
    return detail::splitmix64(detail::splitmix64(master) ^
                              detail::splitmix64(stream * 0xD6E8FEB86659FD93ULL + 1));
}

class ReplicateRng {
  public:
    explicit ReplicateRng(std::uint64_t seed) : gen_(seed) {}
    ReplicateRng(std::uint64_t master, std::uint64_t stream)
        : gen_(derive_stream_seed(master, stream)) {}

    // Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    bool bernoulli(double p) { return uniform() < p; }

  private:
    std::mt19937_64 gen_;
};

}  // namespace basket
