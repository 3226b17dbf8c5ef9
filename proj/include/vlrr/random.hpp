#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace vlrr {

/// Seeded random source with named sub-streams.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the C++
/// standard, so integer draws are identical on every conforming platform.
/// Distributions are implemented here rather than taken from <random> because
/// the library distributions are implementation-defined.
///
/// A sub-stream's key is SplitMix64(parent key ^ hash(label)). Consumers
/// (initialisation, dropout, augmentation, shuffling, corruption) each take
/// their own sub-stream, so the draws of one never depend on how many numbers
/// another consumed.
class RandomState {
public:
    explicit RandomState(std::uint64_t seed = 0);

    std::uint64_t key() const noexcept { return key_; }

    RandomState substream(std::string_view label) const;
    RandomState substream(std::uint64_t index) const;

    std::uint64_t next_u64();
    // Uniform on [0, 1) with 53 random bits.
    double uniform();
    // Standard normal by the Box-Muller transform; the second variate is cached.
    double normal();
    // Uniform integer in [0, bound); bound > 0.
    std::uint64_t below(std::uint64_t bound);
    bool bernoulli(double p) { return uniform() < p; }

    // Uniformly random permutation of 0..n-1 (Fisher-Yates).
    std::vector<std::size_t> permutation(std::size_t n);

private:
    std::uint64_t key_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x) noexcept;

} // namespace vlrr
