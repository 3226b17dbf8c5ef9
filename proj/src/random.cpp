#include "vlrr/random.hpp"

#include <cmath>
#include <numbers>

#include "vlrr/tensor.hpp"

namespace vlrr {

namespace {

std::uint64_t fnv1a(std::string_view text) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace

std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

RandomState::RandomState(std::uint64_t seed) : key_(seed), engine_(splitmix64(seed)) {}

RandomState RandomState::substream(std::string_view label) const {
    return RandomState(splitmix64(key_ ^ fnv1a(label)));
}

RandomState RandomState::substream(std::uint64_t index) const {
    return RandomState(splitmix64(key_ + 0x632be59bd9b4e019ULL * (index + 1)));
}

std::uint64_t RandomState::next_u64() { return engine_(); }

double RandomState::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double RandomState::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double u1 = 1.0 - uniform(); // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

std::uint64_t RandomState::below(std::uint64_t bound) {
    if (bound == 0) {
        throw ParameterError("RandomState::below: bound must be positive");
    }
    const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound + 1) % bound;
    std::uint64_t x = engine_();
    while (x > limit) {
        x = engine_();
    }
    return x % bound;
}

std::vector<std::size_t> RandomState::permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) {
        p[i] = i;
    }
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = below(i);
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

} // namespace vlrr
