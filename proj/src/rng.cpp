#include "gabliteration/rng.hpp"

#include <cmath>
#include <numbers>

namespace gabl::rng {

static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

Rng Rng::derive(std::uint64_t tag) const {
    Rng child(0);
    child.state_ = mix(state_ ^ mix(tag + kGamma));
    return child;
}

std::uint64_t Rng::next_u64() {
    state_ += kGamma;
    return mix(state_);
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::next_below(std::uint64_t n) {
    // Modulo bias is ~n/2^64, irrelevant for test-scale n.
    return next_u64() % n;
}

double Rng::normal() {
    // u1 in (0, 1] so log() stays finite.
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<std::size_t> Rng::permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(next_below(i));
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

}  // namespace gabl::rng
