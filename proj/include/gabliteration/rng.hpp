#pragma once

#include <cstdint>
#include <vector>

namespace gabl::rng {

// Small deterministic generator (SplitMix64 core). Standard-library
// distributions are implementation-defined, so everything that must be
// reproducible bit-for-bit across platforms and across parallel schedules
// goes through this. Substreams are derived by hashing (seed, tag), which
// lets parallel workers draw independent, schedule-free streams.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed + kGamma) {}

    // Independent substream for (this seed, tag).
    Rng derive(std::uint64_t tag) const;

    std::uint64_t next_u64();

    // Uniform in [0, 1), 53-bit resolution.
    double uniform();

    // Uniform integer in [0, n); n must be > 0.
    std::uint64_t next_below(std::uint64_t n);

    // Standard normal via Box-Muller; consumes two draws per call.
    double normal();

    // Fisher-Yates permutation of 0..n-1.
    std::vector<std::size_t> permutation(std::size_t n);

private:
    static constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ull;
    std::uint64_t state_;
};

}  // namespace gabl::rng
