#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>

#include "protag/common.hpp"

namespace protag {

// Deterministic random stream. mt19937_64 state transitions are pinned by the
// standard; the distributions below are our own so draws are reproducible
// across standard-library implementations. Every stochastic operation in the
// repo takes one of these explicitly -- there is no global RNG.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 random bits.
    double u01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // modulo bias < 2^-53, irrelevant at the n used here
        return static_cast<std::uint64_t>(u01() * static_cast<double>(n));
    }

    // Standard normal via Box-Muller; pairs cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = u01(), u2 = u01();
        while (u1 <= 0.0) u1 = u01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    void fill_normal(std::span<float> out) {
        for (auto& v : out) v = static_cast<float>(normal());
    }

    // Independent substream with a stable label (e.g. "train", "edit").
    Rng fork(std::string_view label) const {
        std::uint64_t h = fnv1a64(&seed_, sizeof seed_);
        h = fnv1a64(label.data(), label.size(), h);
        return Rng(h);
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace protag
