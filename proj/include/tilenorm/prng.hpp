#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace tilenorm {

/*!
 * SplitMix64 generator. The whole library draws randomness from this one
 * engine so that a seed fixes every stream on every platform.
 *
 * See https://prng.di.unimi.it for the reference implementation.
 */
class Prng {
  public:
    explicit Prng(std::uint64_t seed = 0) : state_(seed) {}

    std::uint64_t state() const { return state_; }

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    //! Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    //! Uniform integer in [0, n).
    std::uint64_t index(std::uint64_t n) {
        auto i = static_cast<std::uint64_t>(uniform() * static_cast<double>(n));
        return i < n ? i : n - 1;
    }

    //! Standard normal via Box-Muller; one draw per call, the partner is discarded.
    double normal() {
        double u1 = uniform();
        const double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    //! Independent generator for sub-stream `stream_id`.
    Prng fork(std::uint64_t stream_id) const { return Prng(state_ ^ (0xD1B54A32D192ED03ULL * (stream_id + 1))); }

  private:
    std::uint64_t state_;
};

}  // namespace tilenorm
