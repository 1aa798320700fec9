#pragma once

#include "memflow/common.hpp"

#include <cmath>
#include <cstdint>
#include <random>

namespace memflow {

namespace detail {

/// splitmix64 finalizer; bijective on 64-bit words.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Uniform double in (0, 1]; never returns 0 so log() below is safe.
inline double unit_open(std::uint64_t bits) {
    return (static_cast<double>(bits >> 11) + 1.0) * 0x1.0p-53;
}

/// Uniform double in [0, 1).
inline double unit_half_open(std::uint64_t bits) {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

}  // namespace detail

/// Stream tags separating independent uses of one master seed. Streams for
/// distinct (particle, phase) pairs never collide by construction.
namespace noise_phase {
constexpr std::uint64_t increments = 1;       ///< Brownian increments of a run
constexpr std::uint64_t initial_sampling = 2; ///< sampling of initial segments
constexpr std::uint64_t assumption_sampler = 3;
constexpr std::uint64_t bootstrap = 4;
}  // namespace noise_phase

/// Counter-based Gaussian noise source. Every draw is a pure function of
/// (master_seed, particle, phase, step, component), so regeneration from the
/// same key is bit-identical, streams can be consumed in any order, and the
/// result never depends on how work is scheduled across threads.
class NoisePlan {
public:
    explicit NoisePlan(std::uint64_t master_seed) : master_(master_seed) {}

    std::uint64_t master_seed() const { return master_; }

    /// Standard normal draw for one stream element.
    double gaussian(std::uint64_t particle, std::uint64_t phase,
                    std::uint64_t step, std::uint64_t component) const {
        std::uint64_t k = key(particle, phase, step, component);
        double u1 = detail::unit_open(detail::mix64(k));
        double u2 = detail::unit_half_open(detail::mix64(k ^ 0xD1B54A32D192ED03ULL));
        // Box-Muller, cosine branch only; one normal per key.
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    /// Brownian increment over one step: d-vector with covariance h * I.
    Vec increment(std::uint64_t particle, std::uint64_t phase,
                  std::uint64_t step, int d, double h) const {
        Vec dw(d);
        increment_into(dw, particle, phase, step, d, h);
        return dw;
    }

    void increment_into(Vec& out, std::uint64_t particle, std::uint64_t phase,
                        std::uint64_t step, int d, double h) const {
        const double s = std::sqrt(h);
        for (int c = 0; c < d; ++c)
            out[c] = s * gaussian(particle, phase, step, static_cast<std::uint64_t>(c));
    }

    /// Sequential generator derived from this plan, for single-threaded uses
    /// (samplers, bootstrap resampling). Deterministic in (master_seed, phase).
    std::mt19937_64 sequential(std::uint64_t phase) const {
        return std::mt19937_64(detail::mix64(master_ ^ detail::mix64(phase)));
    }

private:
    std::uint64_t key(std::uint64_t particle, std::uint64_t phase,
                      std::uint64_t step, std::uint64_t component) const {
        std::uint64_t k = detail::mix64(master_ ^ 0x6A09E667F3BCC909ULL);
        k = detail::mix64(k ^ detail::mix64(particle));
        k = detail::mix64(k ^ detail::mix64(phase));
        k = detail::mix64(k ^ detail::mix64(step));
        return detail::mix64(k ^ detail::mix64(component));
    }

    std::uint64_t master_;
};

}  // namespace memflow
