#pragma once

#include "memflow/common.hpp"

#include <cmath>

namespace memflow {

/// Uniform time grid covering the stored history window [-T_hist, 0] and the
/// simulation window [0, T]. All time arithmetic inside the library happens on
/// integer node indices (history nodes are negative), so shifts and slices are
/// exact; `h` only enters when a physical time is needed.
struct GridSpec {
    double h = 0.0;    ///< step size, > 0
    long n_hist = 0;   ///< number of history steps, T_hist = n_hist * h, >= 1
    long n_sim = 0;    ///< number of simulation steps, T = n_sim * h, >= 0

    GridSpec() = default;

    GridSpec(double step, long hist_steps, long sim_steps)
        : h(step), n_hist(hist_steps), n_sim(sim_steps) {
        require(h > 0.0, ErrorKind::GridMismatch, "grid step h must be > 0");
        require(n_hist >= 1, ErrorKind::GridMismatch, "history horizon must cover at least one step");
        require(n_sim >= 0, ErrorKind::GridMismatch, "simulation horizon must be >= 0");
    }

    /// Builds a grid from physical times; T_hist and T must be integer
    /// multiples of h (within a tight relative tolerance).
    static GridSpec from_times(double h, double t_hist, double t_sim) {
        require(h > 0.0, ErrorKind::GridMismatch, "grid step h must be > 0");
        return GridSpec(h, steps_of(h, t_hist, "T_hist"), steps_of(h, t_sim, "T"));
    }

    double t_hist() const { return static_cast<double>(n_hist) * h; }
    double t_sim() const { return static_cast<double>(n_sim) * h; }

    /// Total node count for a trajectory on this grid.
    long n_total() const { return n_hist + n_sim + 1; }

    /// Physical time of node index i (i in [-n_hist, n_sim]).
    double time_at(long i) const { return static_cast<double>(i) * h; }

    /// Maps a physical time to its node index, throwing on off-grid input.
    long index_of(double t, const char* what = "time") const {
        long i = static_cast<long>(std::llround(t / h));
        require(std::abs(static_cast<double>(i) * h - t) <= 1e-9 * std::max(1.0, std::abs(t)),
                ErrorKind::GridMismatch, std::string(what) + " is not on the grid");
        return i;
    }

    bool operator==(const GridSpec& o) const {
        return h == o.h && n_hist == o.n_hist && n_sim == o.n_sim;
    }
    bool operator!=(const GridSpec& o) const { return !(*this == o); }

private:
    static long steps_of(double h, double t, const char* what) {
        long n = static_cast<long>(std::llround(t / h));
        require(std::abs(static_cast<double>(n) * h - t) <= 1e-9 * std::max(1.0, std::abs(t)),
                ErrorKind::GridMismatch, std::string(what) + " must be an integer multiple of h");
        return n;
    }
};

}  // namespace memflow
