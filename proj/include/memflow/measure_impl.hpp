#pragma once

#include "memflow/measure.hpp"
#include "memflow/threading.hpp"

#include <cmath>
#include <vector>

namespace memflow {

namespace detail {

/// Sliding sweep: fills, for every time in the block [t0, t1), the squared
/// window-max cost of every particle pair into `block` (layout t-major,
/// then i*m+j). G(s) = e^{tau (s - n_sim) h} |x_i(s) - y_j(s)| is swept once
/// per pair; the shift by n_sim keeps the exponents from overflowing.
inline void fill_cost_block(const EmpiricalMeasureFlow::Backing& a,
                            const EmpiricalMeasureFlow::Backing& b, const GridSpec& grid,
                            long t0, long t1, int threads, std::vector<double>& block) {
    const long m = static_cast<long>(a.particle_data.size());
    const int d = a.d;
    const double tau = a.tau;
    const long n_hist = grid.n_hist;
    parallel_for(m, threads, [&](long i_begin, long i_end) {
        for (long i = i_begin; i < i_end; ++i) {
            const double* xi = a.particle_data[static_cast<std::size_t>(i)];
            for (long j = 0; j < m; ++j) {
                const double* yj = b.particle_data[static_cast<std::size_t>(j)];
                WindowMax wm(n_hist + 1);
                for (long s = t0 - n_hist; s < t1; ++s) {
                    long off = (s + n_hist) * d;
                    double dist;
                    if (d == 1) {
                        dist = std::abs(xi[off] - yj[off]);
                    } else {
                        double acc = 0.0;
                        for (int c = 0; c < d; ++c) {
                            double dd = xi[off + c] - yj[off + c];
                            acc += dd * dd;
                        }
                        dist = std::sqrt(acc);
                    }
                    double g = std::exp(tau * (static_cast<double>(s - grid.n_sim) * grid.h)) * dist;
                    double mx = wm.push(s, g);
                    if (s >= t0) {
                        double cost = std::exp(tau * (static_cast<double>(grid.n_sim - s) * grid.h)) * mx;
                        block[static_cast<std::size_t>(s - t0) * (m * m) + i * m + j] = cost * cost;
                    }
                }
            }
        }
    });
}

inline std::vector<double> w2_profile_backed(const EmpiricalMeasureFlow& f,
                                             const EmpiricalMeasureFlow& g, int threads) {
    const GridSpec& grid = f.grid();
    const long m = f.size();
    std::vector<double> profile(static_cast<std::size_t>(grid.n_sim) + 1, 0.0);
    const long block_times = std::max<long>(1, std::min<long>(grid.n_sim + 1, (1 << 22) / (m * m) + 1));
    std::vector<double> block(static_cast<std::size_t>(block_times) * m * m);
    for (long t0 = 0; t0 <= grid.n_sim; t0 += block_times) {
        long t1 = std::min(grid.n_sim + 1, t0 + block_times);
        fill_cost_block(f.backing(), g.backing(), grid, t0, t1, threads, block);
        parallel_for(t1 - t0, threads, [&](long k_begin, long k_end) {
            for (long k = k_begin; k < k_end; ++k) {
                const double* cost = block.data() + static_cast<std::size_t>(k) * m * m;
                std::vector<double> c(cost, cost + m * m);
                AssignmentResult sol = solve_assignment(c, static_cast<int>(m));
                profile[static_cast<std::size_t>(t0 + k)] =
                    std::sqrt(sol.total / static_cast<double>(m));
            }
        });
    }
    return profile;
}

}  // namespace detail

inline std::vector<double> w2_profile(const EmpiricalMeasureFlow& f,
                                      const EmpiricalMeasureFlow& g, int threads) {
    require(f.grid() == g.grid(), ErrorKind::GridMismatch, "flow grids differ");
    require(f.size() == g.size(), ErrorKind::UnsupportedCoupling,
            "flows must share one atom count");
    const GridSpec& grid = f.grid();
    // The factored sweep shifts weights by e^{tau T}; guard against overflow
    // of the intermediate exponents on extreme (tau, T) combinations.
    bool can_sweep = f.has_backing() && g.has_backing() &&
                     f.backing().tau * (grid.t_sim() + grid.t_hist()) < 300.0;
    if (can_sweep) return detail::w2_profile_backed(f, g, threads);
    std::vector<double> profile(static_cast<std::size_t>(grid.n_sim) + 1, 0.0);
    for (long t = 0; t <= grid.n_sim; ++t)
        profile[static_cast<std::size_t>(t)] = wasserstein(f.at(t), g.at(t), 2.0);
    return profile;
}

}  // namespace memflow
