#pragma once

#include "memflow/assignment.hpp"
#include "memflow/common.hpp"
#include "memflow/grid.hpp"
#include "memflow/segment.hpp"

#include <cmath>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

namespace memflow {

/// Uniform empirical measure on the weighted path space: M atoms of equal
/// weight 1/M, all sharing one grid and decay rate. Atoms are views into
/// shared storage, so a measure is cheap to build per time step; the mean of
/// the time-0 values is precomputed in fixed index order at construction.
class EmpiricalMeasure {
public:
    EmpiricalMeasure() = default;

    /// Takes ownership of the given segments.
    static EmpiricalMeasure from_segments(std::vector<WeightedSegment> atoms) {
        require(!atoms.empty(), ErrorKind::Domain, "empirical measure needs >= 1 atom");
        auto owned = std::make_shared<std::vector<WeightedSegment>>(std::move(atoms));
        std::vector<SegmentView> views;
        views.reserve(owned->size());
        for (const WeightedSegment& s : *owned) views.push_back(s.view());
        return EmpiricalMeasure(std::move(views), owned);
    }

    /// Wraps externally owned storage (e.g. ensemble trajectories); the
    /// keepalive handle pins the backing data for the measure's lifetime.
    EmpiricalMeasure(std::vector<SegmentView> atoms, std::shared_ptr<const void> keepalive)
        : atoms_(std::move(atoms)), keepalive_(std::move(keepalive)) {
        require(!atoms_.empty(), ErrorKind::Domain, "empirical measure needs >= 1 atom");
        const SegmentView& a0 = atoms_.front();
        for (const SegmentView& a : atoms_) {
            require(a.d == a0.d && a.n_nodes == a0.n_nodes && a.tau == a0.tau && a.h == a0.h,
                    ErrorKind::GridMismatch, "measure atoms use mixed grids");
        }
        mean0_ = Vec::Zero(a0.d);
        for (const SegmentView& a : atoms_) mean0_ += a.at_lag(0);
        mean0_ /= static_cast<double>(atoms_.size());
    }

    long size() const { return static_cast<long>(atoms_.size()); }
    const SegmentView& atom(long i) const { return atoms_[static_cast<std::size_t>(i)]; }
    double tau() const { return atoms_.front().tau; }
    double h() const { return atoms_.front().h; }
    int d() const { return atoms_.front().d; }
    long n_nodes() const { return atoms_.front().n_nodes; }
    double t_hist() const { return atoms_.front().t_hist(); }

    /// Mean of the atoms' values at relative time 0 (one pass, index order).
    const Vec& mean_at_zero() const { return mean0_; }

    bool compatible_with(const EmpiricalMeasure& o) const {
        return d() == o.d() && n_nodes() == o.n_nodes() && tau() == o.tau() && h() == o.h();
    }

private:
    std::vector<SegmentView> atoms_;
    std::shared_ptr<const void> keepalive_;
    Vec mean0_;
};

/// ||mu||_k = (mean of ||atom||_tau^k)^{1/k}; equals 1 at k = 0 by convention.
inline double moment_norm(const EmpiricalMeasure& mu, double k) {
    require(k >= 0.0, ErrorKind::Domain, "moment order k must be >= 0");
    if (k == 0.0) return 1.0;
    double s = 0.0;
    for (long i = 0; i < mu.size(); ++i) s += std::pow(tau_norm(mu.atom(i)), k);
    return std::pow(s / static_cast<double>(mu.size()), 1.0 / k);
}

namespace detail {

/// Windowed distance kernel shared by every Wasserstein cost:
/// max over lags k in [0, n_window] of e^{-tau k h} |xi(-kh) - eta(-kh)|.
inline double pair_cost(const SegmentView& a, const SegmentView& b, long n_window,
                        const std::vector<double>& weight_table) {
    double best = 0.0;
    for (long k = 0; k <= n_window; ++k) {
        const double* pa = a.data + (a.n_nodes - 1 - k) * a.d;
        const double* pb = b.data + (b.n_nodes - 1 - k) * b.d;
        double dist;
        if (a.d == 1) {
            dist = std::abs(pa[0] - pb[0]);
        } else {
            double s = 0.0;
            for (int c = 0; c < a.d; ++c) s += (pa[c] - pb[c]) * (pa[c] - pb[c]);
            dist = std::sqrt(s);
        }
        best = std::max(best, weight_table[static_cast<std::size_t>(k)] * dist);
    }
    return best;
}

inline std::vector<double> weight_table(double tau, long n_window, double h) {
    std::vector<double> w(static_cast<std::size_t>(n_window) + 1);
    for (long k = 0; k <= n_window; ++k) w[static_cast<std::size_t>(k)] = decay_weight(tau, k, h);
    return w;
}

}  // namespace detail

/// L^k-Wasserstein distance between equal-size empirical measures under the
/// truncated weighted norm with window N: the exact optimal assignment over
/// permutations of (mean matched cost^k), raised to 1/(1 v k). The sup over
/// windows in the underlying metric is attained at N = T_hist because the
/// truncated norm is nondecreasing in N on the finite representation.
inline double wasserstein(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu, double k,
                          double window) {
    require(k > 0.0, ErrorKind::Domain, "wasserstein order k must be > 0");
    require(mu.compatible_with(nu), ErrorKind::GridMismatch, "measures use different grids");
    require(mu.size() == nu.size(), ErrorKind::UnsupportedCoupling,
            "wasserstein requires equal atom counts");
    long n_window = static_cast<long>(std::llround(window / mu.h()));
    require(std::abs(static_cast<double>(n_window) * mu.h() - window) <=
                1e-9 * std::max(1.0, window),
            ErrorKind::GridMismatch, "window N is not a grid multiple");
    require(n_window >= 0 && n_window <= mu.n_nodes() - 1, ErrorKind::OutOfRange,
            "window N exceeds the stored horizon");

    const int m = static_cast<int>(mu.size());
    std::vector<double> wt = detail::weight_table(mu.tau(), n_window, mu.h());
    if (m == 1) {
        // Unique coupling; avoid pow round-trips so W_k(delta_xi, delta_eta)
        // equals the truncated norm exactly for k >= 1.
        double c = detail::pair_cost(mu.atom(0), nu.atom(0), n_window, wt);
        return k >= 1.0 ? c : std::pow(c, k);
    }
    std::vector<double> cost(static_cast<std::size_t>(m) * m);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j)
            cost[static_cast<std::size_t>(i) * m + j] =
                std::pow(detail::pair_cost(mu.atom(i), nu.atom(j), n_window, wt), k);
    AssignmentResult sol = solve_assignment(cost, m);
    double mean_cost = sol.total / static_cast<double>(m);
    return std::pow(mean_cost, 1.0 / std::max(1.0, k));
}

/// Full-horizon W_k, the default used throughout the solvers.
inline double wasserstein(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu, double k) {
    return wasserstein(mu, nu, k, mu.t_hist());
}

/// A measure flow t -> mu_t on [0, T]: one empirical measure per grid time.
/// Two representations share the interface: a flow frozen at a single
/// measure, and a flow backed by M realized trajectories, whose per-time
/// measures are materialized lazily as view bundles. The trajectory backing
/// also enables the all-times W2 sweep used by the Picard solver.
class EmpiricalMeasureFlow {
public:
    struct Backing {
        std::vector<const double*> particle_data;  ///< per particle; node -n_hist first
        double tau = 0.0;
        double h = 0.0;
        long n_hist = 0;
        int d = 1;
        TailPolicy tail = TailPolicy::ConstantExtension;
        std::shared_ptr<const void> keepalive;
    };

    EmpiricalMeasureFlow() = default;

    /// Flow frozen at a single measure for every t in [0, T].
    static EmpiricalMeasureFlow constant(const GridSpec& grid, EmpiricalMeasure mu) {
        EmpiricalMeasureFlow f;
        f.grid_ = grid;
        require(mu.n_nodes() == grid.n_hist + 1, ErrorKind::GridMismatch,
                "flow measure does not cover the grid history window");
        f.constant_ = std::make_shared<EmpiricalMeasure>(std::move(mu));
        return f;
    }

    /// Flow realized by an ensemble of trajectories.
    static EmpiricalMeasureFlow from_backing(const GridSpec& grid, Backing backing) {
        EmpiricalMeasureFlow f;
        f.grid_ = grid;
        require(!backing.particle_data.empty(), ErrorKind::Domain, "flow needs >= 1 particle");
        f.backing_ = std::move(backing);
        return f;
    }

    const GridSpec& grid() const { return grid_; }

    long size() const {
        return constant_ ? constant_->size()
                         : static_cast<long>(backing_->particle_data.size());
    }

    /// Measure at grid time index t in [0, n_sim].
    EmpiricalMeasure at(long t_index) const {
        require(t_index >= 0 && t_index <= grid_.n_sim, ErrorKind::OutOfRange,
                "flow time outside [0, T]");
        if (constant_) return *constant_;
        const Backing& b = *backing_;
        std::vector<SegmentView> views;
        views.reserve(b.particle_data.size());
        for (const double* p : b.particle_data)
            views.push_back(SegmentView{p + static_cast<std::size_t>(t_index) * b.d,
                                        b.n_hist + 1, b.d, b.tau, b.h, b.tail});
        return EmpiricalMeasure(std::move(views), b.keepalive);
    }

    bool has_backing() const { return backing_.has_value(); }
    const Backing& backing() const { return *backing_; }

private:
    GridSpec grid_;
    std::shared_ptr<const EmpiricalMeasure> constant_;
    std::optional<Backing> backing_;
};

/// Per-time W2 profile between two flows sharing a grid and atom count.
/// When both flows carry trajectory backing the pair costs for all times are
/// produced by one sliding-window sweep per particle pair; otherwise each
/// time is evaluated through `wasserstein` directly. Both routes compute the
/// same windowed-max costs up to last-ulp rounding of the weight products.
std::vector<double> w2_profile(const EmpiricalMeasureFlow& f, const EmpiricalMeasureFlow& g,
                               int threads = 1);

/// W_{2,theta}(f, g) = max over grid times of e^{-theta t} W2(f_t, g_t).
inline double flow_distance_theta(const EmpiricalMeasureFlow& f, const EmpiricalMeasureFlow& g,
                                  double theta, int threads = 1) {
    require(theta >= 0.0, ErrorKind::Domain, "theta must be >= 0");
    require(f.grid() == g.grid(), ErrorKind::GridMismatch, "flow grids differ");
    std::vector<double> prof = w2_profile(f, g, threads);
    double best = 0.0;
    for (long t = 0; t < static_cast<long>(prof.size()); ++t) {
        double w = std::exp(-theta * f.grid().time_at(t)) * prof[static_cast<std::size_t>(t)];
        best = std::max(best, w);
    }
    return best;
}

/// Weighted max profile reduction shared with the Picard trace bookkeeping.
inline double theta_weighted_max(const std::vector<double>& profile, const GridSpec& grid,
                                 double theta) {
    double best = 0.0;
    for (long t = 0; t < static_cast<long>(profile.size()); ++t)
        best = std::max(best, std::exp(-theta * grid.time_at(t)) * profile[static_cast<std::size_t>(t)]);
    return best;
}

}  // namespace memflow

#include "memflow/measure_impl.hpp"
