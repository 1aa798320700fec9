#pragma once

#include "memflow/common.hpp"
#include "memflow/grid.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <utility>
#include <vector>

namespace memflow {

/// How the unstored part of the history, (-inf, -T_hist), is interpreted.
enum class TailPolicy {
    ConstantExtension,  ///< path equals its oldest stored value before -T_hist
    Zero,               ///< path is zero before -T_hist
};

inline const char* tail_policy_name(TailPolicy p) {
    return p == TailPolicy::ConstantExtension ? "constant-extension" : "zero";
}

/// Exponential weight applied at lag k (relative time r = -k*h). Every norm
/// and distance kernel in the library goes through this one expression so the
/// pathwise inequalities asserted by tests compare bitwise-identical terms.
inline double decay_weight(double tau, long lag, double h) {
    return std::exp(-tau * (static_cast<double>(lag) * h));
}

/// Non-owning view of a finite history window: n_nodes d-vectors at relative
/// grid times {-(n_nodes-1)*h, ..., -h, 0}, stored oldest first.
struct SegmentView {
    const double* data = nullptr;
    long n_nodes = 0;
    int d = 0;
    double tau = 0.0;
    double h = 0.0;
    TailPolicy tail = TailPolicy::ConstantExtension;

    /// Value k steps back in time (lag 0 = "now").
    Eigen::Map<const Vec> at_lag(long k) const {
        return Eigen::Map<const Vec>(data + (n_nodes - 1 - k) * d, d);
    }

    /// Value at relative grid time r <= 0 (must be on the grid and stored).
    Eigen::Map<const Vec> at_time(double r) const {
        long k = static_cast<long>(std::llround(-r / h));
        require(std::abs(static_cast<double>(-k) * h - r) <= 1e-9 * std::max(1.0, std::abs(r)),
                ErrorKind::GridMismatch, "segment time not on the grid");
        require(k >= 0 && k < n_nodes, ErrorKind::OutOfRange, "segment time outside stored window");
        return at_lag(k);
    }

    double t_hist() const { return static_cast<double>(n_nodes - 1) * h; }
};

/// Owned finite representation of a path on (-inf, 0] with exponentially
/// weighted sup norm. Values live on the grid {-T_hist, ..., -h, 0}; the tail
/// beyond -T_hist is described by `tail` and only enters through the reported
/// truncation-error bound (see `tail_truncation_bound`).
class WeightedSegment {
public:
    WeightedSegment() = default;

    WeightedSegment(double tau, double h, int d, std::vector<double> values,
                    TailPolicy tail = TailPolicy::ConstantExtension)
        : tau_(tau), h_(h), d_(d), tail_(tail), values_(std::move(values)) {
        require(tau_ > 0.0, ErrorKind::MalformedSegment, "decay rate tau must be > 0");
        require(h_ > 0.0, ErrorKind::MalformedSegment, "grid step must be > 0");
        require(d_ >= 1, ErrorKind::MalformedSegment, "state dimension must be >= 1");
        require(!values_.empty(), ErrorKind::MalformedSegment, "segment has no values");
        require(values_.size() % static_cast<std::size_t>(d_) == 0, ErrorKind::MalformedSegment,
                "segment value buffer is not a whole number of d-vectors");
    }

    static WeightedSegment from_nodes(double tau, double h, const std::vector<Vec>& nodes,
                                      TailPolicy tail = TailPolicy::ConstantExtension) {
        require(!nodes.empty(), ErrorKind::MalformedSegment, "segment has no values");
        int d = static_cast<int>(nodes.front().size());
        std::vector<double> flat;
        flat.reserve(nodes.size() * static_cast<std::size_t>(d));
        for (const Vec& v : nodes) {
            require(v.size() == d, ErrorKind::Shape, "segment nodes have mixed dimensions");
            flat.insert(flat.end(), v.data(), v.data() + d);
        }
        return WeightedSegment(tau, h, d, std::move(flat), tail);
    }

    double tau() const { return tau_; }
    double h() const { return h_; }
    int d() const { return d_; }
    TailPolicy tail_policy() const { return tail_; }
    long n_nodes() const { return static_cast<long>(values_.size()) / d_; }
    double t_hist() const { return static_cast<double>(n_nodes() - 1) * h_; }

    SegmentView view() const {
        return SegmentView{values_.data(), n_nodes(), d_, tau_, h_, tail_};
    }

    Eigen::Map<const Vec> at_lag(long k) const { return view().at_lag(k); }
    Eigen::Map<const Vec> value_now() const { return view().at_lag(0); }

    const std::vector<double>& raw() const { return values_; }

private:
    double tau_ = 0.0;
    double h_ = 0.0;
    int d_ = 1;
    TailPolicy tail_ = TailPolicy::ConstantExtension;
    std::vector<double> values_;
};

namespace detail {
inline double node_norm(const double* p, int d) {
    if (d == 1) return std::abs(p[0]);
    double s = 0.0;
    for (int c = 0; c < d; ++c) s += p[c] * p[c];
    return std::sqrt(s);
}
}  // namespace detail

/// sup_{s in [-N, 0]} e^{tau s} |xi(s)| over the stored grid nodes.
/// N must be a positive grid multiple not exceeding the stored horizon.
inline double truncated_norm(const SegmentView& xi, double window) {
    require(xi.n_nodes > 0, ErrorKind::MalformedSegment, "segment has no values");
    require(window > 0.0, ErrorKind::Domain, "window N must be > 0");
    long n = static_cast<long>(std::llround(window / xi.h));
    require(std::abs(static_cast<double>(n) * xi.h - window) <= 1e-9 * std::max(1.0, window),
            ErrorKind::GridMismatch, "window N is not a grid multiple");
    require(n <= xi.n_nodes - 1, ErrorKind::OutOfRange, "window N exceeds the stored horizon");
    double best = 0.0;
    for (long k = 0; k <= n; ++k) {
        double v = decay_weight(xi.tau, k, xi.h) * detail::node_norm(xi.data + (xi.n_nodes - 1 - k) * xi.d, xi.d);
        best = std::max(best, v);
    }
    return best;
}

/// Grid realization of the weighted norm ||xi||_tau. The sup over windows is
/// attained at the full stored horizon because the truncated norm is
/// nondecreasing in the window; the tail beyond -T_hist contributes at most
/// `tail_truncation_bound`.
inline double tau_norm(const SegmentView& xi) {
    require(xi.n_nodes > 0, ErrorKind::MalformedSegment, "segment has no values");
    double best = 0.0;
    for (long k = 0; k < xi.n_nodes; ++k) {
        double v = decay_weight(xi.tau, k, xi.h) * detail::node_norm(xi.data + (xi.n_nodes - 1 - k) * xi.d, xi.d);
        best = std::max(best, v);
    }
    return best;
}

inline double tau_norm(const WeightedSegment& xi) { return tau_norm(xi.view()); }
inline double truncated_norm(const WeightedSegment& xi, double window) {
    return truncated_norm(xi.view(), window);
}

/// Bound on the norm contribution the unstored tail could add:
/// e^{-tau T_hist} * sup bound of the tail per the segment's tail policy.
inline double tail_truncation_bound(const SegmentView& xi) {
    if (xi.tail == TailPolicy::Zero) return 0.0;
    return decay_weight(xi.tau, xi.n_nodes - 1, xi.h) * detail::node_norm(xi.data, xi.d);
}

/// A norm value together with the documented truncation-error bound.
struct NormReport {
    double value = 0.0;
    double tail_bound = 0.0;
};

inline NormReport tau_norm_report(const SegmentView& xi) {
    return NormReport{tau_norm(xi), tail_truncation_bound(xi)};
}

/// xi^0: the constant path equal to xi(0).
inline WeightedSegment constant_extension(const SegmentView& xi) {
    std::vector<double> flat(static_cast<std::size_t>(xi.n_nodes) * xi.d);
    const double* now = xi.data + (xi.n_nodes - 1) * xi.d;
    for (long k = 0; k < xi.n_nodes; ++k)
        for (int c = 0; c < xi.d; ++c) flat[static_cast<std::size_t>(k) * xi.d + c] = now[c];
    return WeightedSegment(xi.tau, xi.h, xi.d, std::move(flat), xi.tail);
}

inline WeightedSegment constant_extension(const WeightedSegment& xi) {
    return constant_extension(xi.view());
}

/// phi^x: the constant path with value x on the given grid.
inline WeightedSegment point_path(const Vec& x, double tau, const GridSpec& grid,
                                  TailPolicy tail = TailPolicy::ConstantExtension) {
    std::vector<double> flat(static_cast<std::size_t>(grid.n_hist + 1) * x.size());
    for (long k = 0; k <= grid.n_hist; ++k)
        for (Eigen::Index c = 0; c < x.size(); ++c)
            flat[static_cast<std::size_t>(k) * x.size() + c] = x[c];
    return WeightedSegment(tau, grid.h, static_cast<int>(x.size()), std::move(flat), tail);
}

/// One realized path over [-T_hist, T] on a fixed grid. Node index i runs
/// from -n_hist to n_sim; segments are exact slices of the stored values.
class Trajectory {
public:
    Trajectory() = default;

    Trajectory(const GridSpec& grid, double tau, int d,
               TailPolicy tail = TailPolicy::ConstantExtension)
        : grid_(grid), tau_(tau), d_(d), tail_(tail),
          data_(static_cast<std::size_t>(grid.n_total()) * d, 0.0) {
        require(tau_ > 0.0, ErrorKind::MalformedSegment, "decay rate tau must be > 0");
        require(d_ >= 1, ErrorKind::Shape, "state dimension must be >= 1");
    }

    /// Starts a trajectory from an initial history segment; the history nodes
    /// are copied verbatim and value(0) equals the segment's value at 0.
    static Trajectory from_initial(const GridSpec& grid, const WeightedSegment& initial) {
        require(initial.n_nodes() == grid.n_hist + 1, ErrorKind::GridMismatch,
                "initial segment does not cover the grid history window");
        require(std::abs(initial.h() - grid.h) <= 1e-12 * grid.h, ErrorKind::GridMismatch,
                "initial segment uses a different step size");
        Trajectory traj(grid, initial.tau(), initial.d(), initial.tail_policy());
        std::copy(initial.raw().begin(), initial.raw().end(), traj.data_.begin());
        return traj;
    }

    const GridSpec& grid() const { return grid_; }
    double tau() const { return tau_; }
    int d() const { return d_; }
    TailPolicy tail_policy() const { return tail_; }

    Eigen::Map<const Vec> value(long i) const {
        check_index(i);
        return Eigen::Map<const Vec>(data_.data() + storage_of(i) * d_, d_);
    }

    Eigen::Map<Vec> value_mut(long i) {
        check_index(i);
        return Eigen::Map<Vec>(data_.data() + storage_of(i) * d_, d_);
    }

    void set_value(long i, const Vec& v) {
        require(v.size() == d_, ErrorKind::Shape, "value dimension mismatch");
        value_mut(i) = v;
    }

    /// Segment view at node index i in [0, n_sim]: nodes i-n_hist .. i.
    SegmentView segment_view_at(long i) const {
        require(i >= 0 && i <= grid_.n_sim, ErrorKind::OutOfRange,
                "segment time outside [0, T]");
        return SegmentView{data_.data() + storage_of(i - grid_.n_hist) * d_,
                           grid_.n_hist + 1, d_, tau_, grid_.h, tail_};
    }

    const double* raw() const { return data_.data(); }
    double* raw_mut() { return data_.data(); }

private:
    long storage_of(long i) const { return i + grid_.n_hist; }
    void check_index(long i) const {
        require(i >= -grid_.n_hist && i <= grid_.n_sim, ErrorKind::OutOfRange,
                "node index outside the trajectory");
    }

    GridSpec grid_;
    double tau_ = 0.0;
    int d_ = 1;
    TailPolicy tail_ = TailPolicy::ConstantExtension;
    std::vector<double> data_;
};

/// X_t: the owned segment of a trajectory at grid time t (node index form).
inline WeightedSegment segment_at(const Trajectory& traj, long i) {
    SegmentView v = traj.segment_view_at(i);
    std::vector<double> flat(v.data, v.data + static_cast<std::size_t>(v.n_nodes) * v.d);
    return WeightedSegment(v.tau, v.h, v.d, std::move(flat), v.tail);
}

inline WeightedSegment segment_at(const Trajectory& traj, double t) {
    return segment_at(traj, traj.grid().index_of(t));
}

/// Both sides of the pathwise shift inequality
///   e^{p tau t} ||X_t||_tau^p  <=  ||X_0||_tau^p + sup_{s in [0,t]} e^{p tau s} |X(s)|^p.
/// Every candidate term is evaluated through one shared expression, so the
/// inequality holds exactly (not merely up to rounding) on the grid.
struct ShiftBound {
    double lhs = 0.0;
    double rhs = 0.0;
};

namespace detail {
inline double weighted_power_term(const Trajectory& traj, long i, double p) {
    double w = std::exp(p * traj.tau() * (static_cast<double>(i) * traj.grid().h));
    return w * std::pow(node_norm(traj.raw() + (i + traj.grid().n_hist) * traj.d(), traj.d()), p);
}
}  // namespace detail

inline ShiftBound shift_bound_check(const Trajectory& traj, double p, long t_index) {
    const GridSpec& g = traj.grid();
    require(t_index >= 0 && t_index <= g.n_sim, ErrorKind::OutOfRange, "t outside [0, T]");
    require(p >= 1.0, ErrorKind::Domain, "p must be >= 1");
    double lhs = 0.0;
    for (long i = t_index - g.n_hist; i <= t_index; ++i)
        lhs = std::max(lhs, detail::weighted_power_term(traj, i, p));
    double hist = 0.0;
    for (long i = -g.n_hist; i <= 0; ++i)
        hist = std::max(hist, detail::weighted_power_term(traj, i, p));
    double fwd = 0.0;
    for (long i = 0; i <= t_index; ++i)
        fwd = std::max(fwd, detail::weighted_power_term(traj, i, p));
    return ShiftBound{lhs, hist + fwd};
}

inline ShiftBound shift_bound_check(const Trajectory& traj, double p, double t) {
    return shift_bound_check(traj, p, traj.grid().index_of(t));
}

/// Sliding-window maximum over a fixed-length window, one output per
/// right endpoint. Used by the whole-trajectory sweeps below.
class WindowMax {
public:
    explicit WindowMax(long window) : window_(window) {}

    /// Pushes value at position i; returns max over positions [i-window+1, i].
    double push(long i, double v) {
        while (!q_.empty() && q_.back().second <= v) q_.pop_back();
        q_.emplace_back(i, v);
        while (q_.front().first < i - window_ + 1) q_.pop_front();
        return q_.front().second;
    }

private:
    long window_;
    std::deque<std::pair<long, double>> q_;
};

/// Weighted segment norms ||X_t||_tau for every t in [0, T] in one sweep.
/// Mathematically identical to calling tau_norm(segment) per time; the
/// factored weights may differ from the direct kernel in the last ulps.
inline std::vector<double> segment_norm_profile(const Trajectory& traj) {
    const GridSpec& g = traj.grid();
    std::vector<double> out(static_cast<std::size_t>(g.n_sim) + 1);
    WindowMax wm(g.n_hist + 1);
    long shift = g.n_sim;  // keeps exponents <= tau*(T+T_hist) in magnitude
    for (long i = -g.n_hist; i <= g.n_sim; ++i) {
        double gval = std::exp(traj.tau() * (static_cast<double>(i - shift) * g.h)) *
                      detail::node_norm(traj.raw() + (i + g.n_hist) * traj.d(), traj.d());
        double m = wm.push(i, gval);
        if (i >= 0)
            out[static_cast<std::size_t>(i)] =
                std::exp(traj.tau() * (static_cast<double>(shift - i) * g.h)) * m;
    }
    return out;
}

/// Verifies the shift inequality at every grid time of a trajectory using the
/// same shared term expression as shift_bound_check. Returns the number of
/// violating times (expected: 0) and the worst defect lhs - rhs.
struct ShiftSweep {
    long violations = 0;
    double max_defect = -std::numeric_limits<double>::infinity();
};

inline ShiftSweep shift_bound_sweep_raw(const double* data, const GridSpec& g, double tau, int d,
                                        double p) {
    std::vector<double> wp(static_cast<std::size_t>(g.n_total()));
    for (long i = -g.n_hist; i <= g.n_sim; ++i) {
        double w = std::exp(p * tau * (static_cast<double>(i) * g.h));
        wp[static_cast<std::size_t>(i + g.n_hist)] =
            w * std::pow(detail::node_norm(data + (i + g.n_hist) * d, d), p);
    }
    double hist = 0.0;
    for (long i = -g.n_hist; i <= 0; ++i)
        hist = std::max(hist, wp[static_cast<std::size_t>(i + g.n_hist)]);
    ShiftSweep sweep;
    WindowMax wm(g.n_hist + 1);
    for (long i = -g.n_hist; i < 0; ++i) wm.push(i, wp[static_cast<std::size_t>(i + g.n_hist)]);
    double fwd = 0.0;
    for (long i = 0; i <= g.n_sim; ++i) {
        double lhs = wm.push(i, wp[static_cast<std::size_t>(i + g.n_hist)]);
        fwd = std::max(fwd, wp[static_cast<std::size_t>(i + g.n_hist)]);
        double rhs = hist + fwd;
        double defect = lhs - rhs;
        sweep.max_defect = std::max(sweep.max_defect, defect);
        if (defect > 0.0) ++sweep.violations;
    }
    return sweep;
}

inline ShiftSweep shift_bound_sweep(const Trajectory& traj, double p) {
    return shift_bound_sweep_raw(traj.raw(), traj.grid(), traj.tau(), traj.d(), p);
}

}  // namespace memflow
