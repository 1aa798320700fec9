#pragma once

#include "memflow/coefficients.hpp"
#include "memflow/common.hpp"
#include "memflow/grid.hpp"
#include "memflow/measure.hpp"
#include "memflow/rng.hpp"
#include "memflow/segment.hpp"
#include "memflow/stats.hpp"
#include "memflow/threading.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <sstream>
#include <utility>
#include <vector>

namespace memflow {

enum class EnsembleMode { Frozen, Interacting };

enum class TamingMode {
    Auto,  ///< tame exactly when the model is not globally Lipschitz
    On,
    Off,
};

struct SimOptions {
    int threads = 1;
    long particle_offset = 0;  ///< global index of the first particle (noise keying)
    TamingMode taming = TamingMode::Auto;
    std::uint64_t phase = noise_phase::increments;
};

/// Immutable ensemble of realized trajectories sharing one grid and decay
/// rate. The backing vector is shared so segment views, measures, and flows
/// derived from the ensemble stay valid for free.
class EnsembleState {
public:
    EnsembleState() = default;

    EnsembleState(GridSpec grid, double tau, int d, EnsembleMode mode,
                  std::shared_ptr<const std::vector<Trajectory>> particles)
        : grid_(grid), tau_(tau), d_(d), mode_(mode), particles_(std::move(particles)) {
        require(particles_ && !particles_->empty(), ErrorKind::Domain,
                "ensemble needs >= 1 particle");
    }

    const GridSpec& grid() const { return grid_; }
    double tau() const { return tau_; }
    int d() const { return d_; }
    EnsembleMode mode() const { return mode_; }
    long size() const { return static_cast<long>(particles_->size()); }
    const Trajectory& particle(long i) const { return (*particles_)[static_cast<std::size_t>(i)]; }

    /// Empirical measure of the segments at grid time index t.
    EmpiricalMeasure measure_at(long t_index) const {
        std::vector<SegmentView> views;
        views.reserve(particles_->size());
        for (const Trajectory& traj : *particles_) views.push_back(traj.segment_view_at(t_index));
        return EmpiricalMeasure(std::move(views), particles_);
    }

    /// Realized law flow t -> empirical measure of segments at t.
    EmpiricalMeasureFlow flow() const {
        EmpiricalMeasureFlow::Backing b;
        b.particle_data.reserve(particles_->size());
        for (const Trajectory& traj : *particles_) b.particle_data.push_back(traj.raw());
        b.tau = tau_;
        b.h = grid_.h;
        b.n_hist = grid_.n_hist;
        b.d = d_;
        b.tail = particles_->front().tail_policy();
        b.keepalive = particles_;
        return EmpiricalMeasureFlow::from_backing(grid_, std::move(b));
    }

private:
    GridSpec grid_;
    double tau_ = 0.0;
    int d_ = 1;
    EnsembleMode mode_ = EnsembleMode::Frozen;
    std::shared_ptr<const std::vector<Trajectory>> particles_;
};

namespace detail {

struct StepContext {
    bool tame = false;
    bool cap_b0 = false;
    double b0_cap = 0.0;
    bool constant_sigma = false;
    Mat sigma_cached;
};

inline StepContext make_step_context(const CoefficientSet& coeffs, const GridSpec& grid,
                                     const SimOptions& opts,
                                     const WeightedSegment& probe_segment) {
    StepContext ctx;
    ctx.tame = opts.taming == TamingMode::On ||
               (opts.taming == TamingMode::Auto && !coeffs.flags.globally_lipschitz);
    ctx.cap_b0 = coeffs.flags.cap_b0_at_inv_sqrt_h;
    ctx.b0_cap = 1.0 / std::sqrt(grid.h);
    ctx.constant_sigma = coeffs.flags.constant_sigma;
    if (ctx.constant_sigma) {
        ctx.sigma_cached = Mat::Zero(coeffs.d, coeffs.d);
        coeffs.sigma(0.0, probe_segment.view(), ctx.sigma_cached);
    }
    return ctx;
}

/// One Euler-Maruyama step for one particle; coefficients are evaluated at
/// the left endpoint segment (adapted), the drift is optionally capped (b0)
/// and tamed (total), and blow-up raises immediately.
inline void euler_step(const CoefficientSet& coeffs, const StepContext& ctx, Trajectory& traj,
                       long j, const EmpiricalMeasure& mu, const Vec& dw, Vec& b0, Vec& b1,
                       Mat& sig, long particle_label) {
    const GridSpec& g = traj.grid();
    const double t = g.time_at(j);
    SegmentView seg = traj.segment_view_at(j);
    auto x = traj.value(j);
    coeffs.drift_b0(t, x, b0);
    if (ctx.cap_b0) {
        double nb = b0.norm();
        if (nb > ctx.b0_cap) b0 *= ctx.b0_cap / nb;
    }
    coeffs.drift_b1(t, seg, mu, b1);
    b0 += b1;
    if (ctx.tame) b0 /= 1.0 + g.h * b0.norm();
    auto xn = traj.value_mut(j + 1);
    if (ctx.constant_sigma) {
        if (traj.d() == 1) {
            xn[0] = x[0] + b0[0] * g.h + ctx.sigma_cached(0, 0) * dw[0];
        } else {
            xn = x + b0 * g.h;
            xn.noalias() += ctx.sigma_cached * dw;
        }
    } else {
        coeffs.sigma(t, seg, sig);
        xn = x + b0 * g.h;
        xn.noalias() += sig * dw;
    }
    for (int c = 0; c < traj.d(); ++c) {
        if (!std::isfinite(xn[c])) {
            std::ostringstream os;
            os << "solution blew up: particle " << particle_label << ", step " << j + 1
               << ", t=" << g.time_at(j + 1);
            throw Error(ErrorKind::BlowUp, os.str());
        }
    }
}

inline void check_initials(const CoefficientSet& coeffs, const GridSpec& grid,
                           const std::vector<WeightedSegment>& initials) {
    require(!initials.empty(), ErrorKind::Domain, "need >= 1 initial segment");
    for (const WeightedSegment& s : initials) {
        require(s.d() == coeffs.d, ErrorKind::Shape, "initial segment dimension mismatch");
        require(s.n_nodes() == grid.n_hist + 1, ErrorKind::GridMismatch,
                "initial segment does not cover the history window");
        require(s.tau() == coeffs.tau, ErrorKind::GridMismatch,
                "initial segment tau differs from the model tau");
        for (double v : s.raw())
            require(std::isfinite(v), ErrorKind::Numeric, "initial segment has non-finite values");
    }
}

}  // namespace detail

/// Integrates the frozen-flow dynamics: each particle follows
///   X_{j+1} = X_j + b(t_j, X_{t_j}, mu_{t_j}) h + sigma(t_j, X_{t_j}) dW_j
/// with mu the supplied measure flow. Deterministic in (coeffs, flow,
/// initials, plan) regardless of thread count.
inline EnsembleState simulate_frozen(const CoefficientSet& coeffs,
                                     const EmpiricalMeasureFlow& flow,
                                     const std::vector<WeightedSegment>& initials,
                                     const GridSpec& grid, const NoisePlan& plan,
                                     const SimOptions& opts = {}) {
    require(flow.grid() == grid, ErrorKind::GridMismatch, "flow grid differs from run grid");
    detail::check_initials(coeffs, grid, initials);
    const long m = static_cast<long>(initials.size());

    // Materialize the per-step measures once; they are shared by all
    // particles. Distribution-free models read none of this.
    std::vector<EmpiricalMeasure> measures;
    if (coeffs.flags.distribution_dependent) {
        measures.reserve(static_cast<std::size_t>(grid.n_sim) + 1);
        for (long j = 0; j <= grid.n_sim; ++j) measures.push_back(flow.at(j));
    } else {
        measures.push_back(flow.at(0));
    }

    auto particles = std::make_shared<std::vector<Trajectory>>();
    particles->reserve(static_cast<std::size_t>(m));
    for (long i = 0; i < m; ++i)
        particles->push_back(Trajectory::from_initial(grid, initials[static_cast<std::size_t>(i)]));

    detail::StepContext ctx = detail::make_step_context(coeffs, grid, opts, initials.front());
    std::vector<std::pair<long, std::string>> failures(static_cast<std::size_t>(m),
                                                       {-1, std::string()});
    parallel_for(m, opts.threads, [&](long begin, long end) {
        Vec b0(coeffs.d), b1(coeffs.d), dw(coeffs.d);
        Mat sig = Mat::Zero(coeffs.d, coeffs.d);
        for (long i = begin; i < end; ++i) {
            Trajectory& traj = (*particles)[static_cast<std::size_t>(i)];
            try {
                for (long j = 0; j < grid.n_sim; ++j) {
                    const EmpiricalMeasure& mu =
                        coeffs.flags.distribution_dependent
                            ? measures[static_cast<std::size_t>(j)]
                            : measures.front();
                    plan.increment_into(dw, static_cast<std::uint64_t>(opts.particle_offset + i),
                                        opts.phase, static_cast<std::uint64_t>(j), coeffs.d,
                                        grid.h);
                    detail::euler_step(coeffs, ctx, traj, j, mu, dw, b0, b1, sig,
                                       opts.particle_offset + i);
                }
            } catch (const Error& e) {
                failures[static_cast<std::size_t>(i)] = {i, e.what()};
            }
        }
    });
    for (const auto& f : failures)
        if (f.first >= 0) throw Error(ErrorKind::BlowUp, f.second);

    return EnsembleState(grid, coeffs.tau, coeffs.d, EnsembleMode::Frozen, particles);
}

struct InteractingResult {
    EnsembleState ensemble;
    EmpiricalMeasureFlow flow;
};

/// Self-interacting particle system: identical to the frozen dynamics except
/// that mu_{t_j} is the running empirical measure of the M current segments.
/// One synchronization per step refreshes the measure; reductions run in
/// fixed index order so results are independent of scheduling.
inline InteractingResult simulate_interacting(const CoefficientSet& coeffs,
                                              const std::vector<WeightedSegment>& initials,
                                              const GridSpec& grid, const NoisePlan& plan,
                                              const SimOptions& opts = {}) {
    detail::check_initials(coeffs, grid, initials);
    const long m = static_cast<long>(initials.size());

    auto particles = std::make_shared<std::vector<Trajectory>>();
    particles->reserve(static_cast<std::size_t>(m));
    for (long i = 0; i < m; ++i)
        particles->push_back(Trajectory::from_initial(grid, initials[static_cast<std::size_t>(i)]));

    detail::StepContext ctx = detail::make_step_context(coeffs, grid, opts, initials.front());
    for (long j = 0; j < grid.n_sim; ++j) {
        std::vector<SegmentView> views;
        views.reserve(static_cast<std::size_t>(m));
        for (const Trajectory& traj : *particles) views.push_back(traj.segment_view_at(j));
        EmpiricalMeasure mu(std::move(views), nullptr);

        std::vector<std::pair<long, std::string>> failures(static_cast<std::size_t>(m),
                                                           {-1, std::string()});
        parallel_for(m, opts.threads, [&](long begin, long end) {
            Vec b0(coeffs.d), b1(coeffs.d), dw(coeffs.d);
            Mat sig = Mat::Zero(coeffs.d, coeffs.d);
            for (long i = begin; i < end; ++i) {
                try {
                    plan.increment_into(dw, static_cast<std::uint64_t>(opts.particle_offset + i),
                                        opts.phase, static_cast<std::uint64_t>(j), coeffs.d,
                                        grid.h);
                    detail::euler_step(coeffs, ctx, (*particles)[static_cast<std::size_t>(i)], j,
                                       mu, dw, b0, b1, sig, opts.particle_offset + i);
                } catch (const Error& e) {
                    failures[static_cast<std::size_t>(i)] = {i, e.what()};
                }
            }
        });
        for (const auto& f : failures)
            if (f.first >= 0) throw Error(ErrorKind::BlowUp, f.second);
    }

    EnsembleState ens(grid, coeffs.tau, coeffs.d, EnsembleMode::Interacting, particles);
    EmpiricalMeasureFlow flow = ens.flow();
    return InteractingResult{std::move(ens), std::move(flow)};
}

// ---------------------------------------------------------------------------
// Ensemble statistics
// ---------------------------------------------------------------------------

/// Time-indexed Monte Carlo moments of the segment norm and of its running
/// sup. Mergeable across particle batches: sums are accumulated in batch
/// order, so a batched run reproduces the unbatched result bit for bit given
/// the same batch boundaries.
class MomentAccumulator {
public:
    MomentAccumulator(const GridSpec& grid, double k) : grid_(grid), k_(k) {
        require(k >= 0.0, ErrorKind::Domain, "moment order k must be >= 0");
        long n = grid.n_sim + 1;
        sum_.assign(static_cast<std::size_t>(n), 0.0);
        sum_sq_.assign(static_cast<std::size_t>(n), 0.0);
        sup_sum_.assign(static_cast<std::size_t>(n), 0.0);
        sup_sum_sq_.assign(static_cast<std::size_t>(n), 0.0);
    }

    void add(const EnsembleState& ens) {
        require(ens.grid() == grid_, ErrorKind::GridMismatch, "ensemble grid mismatch");
        for (long i = 0; i < ens.size(); ++i) {
            std::vector<double> norms = segment_norm_profile(ens.particle(i));
            double running = 0.0;
            for (long t = 0; t <= grid_.n_sim; ++t) {
                double nv = norms[static_cast<std::size_t>(t)];
                running = std::max(running, nv);
                double v = k_ == 0.0 ? 1.0 : std::pow(nv, k_);
                double sv = k_ == 0.0 ? 1.0 : std::pow(running, k_);
                sum_[static_cast<std::size_t>(t)] += v;
                sum_sq_[static_cast<std::size_t>(t)] += v * v;
                sup_sum_[static_cast<std::size_t>(t)] += sv;
                sup_sum_sq_[static_cast<std::size_t>(t)] += sv * sv;
            }
            ++count_;
        }
    }

    struct Row {
        double t = 0.0;
        MeanStderr norm_k;
        MeanStderr sup_norm_k;
    };

    std::vector<Row> finalize() const {
        require(count_ > 0, ErrorKind::Domain, "no particles accumulated");
        std::vector<Row> rows(static_cast<std::size_t>(grid_.n_sim) + 1);
        double n = static_cast<double>(count_);
        for (long t = 0; t <= grid_.n_sim; ++t) {
            Row& r = rows[static_cast<std::size_t>(t)];
            r.t = grid_.time_at(t);
            r.norm_k.n = count_;
            r.norm_k.mean = sum_[static_cast<std::size_t>(t)] / n;
            r.sup_norm_k.n = count_;
            r.sup_norm_k.mean = sup_sum_[static_cast<std::size_t>(t)] / n;
            if (count_ >= 2) {
                double v1 = std::max(0.0, sum_sq_[static_cast<std::size_t>(t)] / n -
                                              r.norm_k.mean * r.norm_k.mean);
                double v2 = std::max(0.0, sup_sum_sq_[static_cast<std::size_t>(t)] / n -
                                              r.sup_norm_k.mean * r.sup_norm_k.mean);
                r.norm_k.stderr_ = std::sqrt(v1 / (n - 1.0));
                r.sup_norm_k.stderr_ = std::sqrt(v2 / (n - 1.0));
            }
        }
        return rows;
    }

    long count() const { return count_; }
    double order() const { return k_; }

private:
    GridSpec grid_;
    double k_;
    long count_ = 0;
    std::vector<double> sum_, sum_sq_, sup_sum_, sup_sum_sq_;
};

inline std::vector<MomentAccumulator::Row> moment_curve(const EnsembleState& ens, double k) {
    MomentAccumulator acc(ens.grid(), k);
    acc.add(ens);
    return acc.finalize();
}

/// E[e^{beta ||X_t||_tau^{2 alpha}}] estimates with an exponential-mass
/// guard: a time is flagged when a single particle carries more than half of
/// the exponential mass, and overflow is reported as +inf together with the
/// offending particle norm.
struct ExpMomentRow {
    double t = 0.0;
    double estimate = 0.0;
    double stderr_ = 0.0;
    double max_mass_fraction = 0.0;
    bool flagged = false;
    bool overflow = false;
    double worst_norm = 0.0;
};

inline std::vector<ExpMomentRow> exp_moment(const EnsembleState& ens, double beta, double alpha) {
    require(beta >= 0.0, ErrorKind::Domain, "beta must be >= 0");
    require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::Domain, "alpha must lie in [0, 1]");
    const GridSpec& g = ens.grid();
    long n = g.n_sim + 1;
    long m = ens.size();
    std::vector<double> sum(static_cast<std::size_t>(n), 0.0), sum_sq(static_cast<std::size_t>(n), 0.0),
        max_term(static_cast<std::size_t>(n), 0.0), worst(static_cast<std::size_t>(n), 0.0);
    std::vector<bool> inf_seen(static_cast<std::size_t>(n), false);
    for (long i = 0; i < m; ++i) {
        std::vector<double> norms = segment_norm_profile(ens.particle(i));
        for (long t = 0; t < n; ++t) {
            double nv = norms[static_cast<std::size_t>(t)];
            double e = std::exp(beta * std::pow(nv, 2.0 * alpha));
            if (!std::isfinite(e)) {
                inf_seen[static_cast<std::size_t>(t)] = true;
                worst[static_cast<std::size_t>(t)] =
                    std::max(worst[static_cast<std::size_t>(t)], nv);
                continue;
            }
            sum[static_cast<std::size_t>(t)] += e;
            sum_sq[static_cast<std::size_t>(t)] += e * e;
            max_term[static_cast<std::size_t>(t)] =
                std::max(max_term[static_cast<std::size_t>(t)], e);
        }
    }
    std::vector<ExpMomentRow> rows(static_cast<std::size_t>(n));
    for (long t = 0; t < n; ++t) {
        ExpMomentRow& r = rows[static_cast<std::size_t>(t)];
        r.t = g.time_at(t);
        double mm = static_cast<double>(m);
        if (inf_seen[static_cast<std::size_t>(t)]) {
            r.estimate = std::numeric_limits<double>::infinity();
            r.overflow = true;
            r.flagged = true;
            r.worst_norm = worst[static_cast<std::size_t>(t)];
            continue;
        }
        r.estimate = sum[static_cast<std::size_t>(t)] / mm;
        if (m >= 2) {
            double var = std::max(0.0, sum_sq[static_cast<std::size_t>(t)] / mm -
                                           r.estimate * r.estimate);
            r.stderr_ = std::sqrt(var / (mm - 1.0));
        }
        r.max_mass_fraction = sum[static_cast<std::size_t>(t)] > 0.0
                                  ? max_term[static_cast<std::size_t>(t)] /
                                        sum[static_cast<std::size_t>(t)]
                                  : 0.0;
        r.flagged = r.max_mass_fraction > 0.5;
    }
    return rows;
}

/// Pathwise shift-inequality sweep over a whole ensemble; zero violations is
/// the expected outcome for every simulated trajectory.
inline ShiftSweep epr_sweep(const EnsembleState& ens, double p, int threads = 1) {
    std::vector<ShiftSweep> per(static_cast<std::size_t>(ens.size()));
    parallel_for(ens.size(), threads, [&](long begin, long end) {
        for (long i = begin; i < end; ++i)
            per[static_cast<std::size_t>(i)] = shift_bound_sweep(ens.particle(i), p);
    });
    ShiftSweep total;
    for (const ShiftSweep& s : per) {
        total.violations += s.violations;
        total.max_defect = std::max(total.max_defect, s.max_defect);
    }
    return total;
}

/// Common-noise gap between two solutions started from xi and eta:
/// sup_{t in [0,T]} ||X^xi_t - X^eta_t||_tau, both driven by the same
/// increments. Used by the initial-value Lipschitz diagnostics.
struct PairGap {
    double initial_gap = 0.0;
    double sup_gap = 0.0;
};

inline PairGap common_noise_gap(const CoefficientSet& coeffs, const EmpiricalMeasureFlow& flow,
                                const WeightedSegment& xi, const WeightedSegment& eta,
                                const GridSpec& grid, const NoisePlan& plan,
                                const SimOptions& opts = {}) {
    EnsembleState ex = simulate_frozen(coeffs, flow, {xi}, grid, plan, opts);
    EnsembleState ee = simulate_frozen(coeffs, flow, {eta}, grid, plan, opts);
    Trajectory diff(grid, coeffs.tau, coeffs.d, xi.tail_policy());
    const Trajectory& a = ex.particle(0);
    const Trajectory& b = ee.particle(0);
    for (long i = -grid.n_hist; i <= grid.n_sim; ++i)
        diff.value_mut(i) = a.value(i) - b.value(i);
    std::vector<double> prof = segment_norm_profile(diff);
    PairGap g;
    g.initial_gap = prof.empty() ? 0.0 : prof.front();
    for (double v : prof) g.sup_gap = std::max(g.sup_gap, v);
    return g;
}

}  // namespace memflow
