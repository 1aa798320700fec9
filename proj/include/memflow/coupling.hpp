#pragma once

#include "memflow/engine.hpp"
#include "memflow/measure.hpp"
#include "memflow/stats.hpp"
#include "memflow/testfn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <utility>
#include <vector>

namespace memflow {

struct CouplingConfig {
    double kappa = 0.0;  ///< coupling pull rate; <= 0 selects 4 tau + K1, must end > tau
    double tau0 = 0.0;   ///< target decay rate; <= 0 selects tau / 2, must end in (0, tau)
    double p = 2.0;      ///< gap moment order
    int threads = 1;
};

/// Per-particle change-of-measure bookkeeping. Two Girsanov layers are
/// accumulated with separate sub-accumulators: the measure-swap drift (which
/// turns the mu-frozen dynamics into nu-frozen dynamics) and the coupling
/// drift (which removes the pull added to the auxiliary process). The
/// combined weight is their product. All series are cumulative in time with
/// index 0 equal to zero, and the per-step drifts are stored so any weight
/// can be recomputed from scratch against the noise plan.
struct GirsanovLedger {
    long m = 0;
    long n_steps = 0;
    int d = 1;
    double h = 0.0;
    std::vector<std::vector<double>> log_rbar;     ///< [particle][t], t = 0..n_steps
    std::vector<std::vector<double>> log_rtilde;   ///< [particle][t]
    std::vector<std::vector<double>> int2_bar;     ///< cumulative int |zeta_bar|^2 ds
    std::vector<std::vector<double>> int2_tilde;   ///< cumulative int |zeta_tilde|^2 ds
    std::vector<std::vector<double>> int2_comb;    ///< cumulative int |zeta_bar+zeta_tilde|^2 ds
    std::vector<std::vector<double>> zeta_bar;     ///< [particle][step*d + c]
    std::vector<std::vector<double>> zeta_tilde;   ///< [particle][step*d + c]

    double log_weight(long i, long t) const {
        return log_rbar[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)] +
               log_rtilde[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)];
    }
};

/// One asymptotic-coupling run: X follows the mu-frozen dynamics, Y follows
/// the nu-frozen dynamics plus the pull kappa sigma(Y) sigma(X)^{-1} (X - Y),
/// both driven by the same increments (Y through the bar-transformed ones).
struct CouplingRun {
    EnsembleState x_ensemble;
    EnsembleState y_ensemble;
    GirsanovLedger ledger;
    double kappa = 0.0;
    double tau0 = 0.0;
    double p = 2.0;
    double w2_initial = 0.0;             ///< optimal-pairing initial distance
    std::vector<long> pairing;           ///< nu-initial index coupled to mu-initial i
    std::vector<double> gap_p_weighted;  ///< E_Q ||X_t - Y_t||_tau^p per time
    std::vector<double> ess;             ///< effective sample size of R_t
    std::vector<double> entropy_identity;  ///< E_Q[(1/2) int |zeta|^2], the Girsanov identity
    std::vector<double> entropy_direct;    ///< plain mean of R_t log R_t
    std::vector<std::vector<double>> gap_norms;  ///< [particle][t]
    bool ess_warning = false;            ///< some time dipped below 0.05 M
};

namespace detail {

inline std::vector<EmpiricalMeasure> materialize_flow(const EmpiricalMeasureFlow& flow,
                                                      const GridSpec& grid, bool needed) {
    std::vector<EmpiricalMeasure> out;
    if (needed) {
        out.reserve(static_cast<std::size_t>(grid.n_sim) + 1);
        for (long j = 0; j <= grid.n_sim; ++j) out.push_back(flow.at(j));
    } else {
        out.push_back(flow.at(0));
    }
    return out;
}

}  // namespace detail

/// Runs the asymptotic coupling. The mu and nu initial ensembles are paired
/// by the W2-optimal assignment first, realizing the optimal coupling of the
/// initial laws; flows for both laws must be supplied (frozen flows from the
/// Picard solver for distribution-dependent models, any flow otherwise).
inline CouplingRun run_coupling(const CoefficientSet& coeffs,
                                const std::vector<WeightedSegment>& mu_initials,
                                const std::vector<WeightedSegment>& nu_initials,
                                const EmpiricalMeasureFlow& flow_mu,
                                const EmpiricalMeasureFlow& flow_nu, const GridSpec& grid,
                                const NoisePlan& plan, const CouplingConfig& cfg = {}) {
    require(coeffs.flags.sigma_invertible, ErrorKind::Domain,
            "coupling requires an invertible diffusion");
    require(mu_initials.size() == nu_initials.size(), ErrorKind::UnsupportedCoupling,
            "coupling requires equally sized initial ensembles");
    detail::check_initials(coeffs, grid, mu_initials);
    detail::check_initials(coeffs, grid, nu_initials);
    require(flow_mu.grid() == grid && flow_nu.grid() == grid, ErrorKind::GridMismatch,
            "flow grids differ from the run grid");

    CouplingRun run;
    run.kappa = cfg.kappa > 0.0 ? cfg.kappa : 4.0 * coeffs.tau + coeffs.constants.K1;
    require(run.kappa > coeffs.tau, ErrorKind::Domain, "coupling rate kappa must exceed tau");
    run.tau0 = cfg.tau0 > 0.0 ? cfg.tau0 : coeffs.tau / 2.0;
    require(run.tau0 > 0.0 && run.tau0 < coeffs.tau, ErrorKind::Domain,
            "target rate tau0 must lie in (0, tau)");
    run.p = cfg.p;
    require(run.p >= 1.0, ErrorKind::Domain, "gap moment order p must be >= 1");

    const long m = static_cast<long>(mu_initials.size());
    const int d = coeffs.d;
    const double h = grid.h;
    const double kappa = run.kappa;

    // Optimal initial pairing: realize W2(mu_0, nu_0) by assignment.
    {
        std::vector<double> wt = detail::weight_table(coeffs.tau, grid.n_hist, h);
        std::vector<double> cost(static_cast<std::size_t>(m) * m);
        for (long i = 0; i < m; ++i)
            for (long j = 0; j < m; ++j) {
                double c = detail::pair_cost(mu_initials[static_cast<std::size_t>(i)].view(),
                                             nu_initials[static_cast<std::size_t>(j)].view(),
                                             grid.n_hist, wt);
                cost[static_cast<std::size_t>(i) * m + j] = c * c;
            }
        if (m == 1) {
            run.pairing = {0};
            run.w2_initial = std::sqrt(cost[0]);
        } else {
            AssignmentResult sol = solve_assignment(cost, static_cast<int>(m));
            run.pairing.assign(sol.row_to_col.begin(), sol.row_to_col.end());
            run.w2_initial = std::sqrt(sol.total / static_cast<double>(m));
        }
    }

    std::vector<EmpiricalMeasure> mu_meas =
        detail::materialize_flow(flow_mu, grid, coeffs.flags.distribution_dependent);
    std::vector<EmpiricalMeasure> nu_meas =
        detail::materialize_flow(flow_nu, grid, coeffs.flags.distribution_dependent);
    auto measure_at = [&](const std::vector<EmpiricalMeasure>& ms, long j)
        -> const EmpiricalMeasure& {
        return coeffs.flags.distribution_dependent ? ms[static_cast<std::size_t>(j)]
                                                   : ms.front();
    };

    auto xs = std::make_shared<std::vector<Trajectory>>();
    auto ys = std::make_shared<std::vector<Trajectory>>();
    xs->reserve(static_cast<std::size_t>(m));
    ys->reserve(static_cast<std::size_t>(m));
    for (long i = 0; i < m; ++i) {
        xs->push_back(Trajectory::from_initial(grid, mu_initials[static_cast<std::size_t>(i)]));
        ys->push_back(Trajectory::from_initial(
            grid, nu_initials[static_cast<std::size_t>(run.pairing[static_cast<std::size_t>(i)])]));
    }

    GirsanovLedger& led = run.ledger;
    led.m = m;
    led.n_steps = grid.n_sim;
    led.d = d;
    led.h = h;
    auto zeros_t = [&] {
        return std::vector<std::vector<double>>(
            static_cast<std::size_t>(m),
            std::vector<double>(static_cast<std::size_t>(grid.n_sim) + 1, 0.0));
    };
    led.log_rbar = zeros_t();
    led.log_rtilde = zeros_t();
    led.int2_bar = zeros_t();
    led.int2_tilde = zeros_t();
    led.int2_comb = zeros_t();
    led.zeta_bar.assign(static_cast<std::size_t>(m),
                        std::vector<double>(static_cast<std::size_t>(grid.n_sim) * d, 0.0));
    led.zeta_tilde.assign(static_cast<std::size_t>(m),
                          std::vector<double>(static_cast<std::size_t>(grid.n_sim) * d, 0.0));

    detail::StepContext ctx = detail::make_step_context(coeffs, grid, SimOptions{}, mu_initials.front());
    const bool tame = !coeffs.flags.globally_lipschitz;

    std::vector<std::pair<long, std::string>> failures(static_cast<std::size_t>(m),
                                                       {-1, std::string()});
    parallel_for(m, cfg.threads, [&](long begin, long end) {
        Vec bx(d), b1x_mu(d), b1x_nu(d), by(d), tmp(d);
        Vec zeta_bar(d), zeta_tilde(d), dw(d), dwbar(d), gap(d), w(d);
        Mat sx = Mat::Zero(d, d), sy = Mat::Zero(d, d);
        for (long i = begin; i < end; ++i) {
            try {
                Trajectory& X = (*xs)[static_cast<std::size_t>(i)];
                Trajectory& Y = (*ys)[static_cast<std::size_t>(i)];
                for (long j = 0; j < grid.n_sim; ++j) {
                    const double t = grid.time_at(j);
                    SegmentView segx = X.segment_view_at(j);
                    SegmentView segy = Y.segment_view_at(j);
                    const EmpiricalMeasure& mu_j = measure_at(mu_meas, j);
                    const EmpiricalMeasure& nu_j = measure_at(nu_meas, j);

                    if (ctx.constant_sigma) {
                        sx = ctx.sigma_cached;
                        sy = ctx.sigma_cached;
                    } else {
                        coeffs.sigma(t, segx, sx);
                        coeffs.sigma(t, segy, sy);
                    }
                    Eigen::FullPivLU<Mat> lux(sx);
                    if (!lux.isInvertible()) {
                        std::ostringstream os;
                        os << "sigma singular at particle " << i << ", step " << j;
                        throw Error(ErrorKind::MatrixInversion, os.str());
                    }

                    // X drift under P (mu-frozen), with b0 cap and taming as in
                    // the plain engine.
                    coeffs.drift_b0(t, X.value(j), bx);
                    if (ctx.cap_b0) {
                        double nb = bx.norm();
                        if (nb > ctx.b0_cap) bx *= ctx.b0_cap / nb;
                    }
                    coeffs.drift_b1(t, segx, mu_j, b1x_mu);
                    bx += b1x_mu;
                    if (tame) bx /= 1.0 + h * bx.norm();

                    // Measure-swap drift: zeta_bar removes b1(., mu) - b1(., nu)
                    // along X. Identically zero for distribution-free models.
                    if (coeffs.flags.distribution_dependent) {
                        coeffs.drift_b1(t, segx, nu_j, b1x_nu);
                        tmp = b1x_mu - b1x_nu;
                        Mat a = sx * sx.transpose();
                        zeta_bar = sx.transpose() * Eigen::FullPivLU<Mat>(a).solve(tmp);
                    } else {
                        zeta_bar.setZero();
                    }

                    // Coupling drift and the pull it generates on Y.
                    gap = X.value(j) - Y.value(j);
                    w = lux.solve(gap);
                    zeta_tilde = kappa * w;

                    coeffs.drift_b0(t, Y.value(j), by);
                    if (ctx.cap_b0) {
                        double nb = by.norm();
                        if (nb > ctx.b0_cap) by *= ctx.b0_cap / nb;
                    }
                    coeffs.drift_b1(t, segy, nu_j, tmp);
                    by += tmp;
                    if (tame) by /= 1.0 + h * by.norm();

                    plan.increment_into(dw, static_cast<std::uint64_t>(i),
                                        noise_phase::increments, static_cast<std::uint64_t>(j),
                                        d, h);
                    dwbar = dw + zeta_bar * h;

                    auto xn = X.value_mut(j + 1);
                    xn = X.value(j) + bx * h;
                    xn.noalias() += sx * dw;
                    auto yn = Y.value_mut(j + 1);
                    yn = Y.value(j) + by * h;
                    yn.noalias() += sy * (zeta_tilde * h);
                    yn.noalias() += sy * dwbar;
                    for (int c = 0; c < d; ++c) {
                        if (!std::isfinite(xn[c]) || !std::isfinite(yn[c])) {
                            std::ostringstream os;
                            os << "coupled pair blew up: particle " << i << ", step " << j + 1;
                            throw Error(ErrorKind::BlowUp, os.str());
                        }
                    }

                    // Ledger: log R_bar accumulates against dW, log R_tilde
                    // against the bar-transformed increments.
                    std::size_t si = static_cast<std::size_t>(i);
                    std::size_t sj = static_cast<std::size_t>(j);
                    double zb2 = zeta_bar.squaredNorm();
                    double zt2 = zeta_tilde.squaredNorm();
                    double zc2 = (zeta_bar + zeta_tilde).squaredNorm();
                    led.log_rbar[si][sj + 1] =
                        led.log_rbar[si][sj] - zeta_bar.dot(dw) - 0.5 * zb2 * h;
                    led.log_rtilde[si][sj + 1] =
                        led.log_rtilde[si][sj] - zeta_tilde.dot(dwbar) - 0.5 * zt2 * h;
                    led.int2_bar[si][sj + 1] = led.int2_bar[si][sj] + zb2 * h;
                    led.int2_tilde[si][sj + 1] = led.int2_tilde[si][sj] + zt2 * h;
                    led.int2_comb[si][sj + 1] = led.int2_comb[si][sj] + zc2 * h;
                    for (int c = 0; c < d; ++c) {
                        led.zeta_bar[si][sj * d + c] = zeta_bar[c];
                        led.zeta_tilde[si][sj * d + c] = zeta_tilde[c];
                    }
                }
            } catch (const Error& e) {
                failures[static_cast<std::size_t>(i)] = {i, e.what()};
            }
        }
    });
    for (const auto& f : failures)
        if (f.first >= 0) throw Error(ErrorKind::BlowUp, f.second);

    run.x_ensemble = EnsembleState(grid, coeffs.tau, d, EnsembleMode::Frozen, xs);
    run.y_ensemble = EnsembleState(grid, coeffs.tau, d, EnsembleMode::Frozen, ys);

    // Per-particle weighted gap norms via the difference sweep.
    run.gap_norms.assign(static_cast<std::size_t>(m), {});
    parallel_for(m, cfg.threads, [&](long begin, long end) {
        for (long i = begin; i < end; ++i) {
            Trajectory diff(grid, coeffs.tau, d, mu_initials.front().tail_policy());
            const Trajectory& X = (*xs)[static_cast<std::size_t>(i)];
            const Trajectory& Y = (*ys)[static_cast<std::size_t>(i)];
            for (long t = -grid.n_hist; t <= grid.n_sim; ++t)
                diff.value_mut(t) = X.value(t) - Y.value(t);
            run.gap_norms[static_cast<std::size_t>(i)] = segment_norm_profile(diff);
        }
    });

    // Weighted per-time statistics in fixed index order.
    long n_t = grid.n_sim + 1;
    run.gap_p_weighted.assign(static_cast<std::size_t>(n_t), 0.0);
    run.ess.assign(static_cast<std::size_t>(n_t), 0.0);
    run.entropy_identity.assign(static_cast<std::size_t>(n_t), 0.0);
    run.entropy_direct.assign(static_cast<std::size_t>(n_t), 0.0);
    for (long t = 0; t < n_t; ++t) {
        double max_log = -std::numeric_limits<double>::infinity();
        for (long i = 0; i < m; ++i) max_log = std::max(max_log, led.log_weight(i, t));
        double sw = 0.0, sw2 = 0.0, sgap = 0.0, sent = 0.0, sdirect = 0.0;
        for (long i = 0; i < m; ++i) {
            double lw = led.log_weight(i, t);
            double wshift = std::exp(lw - max_log);
            sw += wshift;
            sw2 += wshift * wshift;
            sgap += wshift * std::pow(run.gap_norms[static_cast<std::size_t>(i)]
                                                   [static_cast<std::size_t>(t)],
                                      run.p);
            sent += wshift * 0.5 * led.int2_comb[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)];
            double r = std::exp(lw);
            sdirect += r * lw;
        }
        run.gap_p_weighted[static_cast<std::size_t>(t)] = sgap / sw;
        run.entropy_identity[static_cast<std::size_t>(t)] = sent / sw;
        run.entropy_direct[static_cast<std::size_t>(t)] = sdirect / static_cast<double>(m);
        run.ess[static_cast<std::size_t>(t)] = sw * sw / sw2;
        if (t > 0 && run.ess[static_cast<std::size_t>(t)] < 0.05 * static_cast<double>(m))
            run.ess_warning = true;
    }
    return run;
}

// ---------------------------------------------------------------------------
// Decay-rate fitting
// ---------------------------------------------------------------------------

struct DecayFit {
    double rate = 0.0;       ///< slope of log gap moment vs t on the tail half
    double intercept = 0.0;
    double ci_lo = 0.0;      ///< bootstrap CI of the rate
    double ci_hi = 0.0;
    long n_points = 0;
    bool degenerate = false; ///< all-zero gaps: rate = -inf by convention
};

/// Least-squares decay rate of the Q-weighted gap moment of order p on the
/// tail half of [0, T], with a percentile bootstrap CI over particles.
inline DecayFit decay_fit(const CouplingRun& run, double p, const NoisePlan& plan,
                          long bootstrap_replicates = 200) {
    const GridSpec& grid = run.x_ensemble.grid();
    const long m = run.x_ensemble.size();
    long t_from = grid.n_sim / 2;

    auto weighted_log_gap = [&](const std::vector<long>& idx, long t) -> double {
        double max_log = -std::numeric_limits<double>::infinity();
        for (long i : idx)
            max_log = std::max(max_log, run.ledger.log_weight(i, t));
        double sw = 0.0, sg = 0.0;
        for (long i : idx) {
            double w = std::exp(run.ledger.log_weight(i, t) - max_log);
            sw += w;
            sg += w * std::pow(run.gap_norms[static_cast<std::size_t>(i)]
                                            [static_cast<std::size_t>(t)],
                               p);
        }
        double v = sg / sw;
        return v > 0.0 ? std::log(v) : -std::numeric_limits<double>::infinity();
    };

    std::vector<long> all(static_cast<std::size_t>(m));
    for (long i = 0; i < m; ++i) all[static_cast<std::size_t>(i)] = i;

    std::vector<double> ts, ys;
    for (long t = t_from; t <= grid.n_sim; ++t) {
        double y = weighted_log_gap(all, t);
        if (std::isfinite(y)) {
            ts.push_back(grid.time_at(t));
            ys.push_back(y);
        }
    }

    DecayFit fit;
    if (ts.size() < 10) {
        fit.degenerate = true;
        fit.rate = -std::numeric_limits<double>::infinity();
        return fit;
    }
    LineFit lf = fit_line(ts, ys);
    fit.rate = lf.slope;
    fit.intercept = lf.intercept;
    fit.n_points = lf.n;

    std::mt19937_64 rng = plan.sequential(noise_phase::bootstrap);
    BootstrapCI ci = bootstrap_ci(m, bootstrap_replicates, 0.95, rng,
                                  [&](const std::vector<long>& idx) {
                                      std::vector<double> bys;
                                      std::vector<double> bts;
                                      for (long t = t_from; t <= grid.n_sim; ++t) {
                                          double y = weighted_log_gap(idx, t);
                                          if (std::isfinite(y)) {
                                              bts.push_back(grid.time_at(t));
                                              bys.push_back(y);
                                          }
                                      }
                                      if (bts.size() < 3)
                                          return std::numeric_limits<double>::quiet_NaN();
                                      return fit_line(bts, bys).slope;
                                  });
    fit.ci_lo = ci.lo;
    fit.ci_hi = ci.hi;
    return fit;
}

// ---------------------------------------------------------------------------
// Asymptotic log-Harnack diagnostics
// ---------------------------------------------------------------------------

struct LogHarnackPoint {
    double t = 0.0;
    double lhs = 0.0;        ///< E_Q[log f(Y_t)]  (estimates P_t log f(nu))
    double log_ptf = 0.0;    ///< log E[f(X_t)]    (estimates log P_t f(mu))
    double defect = 0.0;     ///< lhs - log_ptf
    double stderr_ = 0.0;
    double ess = 0.0;
    double entropy_identity = 0.0;
    double w2_initial = 0.0;
    double w2sq_term = 0.0;  ///< W2(mu, nu)^2, the Wasserstein cost scale
    double grad_term = 0.0;  ///< e^{-tau0 t} ||grad log f||_inf W2(mu, nu)
    bool ess_warning = false;
};

/// Evaluates both sides of the asymptotic log-Harnack comparison at one grid
/// time. The left side applies the ledger weights to log f along Y (whose
/// weighted law is the nu-started one); the right side is the plain average
/// of f along X plus the structural cost terms reported for context.
inline LogHarnackPoint log_harnack_defect(const CouplingRun& run, const TestFunction& f,
                                          long t_index) {
    const GridSpec& grid = run.x_ensemble.grid();
    require(t_index >= 0 && t_index <= grid.n_sim, ErrorKind::OutOfRange,
            "time outside [0, T]");
    require(f.strictly_positive(), ErrorKind::Domain,
            "log-Harnack needs a strictly positive test function");
    const long m = run.x_ensemble.size();

    std::vector<double> logf_y(static_cast<std::size_t>(m));
    std::vector<double> weights(static_cast<std::size_t>(m));
    std::vector<double> f_x(static_cast<std::size_t>(m));
    double max_log = -std::numeric_limits<double>::infinity();
    for (long i = 0; i < m; ++i)
        max_log = std::max(max_log, run.ledger.log_weight(i, t_index));
    for (long i = 0; i < m; ++i) {
        double fy = f(run.y_ensemble.particle(i).segment_view_at(t_index));
        require(fy > 0.0, ErrorKind::Domain, "test function produced a nonpositive sample");
        logf_y[static_cast<std::size_t>(i)] = std::log(fy);
        weights[static_cast<std::size_t>(i)] =
            std::exp(run.ledger.log_weight(i, t_index) - max_log);
        f_x[static_cast<std::size_t>(i)] = f(run.x_ensemble.particle(i).segment_view_at(t_index));
    }

    WeightedMean lhs = weighted_mean(logf_y, weights);
    MeanStderr fx = mean_stderr(f_x);
    require(fx.mean > 0.0, ErrorKind::Numeric, "mean of f along X is not positive");

    LogHarnackPoint pt;
    pt.t = grid.time_at(t_index);
    pt.lhs = lhs.mean;
    pt.log_ptf = std::log(fx.mean);
    pt.defect = pt.lhs - pt.log_ptf;
    pt.stderr_ = std::sqrt(lhs.stderr_ * lhs.stderr_ +
                           (fx.stderr_ / fx.mean) * (fx.stderr_ / fx.mean));
    pt.ess = lhs.ess;
    pt.entropy_identity = run.entropy_identity[static_cast<std::size_t>(t_index)];
    pt.w2_initial = run.w2_initial;
    pt.w2sq_term = run.w2_initial * run.w2_initial;
    double gls = f.grad_log_sup();
    pt.grad_term = std::isfinite(gls)
                       ? std::exp(-run.tau0 * pt.t) * gls * run.w2_initial
                       : std::numeric_limits<double>::infinity();
    pt.ess_warning = lhs.ess < 0.05 * static_cast<double>(m);
    return pt;
}

/// Structural magnitude check of the measure-swap drift: every recorded
/// |zeta_bar_s|^2 must stay below
///   factor * K2 * ||sigma^{-1}||^2 * W2(mu_s, nu_s)^2
/// with the model's declared constants (factor 2 matches the builtin
/// catalog's Cauchy split). Returns the worst defect, <= 0 when the bound
/// holds everywhere.
struct ZetaBarBound {
    double max_defect = -std::numeric_limits<double>::infinity();
    double max_zeta_sq = 0.0;
};

inline ZetaBarBound zeta_bar_bound_check(const CouplingRun& run, const CoefficientSet& coeffs,
                                         const EmpiricalMeasureFlow& flow_mu,
                                         const EmpiricalMeasureFlow& flow_nu,
                                         double factor = 2.0, int threads = 1) {
    const GridSpec& grid = run.x_ensemble.grid();
    std::vector<double> w2 = w2_profile(flow_mu, flow_nu, threads);
    ZetaBarBound out;
    const double scale = factor * coeffs.constants.K2 * coeffs.constants.sigma_inv_norm *
                         coeffs.constants.sigma_inv_norm;
    for (long i = 0; i < run.ledger.m; ++i) {
        for (long j = 0; j < run.ledger.n_steps; ++j) {
            double z2 = 0.0;
            for (int c = 0; c < run.ledger.d; ++c) {
                double z = run.ledger.zeta_bar[static_cast<std::size_t>(i)]
                                              [static_cast<std::size_t>(j) * run.ledger.d + c];
                z2 += z * z;
            }
            double bound = scale * w2[static_cast<std::size_t>(j)] * w2[static_cast<std::size_t>(j)];
            out.max_defect = std::max(out.max_defect, z2 - bound);
            out.max_zeta_sq = std::max(out.max_zeta_sq, z2);
        }
    }
    (void)grid;
    return out;
}

/// Weighted mean and variance of Y_t(0) under the combined weights, used to
/// compare the Y-under-Q marginals with the nu-started law.
struct WeightedMarginal {
    Vec mean;
    Vec var;
    double ess = 0.0;
    double mean_stderr = 0.0;
};

inline WeightedMarginal y_marginal_under_q(const CouplingRun& run, long t_index) {
    const long m = run.y_ensemble.size();
    const int d = run.y_ensemble.d();
    double max_log = -std::numeric_limits<double>::infinity();
    for (long i = 0; i < m; ++i)
        max_log = std::max(max_log, run.ledger.log_weight(i, t_index));
    double sw = 0.0, sw2 = 0.0;
    Vec s1 = Vec::Zero(d), s2 = Vec::Zero(d);
    for (long i = 0; i < m; ++i) {
        double w = std::exp(run.ledger.log_weight(i, t_index) - max_log);
        auto y = run.y_ensemble.particle(i).value(t_index);
        sw += w;
        sw2 += w * w;
        s1 += w * y;
        s2 += w * y.cwiseProduct(y);
    }
    WeightedMarginal out;
    out.mean = s1 / sw;
    out.var = s2 / sw - out.mean.cwiseProduct(out.mean);
    out.ess = sw * sw / sw2;
    // delta-method spread of the weighted mean, first component scale
    double acc = 0.0;
    for (long i = 0; i < m; ++i) {
        double w = std::exp(run.ledger.log_weight(i, t_index) - max_log) / sw;
        double dev = run.y_ensemble.particle(i).value(t_index)[0] - out.mean[0];
        acc += w * w * dev * dev;
    }
    out.mean_stderr = std::sqrt(acc);
    return out;
}

// ---------------------------------------------------------------------------
// Gradient estimate diagnostic
// ---------------------------------------------------------------------------

struct GradientCheckRow {
    double t = 0.0;
    double fd = 0.0;        ///< finite-difference directional derivative of P_t f
    double fd_stderr = 0.0;
    double var_term = 0.0;  ///< sqrt(P_t f^2 - (P_t f)^2)
    double residual = 0.0;  ///< fd - c1 * var_term
};

struct GradientCheckResult {
    std::vector<GradientCheckRow> rows;
    double c1 = 0.0;          ///< fitted nonnegative loading on the variance term
    double c2 = 0.0;          ///< fitted nonnegative loading on e^{-tau0 t}
    double fitted_rate = 0.0; ///< decay rate of the positive residual tail
    bool rate_defined = false;
    double epsilon = 0.0;
    bool unstable = false;    ///< finite-difference noise dominates the signal
};

/// Common-noise finite-difference check of the gradient estimate: compares
/// the directional derivative of P_t f at xi against the variance term plus
/// an exponentially decaying remainder. The direction is normalized in the
/// weighted path norm; the model must be distribution-free (the semigroup of
/// the path-dependent equation is probed, so the flow argument is inert).
inline GradientCheckResult gradient_estimate_check(const CoefficientSet& coeffs,
                                                   const TestFunction& f,
                                                   const WeightedSegment& xi,
                                                   const WeightedSegment& direction,
                                                   const GridSpec& grid, const NoisePlan& plan,
                                                   long n_particles, double epsilon,
                                                   double tau0 = 0.0, int threads = 1) {
    require(!coeffs.flags.distribution_dependent, ErrorKind::Domain,
            "gradient check probes the distribution-free semigroup");
    require(epsilon > 0.0, ErrorKind::Domain, "epsilon must be > 0");
    double t0 = tau0 > 0.0 ? tau0 : coeffs.tau / 2.0;

    double dn = tau_norm(direction.view());
    require(dn > 0.0, ErrorKind::Domain, "direction must be nonzero");
    std::vector<double> dir_flat(direction.raw());
    for (double& v : dir_flat) v /= dn;

    auto shifted = [&](double sgn) {
        std::vector<double> vals(xi.raw());
        for (std::size_t k = 0; k < vals.size(); ++k)
            vals[k] += sgn * epsilon * dir_flat[k];
        return WeightedSegment(xi.tau(), xi.h(), xi.d(), std::move(vals), xi.tail_policy());
    };
    WeightedSegment plus = shifted(1.0), minus = shifted(-1.0);

    std::vector<WeightedSegment> init_p(static_cast<std::size_t>(n_particles), plus);
    std::vector<WeightedSegment> init_m(static_cast<std::size_t>(n_particles), minus);
    std::vector<WeightedSegment> init_0(static_cast<std::size_t>(n_particles), xi);

    EmpiricalMeasureFlow flow = EmpiricalMeasureFlow::constant(
        grid, EmpiricalMeasure::from_segments({xi}));
    SimOptions opts;
    opts.threads = threads;
    EnsembleState ep = simulate_frozen(coeffs, flow, init_p, grid, plan, opts);
    EnsembleState em = simulate_frozen(coeffs, flow, init_m, grid, plan, opts);
    EnsembleState e0 = simulate_frozen(coeffs, flow, init_0, grid, plan, opts);

    GradientCheckResult res;
    res.epsilon = epsilon;
    long n_t = grid.n_sim + 1;
    std::vector<double> fd(static_cast<std::size_t>(n_t)), vterm(static_cast<std::size_t>(n_t)),
        expb(static_cast<std::size_t>(n_t)), fd_se(static_cast<std::size_t>(n_t));
    for (long t = 0; t < n_t; ++t) {
        std::vector<double> diffs(static_cast<std::size_t>(n_particles));
        double s_f = 0.0, s_f2 = 0.0;
        for (long i = 0; i < n_particles; ++i) {
            double fp = f(ep.particle(i).segment_view_at(t));
            double fm = f(em.particle(i).segment_view_at(t));
            diffs[static_cast<std::size_t>(i)] = (fp - fm) / (2.0 * epsilon);
            double f0 = f(e0.particle(i).segment_view_at(t));
            s_f += f0;
            s_f2 += f0 * f0;
        }
        MeanStderr ms = mean_stderr(diffs);
        fd[static_cast<std::size_t>(t)] = ms.mean;
        fd_se[static_cast<std::size_t>(t)] = ms.stderr_;
        double mean_f = s_f / static_cast<double>(n_particles);
        double var_f = std::max(0.0, s_f2 / static_cast<double>(n_particles) - mean_f * mean_f);
        vterm[static_cast<std::size_t>(t)] = std::sqrt(var_f);
        expb[static_cast<std::size_t>(t)] = std::exp(-t0 * grid.time_at(t));
    }

    TwoBasisFit nn = nnls_two_basis(fd, vterm, expb);
    res.c1 = nn.c1;
    res.c2 = nn.c2;

    double sig = 0.0, noise = 0.0;
    res.rows.resize(static_cast<std::size_t>(n_t));
    std::vector<double> rt, rv;
    for (long t = 0; t < n_t; ++t) {
        GradientCheckRow& row = res.rows[static_cast<std::size_t>(t)];
        row.t = grid.time_at(t);
        row.fd = fd[static_cast<std::size_t>(t)];
        row.fd_stderr = fd_se[static_cast<std::size_t>(t)];
        row.var_term = vterm[static_cast<std::size_t>(t)];
        row.residual = row.fd - res.c1 * row.var_term;
        sig += std::abs(row.fd);
        noise += row.fd_stderr;
        double floor = std::max(1e-12, 3.0 * row.fd_stderr);
        if (row.residual > floor) {
            rt.push_back(row.t);
            rv.push_back(std::log(row.residual));
        }
    }
    res.unstable = sig < 3.0 * noise;
    if (rt.size() >= 5) {
        LineFit lf = fit_line(rt, rv);
        res.fitted_rate = lf.slope;
        res.rate_defined = true;
    }
    return res;
}

}  // namespace memflow
