#pragma once

#include "memflow/engine.hpp"
#include "memflow/measure.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

namespace memflow {

struct PicardConfig {
    double tol = 1e-3;        ///< stopping threshold on the iterate gap
    long max_iter = 20;       ///< maximum number of map applications
    double theta = 0.0;       ///< flow-metric rate; <= 0 selects 2 (K1 + K2 + 1)
    bool common_noise = true; ///< reuse one noise plan across iterations
    int threads = 1;
};

/// Iteration record of the fixed-point map: the flow iterates, the per-time
/// W2 profiles between consecutive iterates, the weighted distances
/// d_j = W_{2,theta}(flow_{j+1}, flow_j), and their ratios. Ratios are only
/// defined above a noise floor of tol * 1e-3. The first recorded distance
/// compares the second and first realized flows; the constant initialization
/// flow participates only as the driver of the first iteration.
struct PicardTrace {
    double theta_used = 0.0;
    std::vector<EmpiricalMeasureFlow> flows;        ///< realized flows, iteration order
    std::vector<std::vector<double>> w2_profiles;   ///< per distance, one W2 per grid time
    std::vector<double> distances;
    std::vector<double> ratios;                     ///< NaN where below the noise floor
    bool converged = false;
    long iterations = 0;                            ///< distances computed
    bool certified = false;                         ///< one extra application stayed under tol
    double certified_distance = -1.0;
};

struct PicardResult {
    EmpiricalMeasureFlow flow;
    PicardTrace trace;
};

/// Solves the distribution self-consistency by iterating the map that sends
/// a candidate flow to the law flow of the SDE driven with that flow frozen.
/// The initial flow freezes gamma at every time; with common_noise one noise
/// plan is reused across iterations so the iterate gap is not masked by
/// Monte Carlo noise. Non-convergence is reported in the trace, never thrown.
inline PicardResult solve_fixed_point(const CoefficientSet& coeffs, const EmpiricalMeasure& gamma,
                                      const GridSpec& grid, const PicardConfig& cfg,
                                      const NoisePlan& plan) {
    require(cfg.tol > 0.0, ErrorKind::Domain, "tol must be > 0");
    require(cfg.max_iter >= 1, ErrorKind::Domain, "max_iter must be >= 1");
    require(gamma.n_nodes() == grid.n_hist + 1, ErrorKind::GridMismatch,
            "gamma atoms do not cover the grid history window");
    double m2 = moment_norm(gamma, 2.0);
    require(std::isfinite(m2), ErrorKind::Domain,
            "initial law must have a finite second moment");

    // gamma's atoms double as the initial segments of every iteration
    std::vector<WeightedSegment> initials;
    initials.reserve(static_cast<std::size_t>(gamma.size()));
    for (long i = 0; i < gamma.size(); ++i) {
        const SegmentView& v = gamma.atom(i);
        std::vector<double> flat(v.data, v.data + static_cast<std::size_t>(v.n_nodes) * v.d);
        initials.emplace_back(v.tau, v.h, v.d, std::move(flat), v.tail);
    }

    PicardTrace trace;
    trace.theta_used = cfg.theta > 0.0
                           ? cfg.theta
                           : 2.0 * (coeffs.constants.K1 + coeffs.constants.K2 + 1.0);

    EmpiricalMeasureFlow current = EmpiricalMeasureFlow::constant(grid, gamma);
    for (long iter = 1; iter <= cfg.max_iter; ++iter) {
        SimOptions opts;
        opts.threads = cfg.threads;
        opts.phase = noise_phase::increments +
                     (cfg.common_noise ? 0 : static_cast<std::uint64_t>(iter));
        EnsembleState ens = simulate_frozen(coeffs, current, initials, grid, plan, opts);
        EmpiricalMeasureFlow flow = ens.flow();
        if (!trace.flows.empty()) {
            std::vector<double> profile = w2_profile(flow, trace.flows.back(), cfg.threads);
            double d = theta_weighted_max(profile, grid, trace.theta_used);
            if (!trace.distances.empty()) {
                double prev = trace.distances.back();
                trace.ratios.push_back(prev > cfg.tol * 1e-3
                                           ? d / prev
                                           : std::numeric_limits<double>::quiet_NaN());
            }
            trace.w2_profiles.push_back(std::move(profile));
            trace.distances.push_back(d);
            trace.iterations = static_cast<long>(trace.distances.size());
            trace.flows.push_back(flow);
            current = trace.flows.back();
            if (d < cfg.tol) {
                trace.converged = true;
                break;
            }
        } else {
            trace.flows.push_back(flow);
            current = trace.flows.back();
        }
    }

    if (trace.converged) {
        // certify the returned flow with one extra application of the map
        SimOptions opts;
        opts.threads = cfg.threads;
        opts.phase = noise_phase::increments +
                     (cfg.common_noise ? 0
                                       : static_cast<std::uint64_t>(cfg.max_iter) + 1);
        EnsembleState extra = simulate_frozen(coeffs, current, initials, grid, plan, opts);
        std::vector<double> profile = w2_profile(extra.flow(), current, cfg.threads);
        trace.certified_distance = theta_weighted_max(profile, grid, trace.theta_used);
        trace.certified = trace.certified_distance < cfg.tol;
    }

    return PicardResult{current, std::move(trace)};
}

/// Per-theta contraction summary recomputed from the stored W2 profiles.
struct ContractionRow {
    double theta = 0.0;
    double max_ratio = 0.0;      ///< max over defined ratios; NaN when degenerate
    long iters_to_tol = -1;      ///< first iterate gap below tol, -1 if never
    bool degenerate = false;     ///< no ratio above the noise floor
};

struct ContractionReport {
    std::vector<ContractionRow> rows;
    double smallest_contractive_theta = -1.0;  ///< smallest grid theta with max ratio < 1
};

inline ContractionReport contraction_report(const PicardTrace& trace, const GridSpec& grid,
                                            double tol, const std::vector<double>& theta_grid) {
    require(trace.w2_profiles.size() >= 3, ErrorKind::Domain,
            "contraction report needs at least 3 recorded iterations");
    ContractionReport report;
    for (double theta : theta_grid) {
        require(theta >= 0.0, ErrorKind::Domain, "theta must be >= 0");
        std::vector<double> ds;
        ds.reserve(trace.w2_profiles.size());
        for (const std::vector<double>& prof : trace.w2_profiles)
            ds.push_back(theta_weighted_max(prof, grid, theta));
        ContractionRow row;
        row.theta = theta;
        double max_ratio = -1.0;
        for (std::size_t j = 0; j + 1 < ds.size(); ++j) {
            if (ds[j] > tol * 1e-3) max_ratio = std::max(max_ratio, ds[j + 1] / ds[j]);
        }
        row.degenerate = max_ratio < 0.0;
        row.max_ratio = row.degenerate ? std::numeric_limits<double>::quiet_NaN() : max_ratio;
        for (std::size_t j = 0; j < ds.size(); ++j) {
            if (ds[j] < tol) {
                row.iters_to_tol = static_cast<long>(j) + 1;
                break;
            }
        }
        report.rows.push_back(row);
    }
    for (const ContractionRow& row : report.rows) {
        if (row.degenerate || !(row.max_ratio < 1.0)) continue;
        if (report.smallest_contractive_theta < 0.0 ||
            row.theta < report.smallest_contractive_theta)
            report.smallest_contractive_theta = row.theta;
    }
    return report;
}

}  // namespace memflow
