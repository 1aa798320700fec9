#pragma once

#include "memflow/coefficients.hpp"
#include "memflow/coupling.hpp"
#include "memflow/engine.hpp"
#include "memflow/measure.hpp"
#include "memflow/picard.hpp"
#include "memflow/plot.hpp"
#include "memflow/serialize.hpp"
#include "memflow/testfn.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <iostream>
#include <cmath>
#include <filesystem>
#include <initializer_list>
#include <optional>
#include <string>
#include <vector>

namespace memflow {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config schema
// ---------------------------------------------------------------------------

inline const char* kConfigSchema = "memflow/run-config/v1";
inline const char* kSummarySchema = "memflow/run-summary/v1";

inline const std::vector<std::string>& experiment_names() {
    static const std::vector<std::string> names = {
        "simulate", "picard",      "couple",            "lipschitz",
        "moments",  "exp-moments", "check-assumptions", "lpq-diagnose"};
    return names;
}

namespace detail {

inline void check_keys(const json& obj, std::initializer_list<const char*> allowed,
                       const std::string& ctx) {
    require(obj.is_object(), ErrorKind::Config, ctx + " must be a JSON object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed) ok = ok || it.key() == k;
        require(ok, ErrorKind::Config, "unknown key '" + it.key() + "' in " + ctx);
    }
}

inline double num_field(const json& obj, const char* key, double dflt) {
    if (!obj.contains(key)) return dflt;
    require(obj.at(key).is_number(), ErrorKind::Config,
            std::string("field '") + key + "' must be a number");
    return obj.at(key).get<double>();
}

inline bool bool_field(const json& obj, const char* key, bool dflt) {
    if (!obj.contains(key)) return dflt;
    require(obj.at(key).is_boolean(), ErrorKind::Config,
            std::string("field '") + key + "' must be a boolean");
    return obj.at(key).get<bool>();
}

}  // namespace detail

/// Initial-segment descriptors: a closed vocabulary so runs are fully
/// reproducible from the config echo.
///   {"kind": "zero"}
///   {"kind": "point", "value": [x_1, ..., x_d]}
///   {"kind": "gaussian_points", "mean": [...], "sd": s}   (constant paths)
/// plus an optional "tail": "constant-extension" | "zero".
inline json resolve_initial_spec(const json& spec, int d) {
    detail::check_keys(spec, {"kind", "value", "mean", "sd", "tail"}, "initial descriptor");
    json out;
    std::string kind = spec.value("kind", std::string("zero"));
    require(kind == "zero" || kind == "point" || kind == "gaussian_points", ErrorKind::Config,
            "unknown initial kind '" + kind + "'");
    out["kind"] = kind;
    auto vec_field = [&](const char* key, double dflt) {
        std::vector<double> v(static_cast<std::size_t>(d), dflt);
        if (spec.contains(key)) {
            v = spec.at(key).get<std::vector<double>>();
            require(static_cast<int>(v.size()) == d, ErrorKind::Config,
                    std::string("initial '") + key + "' has wrong dimension");
        }
        return v;
    };
    if (kind == "point") out["value"] = vec_field("value", 0.0);
    if (kind == "gaussian_points") {
        out["mean"] = vec_field("mean", 0.0);
        out["sd"] = detail::num_field(spec, "sd", 1.0);
        require(out["sd"].get<double>() >= 0.0, ErrorKind::Config, "initial sd must be >= 0");
    }
    std::string tail = spec.value("tail", std::string("constant-extension"));
    require(tail == "constant-extension" || tail == "zero", ErrorKind::Config,
            "unknown tail policy '" + tail + "'");
    out["tail"] = tail;
    return out;
}

inline std::vector<WeightedSegment> sample_initials(const json& resolved, long m, double tau,
                                                    const GridSpec& grid, int d,
                                                    const NoisePlan& plan,
                                                    std::uint64_t phase_salt) {
    std::string kind = resolved.at("kind").get<std::string>();
    TailPolicy tail = resolved.at("tail").get<std::string>() == "zero"
                          ? TailPolicy::Zero
                          : TailPolicy::ConstantExtension;
    std::vector<WeightedSegment> out;
    out.reserve(static_cast<std::size_t>(m));
    if (kind == "zero" || kind == "point") {
        Vec x = Vec::Zero(d);
        if (kind == "point") {
            auto v = resolved.at("value").get<std::vector<double>>();
            x = Eigen::Map<const Vec>(v.data(), d);
        }
        WeightedSegment seg = point_path(x, tau, grid, tail);
        out.assign(static_cast<std::size_t>(m), seg);
        return out;
    }
    auto mean = resolved.at("mean").get<std::vector<double>>();
    double sd = resolved.at("sd").get<double>();
    for (long i = 0; i < m; ++i) {
        Vec x(d);
        for (int c = 0; c < d; ++c)
            x[c] = mean[static_cast<std::size_t>(c)] +
                   sd * plan.gaussian(static_cast<std::uint64_t>(i),
                                      noise_phase::initial_sampling + phase_salt, 0,
                                      static_cast<std::uint64_t>(c));
        out.push_back(point_path(x, tau, grid, tail));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Run outcome
// ---------------------------------------------------------------------------

struct PropertyCheck {
    std::string name;
    bool pass = true;
    json detail;
};

struct RunOutcome {
    json summary;
    fs::path out_dir;
    bool property_failed = false;
    long wall_clock_ms = 0;  ///< recorded in run_meta.json, never in the summary
};

namespace detail {

struct RunContext {
    json config;  ///< fully resolved echo
    CoefficientSet model;
    GridSpec grid;
    long particles = 0;
    NoisePlan plan{0};
    fs::path out;
    int threads = 1;
    bool plots = false;
    std::vector<PropertyCheck> checks;
    json metrics;
    std::vector<std::string> artifacts;

    void check(const std::string& name, bool pass, json info = json::object()) {
        checks.push_back(PropertyCheck{name, pass, std::move(info)});
    }

    void artifact(const fs::path& rel) { artifacts.push_back(rel.string()); }
};

inline void epr_check(RunContext& ctx, const EnsembleState& ens, double p,
                      const char* name = "pathwise_shift_inequality") {
    ShiftSweep sweep = epr_sweep(ens, p, ctx.threads);
    ctx.check(name, sweep.violations == 0,
              json{{"p", p},
                   {"violations", sweep.violations},
                   {"max_defect", sweep.max_defect}});
}

inline std::vector<double> time_axis(const GridSpec& grid) {
    std::vector<double> t(static_cast<std::size_t>(grid.n_sim) + 1);
    for (long i = 0; i <= grid.n_sim; ++i) t[static_cast<std::size_t>(i)] = grid.time_at(i);
    return t;
}

// --------------------------- simulate --------------------------------------

inline void run_simulate(RunContext& ctx) {
    const json& p = ctx.config.at("params");
    std::string mode = p.at("mode").get<std::string>();
    std::vector<WeightedSegment> initials = sample_initials(
        p.at("initial"), ctx.particles, ctx.model.tau, ctx.grid, ctx.model.d, ctx.plan, 0);

    SimOptions opts;
    opts.threads = ctx.threads;
    EnsembleState ens;
    if (mode == "interacting") {
        InteractingResult res = simulate_interacting(ctx.model, initials, ctx.grid, ctx.plan, opts);
        ens = res.ensemble;
    } else {
        EmpiricalMeasureFlow flow = EmpiricalMeasureFlow::constant(
            ctx.grid, EmpiricalMeasure::from_segments(initials));
        ens = simulate_frozen(ctx.model, flow, initials, ctx.grid, ctx.plan, opts);
    }

    double epr_p = p.at("epr_p").get<double>();
    epr_check(ctx, ens, epr_p);

    auto rows = moment_curve(ens, 2.0);
    CsvTable curve;
    curve.header = {"t", "norm2_mean", "norm2_stderr", "sup_norm2_mean", "sup_norm2_stderr"};
    for (const auto& r : rows)
        curve.rows.push_back({r.t, r.norm_k.mean, r.norm_k.stderr_, r.sup_norm_k.mean,
                              r.sup_norm_k.stderr_});
    write_csv(ctx.out / "moments_k2.csv", curve);
    ctx.artifact("moments_k2.csv");

    EmpiricalMeasure last = ens.measure_at(ctx.grid.n_sim);
    ctx.metrics["final_moment_norm_2"] = moment_norm(last, 2.0);
    ctx.metrics["final_mean"] =
        std::vector<double>(last.mean_at_zero().data(),
                            last.mean_at_zero().data() + ctx.model.d);
    ctx.metrics["mode"] = mode;

    if (ctx.config.at("write_trajectories").get<bool>()) {
        write_ensemble(ctx.out / "ensemble", ens, ctx.config.at("model"),
                       ctx.plan.master_seed());
        ctx.artifact("ensemble/manifest.json");
    }
    if (ctx.plots) {
        std::vector<double> m1, m2;
        for (const auto& r : rows) {
            m1.push_back(r.norm_k.mean);
            m2.push_back(r.sup_norm_k.mean);
        }
        svg_line_plot(ctx.out / "moments_k2.svg", "segment norm moments (k=2)",
                      time_axis(ctx.grid), {{"E||X_t||^2", m1}, {"E sup ||X_s||^2", m2}});
    }
}

// --------------------------- picard ----------------------------------------

inline void run_picard(RunContext& ctx) {
    const json& p = ctx.config.at("params");
    std::vector<WeightedSegment> atoms = sample_initials(
        p.at("initial"), ctx.particles, ctx.model.tau, ctx.grid, ctx.model.d, ctx.plan, 0);
    EmpiricalMeasure gamma = EmpiricalMeasure::from_segments(atoms);

    PicardConfig cfg;
    cfg.tol = p.at("tol").get<double>();
    cfg.max_iter = p.at("max_iter").get<long>();
    cfg.theta = p.at("theta").get<double>();
    cfg.common_noise = p.at("common_noise").get<bool>();
    cfg.threads = ctx.threads;

    PicardResult res = solve_fixed_point(ctx.model, gamma, ctx.grid, cfg, ctx.plan);
    const PicardTrace& tr = res.trace;

    CsvTable trace;
    trace.header = {"iter", "distance", "ratio"};
    for (std::size_t j = 0; j < tr.distances.size(); ++j)
        trace.rows.push_back({static_cast<double>(j + 1), tr.distances[j],
                              j > 0 ? tr.ratios[j - 1]
                                    : std::numeric_limits<double>::quiet_NaN()});
    write_csv(ctx.out / "picard_trace.csv", trace);
    ctx.artifact("picard_trace.csv");

    if (!tr.w2_profiles.empty()) {
        CsvTable dist;
        dist.header = {"t", "W2", "theta_weighted"};
        const std::vector<double>& prof = tr.w2_profiles.back();
        for (long t = 0; t <= ctx.grid.n_sim; ++t) {
            double w2 = prof[static_cast<std::size_t>(t)];
            dist.rows.push_back({ctx.grid.time_at(t), w2,
                                 std::exp(-tr.theta_used * ctx.grid.time_at(t)) * w2});
        }
        write_csv(ctx.out / "distance_report.csv", dist);
        ctx.artifact("distance_report.csv");
    }

    ctx.metrics["converged"] = tr.converged;
    ctx.metrics["iterations"] = tr.iterations;
    ctx.metrics["theta_used"] = tr.theta_used;
    ctx.metrics["distances"] = tr.distances;
    ctx.metrics["certified"] = tr.certified;
    ctx.metrics["certified_distance"] = tr.certified_distance;

    ctx.check("picard_converged", tr.converged,
              json{{"iterations", tr.iterations},
                   {"final_distance", tr.distances.empty() ? -1.0 : tr.distances.back()}});
    if (tr.converged) ctx.check("fixed_point_certified", tr.certified,
                                json{{"certified_distance", tr.certified_distance}});
    bool ratios_ok = true;
    for (double r : tr.ratios)
        if (std::isfinite(r) && r >= 1.0) ratios_ok = false;
    if (!tr.ratios.empty())
        ctx.check("contraction_ratios_below_one", ratios_ok, json{{"ratios", tr.ratios}});

    // mean-vs-ODE oracle for the linear mean-field model without memory
    const json& mp = ctx.config.at("model").at("params");
    bool linear = ctx.config.at("model").at("id").get<std::string>() == "linear_memory_meanfield";
    double beta = num_field(mp, "beta", 0.0);
    if (linear && beta == 0.0 && tr.converged) {
        double a = num_field(mp, "a", 1.0);
        double gmf = num_field(mp, "gamma", 0.0);
        double worst = 0.0;
        double m0 = gamma.mean_at_zero()[0];
        bool pass = true;
        for (long t = 0; t <= ctx.grid.n_sim; ++t) {
            EmpiricalMeasure mu = res.flow.at(t);
            double mean = mu.mean_at_zero()[0];
            double sd = 0.0;
            for (long i = 0; i < mu.size(); ++i) {
                double dv = mu.atom(i).at_lag(0)[0] - mean;
                sd += dv * dv;
            }
            sd = std::sqrt(sd / std::max(1.0, static_cast<double>(mu.size() - 1)));
            double stderr_mean = sd / std::sqrt(static_cast<double>(mu.size()));
            double pred = m0 * std::exp((gmf - a) * ctx.grid.time_at(t));
            double tol = 3.0 * (stderr_mean + 2.0 * ctx.grid.h);
            double err = std::abs(mean - pred);
            worst = std::max(worst, err - tol);
            if (err > tol) pass = false;
        }
        ctx.check("mean_matches_ode", pass, json{{"worst_excess", worst}});
    }

    if (p.contains("theta_sweep") && tr.w2_profiles.size() >= 3) {
        std::vector<double> thetas = p.at("theta_sweep").get<std::vector<double>>();
        ContractionReport rep = contraction_report(tr, ctx.grid, cfg.tol, thetas);
        CsvTable ct;
        ct.header = {"theta", "max_ratio", "iters_to_tol"};
        for (const ContractionRow& row : rep.rows)
            ct.rows.push_back({row.theta, row.max_ratio, static_cast<double>(row.iters_to_tol)});
        write_csv(ctx.out / "contraction.csv", ct);
        ctx.artifact("contraction.csv");
        ctx.metrics["smallest_contractive_theta"] = rep.smallest_contractive_theta;
    }

    if (ctx.plots) {
        if (tr.distances.empty()) {
            std::cerr << "notice: picard trace is empty, plot skipped\n";
        } else {
            std::vector<double> iters;
            for (std::size_t j = 0; j < tr.distances.size(); ++j)
                iters.push_back(static_cast<double>(j + 1));
            svg_line_plot(ctx.out / "picard_trace.svg", "fixed-point iterate gaps", iters,
                          {{"W_{2,theta} gap", tr.distances}}, true);
        }
    }
}

// --------------------------- couple ----------------------------------------

inline void run_couple(RunContext& ctx) {
    const json& p = ctx.config.at("params");
    std::vector<WeightedSegment> mu_init = sample_initials(
        p.at("initial_mu"), ctx.particles, ctx.model.tau, ctx.grid, ctx.model.d, ctx.plan, 0);
    std::vector<WeightedSegment> nu_init = sample_initials(
        p.at("initial_nu"), ctx.particles, ctx.model.tau, ctx.grid, ctx.model.d, ctx.plan, 1);

    EmpiricalMeasureFlow flow_mu = EmpiricalMeasureFlow::constant(
        ctx.grid, EmpiricalMeasure::from_segments(mu_init));
    EmpiricalMeasureFlow flow_nu = EmpiricalMeasureFlow::constant(
        ctx.grid, EmpiricalMeasure::from_segments(nu_init));
    if (ctx.model.flags.distribution_dependent) {
        PicardConfig pc;
        pc.tol = p.at("flow_tol").get<double>();
        pc.max_iter = p.at("flow_max_iter").get<long>();
        pc.threads = ctx.threads;
        PicardResult rm = solve_fixed_point(ctx.model,
                                            EmpiricalMeasure::from_segments(mu_init), ctx.grid,
                                            pc, ctx.plan);
        PicardResult rn = solve_fixed_point(ctx.model,
                                            EmpiricalMeasure::from_segments(nu_init), ctx.grid,
                                            pc, ctx.plan);
        ctx.check("coupling_flows_converged", rm.trace.converged && rn.trace.converged,
                  json{{"mu_iterations", rm.trace.iterations},
                       {"nu_iterations", rn.trace.iterations}});
        flow_mu = rm.flow;
        flow_nu = rn.flow;
    }

    CouplingConfig cfg;
    cfg.kappa = p.at("kappa").get<double>();
    cfg.tau0 = p.at("tau0").get<double>();
    cfg.p = p.at("p").get<double>();
    cfg.threads = ctx.threads;
    CouplingRun run =
        run_coupling(ctx.model, mu_init, nu_init, flow_mu, flow_nu, ctx.grid, ctx.plan, cfg);

    CsvTable table;
    table.header = {"t", "gap_p_weighted", "ess", "entropy_estimate"};
    for (long t = 0; t <= ctx.grid.n_sim; ++t)
        table.rows.push_back({ctx.grid.time_at(t),
                              run.gap_p_weighted[static_cast<std::size_t>(t)],
                              run.ess[static_cast<std::size_t>(t)],
                              run.entropy_identity[static_cast<std::size_t>(t)]});
    write_csv(ctx.out / "coupling_run.csv", table);
    ctx.artifact("coupling_run.csv");

    DecayFit fit = decay_fit(run, run.p, ctx.plan);
    ctx.metrics["kappa"] = run.kappa;
    ctx.metrics["tau0"] = run.tau0;
    ctx.metrics["w2_initial"] = run.w2_initial;
    ctx.metrics["decay_rate"] = fit.rate;
    ctx.metrics["decay_rate_ci"] = std::vector<double>{fit.ci_lo, fit.ci_hi};
    ctx.metrics["decay_degenerate"] = fit.degenerate;
    ctx.metrics["ess_warning"] = run.ess_warning;
    ctx.metrics["entropy_final"] = run.entropy_identity.back();

    if (!fit.degenerate)
        ctx.check("gap_decays_at_target_rate", fit.rate <= -run.p * run.tau0,
                  json{{"rate", fit.rate}, {"target", -run.p * run.tau0}});

    if (ctx.model.flags.distribution_dependent) {
        ZetaBarBound zb = zeta_bar_bound_check(run, ctx.model, flow_mu, flow_nu, 2.0,
                                               ctx.threads);
        ctx.check("measure_swap_drift_bounded", zb.max_defect <= 1e-10,
                  json{{"max_defect", zb.max_defect}, {"max_zeta_sq", zb.max_zeta_sq}});
    } else {
        double max_zb = 0.0;
        for (const auto& zrow : run.ledger.zeta_bar)
            for (double z : zrow) max_zb = std::max(max_zb, std::abs(z));
        ctx.check("measure_swap_drift_zero", max_zb == 0.0, json{{"max_abs", max_zb}});
    }

    TestFunction f = TestFunction::from_json(p.at("f"), ctx.model.d);
    CsvTable harnack;
    harnack.header = {"t", "lhs", "log_ptf", "defect", "stderr", "ess"};
    std::vector<long> t_checks;
    for (long t = 0; t <= ctx.grid.n_sim; t += std::max<long>(1, ctx.grid.n_sim / 16))
        t_checks.push_back(t);
    if (t_checks.back() != ctx.grid.n_sim) t_checks.push_back(ctx.grid.n_sim);
    for (long t : t_checks) {
        LogHarnackPoint pt = log_harnack_defect(run, f, t);
        harnack.rows.push_back({pt.t, pt.lhs, pt.log_ptf, pt.defect, pt.stderr_, pt.ess});
    }
    write_csv(ctx.out / "log_harnack.csv", harnack);
    ctx.artifact("log_harnack.csv");
    ctx.metrics["final_defect"] = harnack.rows.back()[3];

    epr_check(ctx, run.x_ensemble, 2.0, "pathwise_shift_inequality_x");
    epr_check(ctx, run.y_ensemble, 2.0, "pathwise_shift_inequality_y");

    if (ctx.plots) {
        std::vector<double> gaps;
        for (long t = 0; t <= ctx.grid.n_sim; ++t)
            gaps.push_back(run.gap_p_weighted[static_cast<std::size_t>(t)]);
        svg_line_plot(ctx.out / "coupling_gap.svg", "weighted coupling gap", time_axis(ctx.grid),
                      {{"E_Q ||X_t - Y_t||^p", gaps}}, true);
    }
}

// --------------------------- lipschitz -------------------------------------

inline void run_lipschitz(RunContext& ctx) {
    const json& p = ctx.config.at("params");
    std::vector<WeightedSegment> base = sample_initials(p.at("initial"), 1, ctx.model.tau,
                                                        ctx.grid, ctx.model.d, ctx.plan, 0);
    std::vector<WeightedSegment> dirv = sample_initials(p.at("direction"), 1, ctx.model.tau,
                                                        ctx.grid, ctx.model.d, ctx.plan, 2);
    const WeightedSegment& xi = base.front();
    std::vector<double> dir_flat = dirv.front().raw();
    double dn = tau_norm(dirv.front().view());
    require(dn > 0.0, ErrorKind::Config, "lipschitz direction must be nonzero");

    EmpiricalMeasureFlow flow =
        EmpiricalMeasureFlow::constant(ctx.grid, EmpiricalMeasure::from_segments(base));
    auto gap_at = [&](double g) {
        std::vector<double> vals(xi.raw());
        for (std::size_t k = 0; k < vals.size(); ++k) vals[k] += g * dir_flat[k] / dn;
        WeightedSegment eta(xi.tau(), xi.h(), xi.d(), std::move(vals), xi.tail_policy());
        SimOptions opts;
        opts.threads = ctx.threads;
        PairGap pg = common_noise_gap(ctx.model, flow, xi, eta, ctx.grid, ctx.plan, opts);
        return pg;
    };

    std::vector<double> gaps = p.at("gaps").get<std::vector<double>>();
    CsvTable table;
    table.header = {"initial_gap", "sup_gap", "ratio"};
    std::vector<double> ratios;
    for (double g : gaps) {
        PairGap pg = gap_at(g);
        double ratio = pg.sup_gap / pg.initial_gap;
        ratios.push_back(ratio);
        table.rows.push_back({pg.initial_gap, pg.sup_gap, ratio});
    }
    write_csv(ctx.out / "lipschitz.csv", table);
    ctx.artifact("lipschitz.csv");
    ctx.metrics["ratios"] = ratios;

    if (ctx.model.flags.globally_lipschitz) {
        double rmax = *std::max_element(ratios.begin(), ratios.end());
        double rmin = *std::min_element(ratios.begin(), ratios.end());
        double tol = p.at("ratio_tol").get<double>();
        ctx.check("gap_scales_linearly", rmax / rmin - 1.0 <= tol,
                  json{{"spread", rmax / rmin - 1.0}, {"tol", tol}});
    }

    long pairs = p.at("pairs").get<long>();
    if (pairs > 0) {
        std::mt19937_64 rng = ctx.plan.sequential(noise_phase::assumption_sampler);
        double bound =
            2.0 * std::exp((ctx.model.constants.K1 + ctx.model.constants.K2) * ctx.grid.t_sim());
        double worst = 0.0;
        bool pass = true;
        for (long r = 0; r < pairs; ++r) {
            WeightedSegment A = memflow::detail::random_segment(rng, ctx.model.tau, ctx.grid,
                                                                1.0, ctx.model.d);
            WeightedSegment B = memflow::detail::random_segment(rng, ctx.model.tau, ctx.grid,
                                                                1.0, ctx.model.d);
            SimOptions opts;
            opts.threads = ctx.threads;
            PairGap pg = common_noise_gap(ctx.model, flow, A, B, ctx.grid, ctx.plan, opts);
            if (pg.initial_gap <= 0.0) continue;
            double ratio = pg.sup_gap / pg.initial_gap;
            worst = std::max(worst, ratio);
            if (ratio > bound) pass = false;
        }
        ctx.metrics["random_pair_worst_ratio"] = worst;
        ctx.metrics["random_pair_bound"] = bound;
        ctx.check("random_pair_ratio_bounded", pass,
                  json{{"worst", worst}, {"bound", bound}});
    }
}

// --------------------------- moments ---------------------------------------

inline void run_moments(RunContext& ctx) {
    const json& p = ctx.config.at("params");
    std::vector<double> norms = p.at("initial_norms").get<std::vector<double>>();
    std::vector<double> ks = p.at("k").get<std::vector<double>>();
    long batch = p.at("batch").get<long>();
    require(!norms.empty() && !ks.empty(), ErrorKind::Config,
            "moments needs initial_norms and k lists");

    // sup-moment at T per (norm, k) for the growth regression
    std::vector<std::vector<double>> sup_at_T(ks.size());
    long epr_violations = 0;
    for (std::size_t ni = 0; ni < norms.size(); ++ni) {
        Vec x = Vec::Zero(ctx.model.d);
        x[0] = norms[ni];
        WeightedSegment seg = point_path(x, ctx.model.tau, ctx.grid);
        std::vector<MomentAccumulator> accs;
        for (double k : ks) accs.emplace_back(ctx.grid, k);

        if (ctx.model.flags.distribution_dependent) {
            std::vector<WeightedSegment> initials(static_cast<std::size_t>(ctx.particles), seg);
            SimOptions opts;
            opts.threads = ctx.threads;
            InteractingResult res =
                simulate_interacting(ctx.model, initials, ctx.grid, ctx.plan, opts);
            for (auto& acc : accs) acc.add(res.ensemble);
            epr_violations += epr_sweep(res.ensemble, 2.0, ctx.threads).violations;
        } else {
            EmpiricalMeasureFlow flow = EmpiricalMeasureFlow::constant(
                ctx.grid, EmpiricalMeasure::from_segments({seg}));
            long done = 0;
            while (done < ctx.particles) {
                long take = std::min(batch, ctx.particles - done);
                std::vector<WeightedSegment> initials(static_cast<std::size_t>(take), seg);
                SimOptions opts;
                opts.threads = ctx.threads;
                opts.particle_offset = done + static_cast<long>(ni) * (1L << 32);
                EnsembleState ens =
                    simulate_frozen(ctx.model, flow, initials, ctx.grid, ctx.plan, opts);
                for (auto& acc : accs) acc.add(ens);
                epr_violations += epr_sweep(ens, 2.0, ctx.threads).violations;
                done += take;
            }
        }
        for (std::size_t ki = 0; ki < ks.size(); ++ki) {
            auto rows = accs[ki].finalize();
            sup_at_T[ki].push_back(rows.back().sup_norm_k.mean);
            CsvTable curve;
            curve.header = {"t", "norm_mean", "norm_stderr", "sup_mean", "sup_stderr"};
            for (const auto& r : rows)
                curve.rows.push_back({r.t, r.norm_k.mean, r.norm_k.stderr_, r.sup_norm_k.mean,
                                      r.sup_norm_k.stderr_});
            std::string name = "moments_norm" + std::to_string(ni) + "_k" +
                               std::to_string(static_cast<long>(ks[ki])) + ".csv";
            write_csv(ctx.out / name, curve);
            ctx.artifact(name);
        }
    }
    ctx.check("pathwise_shift_inequality", epr_violations == 0,
              json{{"violations", epr_violations}});

    // regression of E sup ||X||^k against 1 + ||X_0||^k
    json growth = json::array();
    for (std::size_t ki = 0; ki < ks.size(); ++ki) {
        if (norms.size() >= 3) {
            std::vector<double> xs, ys;
            for (std::size_t ni = 0; ni < norms.size(); ++ni) {
                xs.push_back(1.0 + std::pow(norms[ni], ks[ki]));
                ys.push_back(sup_at_T[ki][ni]);
            }
            LineFit lf = fit_line(xs, ys);
            growth.push_back(json{{"k", ks[ki]},
                                  {"r2", lf.r2},
                                  {"slope", lf.slope},
                                  {"intercept", lf.intercept}});
            ctx.check("sup_moment_linear_growth_k" +
                          std::to_string(static_cast<long>(ks[ki])),
                      lf.r2 > 0.99, json{{"r2", lf.r2}});
        }
    }
    ctx.metrics["growth_fits"] = growth;

    // stationary-variance oracle for the plain OU member of the family
    bool ou = bool_field(p, "ou_check", false);
    if (ou) {
        const json& mp = ctx.config.at("model").at("params");
        double a = num_field(mp, "a", 1.0);
        double sigma0 = num_field(mp, "sigma0", 1.0);
        Vec x0 = Vec::Zero(ctx.model.d);
        WeightedSegment seg = point_path(x0, ctx.model.tau, ctx.grid);
        EmpiricalMeasureFlow flow = EmpiricalMeasureFlow::constant(
            ctx.grid, EmpiricalMeasure::from_segments({seg}));
        double s2 = 0.0, s4 = 0.0;
        long done = 0;
        while (done < ctx.particles) {
            long take = std::min(batch, ctx.particles - done);
            std::vector<WeightedSegment> initials(static_cast<std::size_t>(take), seg);
            SimOptions opts;
            opts.threads = ctx.threads;
            opts.particle_offset = done + (1L << 48);
            EnsembleState ens =
                simulate_frozen(ctx.model, flow, initials, ctx.grid, ctx.plan, opts);
            for (long i = 0; i < ens.size(); ++i) {
                double v = ens.particle(i).value(ctx.grid.n_sim)[0];
                s2 += v * v;
                s4 += v * v * v * v;
            }
            done += take;
        }
        double mm = static_cast<double>(ctx.particles);
        double mean2 = s2 / mm;
        double var_of_sq = std::max(0.0, s4 / mm - mean2 * mean2);
        double se = std::sqrt(var_of_sq / mm);
        double target = sigma0 * sigma0 / (2.0 * a);
        ctx.metrics["ou_second_moment"] = mean2;
        ctx.metrics["ou_target"] = target;
        ctx.metrics["ou_stderr"] = se;
        ctx.check("ou_stationary_variance", std::abs(mean2 - target) < 5.0 * se,
                  json{{"estimate", mean2}, {"target", target}, {"stderr", se}});
    }
}

// --------------------------- exp-moments -----------------------------------

inline void run_exp_moments(RunContext& ctx) {
    const json& p = ctx.config.at("params");
    double beta = p.at("beta").get<double>();
    double alpha = p.at("alpha").get<double>();
    std::vector<WeightedSegment> initials = sample_initials(
        p.at("initial"), ctx.particles, ctx.model.tau, ctx.grid, ctx.model.d, ctx.plan, 0);

    SimOptions opts;
    opts.threads = ctx.threads;
    EnsembleState ens;
    if (ctx.model.flags.distribution_dependent) {
        ens = simulate_interacting(ctx.model, initials, ctx.grid, ctx.plan, opts).ensemble;
    } else {
        EmpiricalMeasureFlow flow = EmpiricalMeasureFlow::constant(
            ctx.grid, EmpiricalMeasure::from_segments(initials));
        ens = simulate_frozen(ctx.model, flow, initials, ctx.grid, ctx.plan, opts);
    }
    auto rows = exp_moment(ens, beta, alpha);
    CsvTable curve;
    curve.header = {"t", "estimate", "stderr", "max_mass_fraction"};
    bool any_overflow = false, any_flag = false;
    double sup_est = 0.0;
    for (const auto& r : rows) {
        curve.rows.push_back({r.t, r.estimate, r.stderr_, r.max_mass_fraction});
        any_overflow = any_overflow || r.overflow;
        any_flag = any_flag || r.flagged;
        if (std::isfinite(r.estimate)) sup_est = std::max(sup_est, r.estimate);
    }
    write_csv(ctx.out / "exp_moments.csv", curve);
    ctx.artifact("exp_moments.csv");
    ctx.metrics["sup_estimate"] = sup_est;
    ctx.metrics["any_overflow"] = any_overflow;
    ctx.metrics["mass_concentration_flagged"] = any_flag;
    ctx.check("exp_moment_finite", !any_overflow, json{{"beta", beta}, {"alpha", alpha}});
    epr_check(ctx, ens, 2.0);
    if (ctx.plots) {
        std::vector<double> est;
        for (const auto& r : rows) est.push_back(r.estimate);
        svg_line_plot(ctx.out / "exp_moments.svg", "exponential moments", time_axis(ctx.grid),
                      {{"E exp(beta ||X_t||^{2a})", est}});
    }
}

// --------------------------- check-assumptions -----------------------------

inline void run_check_assumptions(RunContext& ctx) {
    const json& p = ctx.config.at("params");
    SamplerConfig sampler;
    sampler.seed = ctx.plan.master_seed();
    sampler.scale = p.at("scale").get<double>();
    sampler.measure_atoms = p.at("measure_atoms").get<long>();
    sampler.t_max = p.at("t_max").get<double>();
    long n_samples = p.at("n_samples").get<long>();

    json reports = json::array();
    for (const json& jid : p.at("ids")) {
        AssumptionId id = assumption_from_name(jid.get<std::string>());
        AssumptionReport rep = check_assumption(ctx.model, id, ctx.grid, sampler, n_samples);
        reports.push_back(assumption_report_to_json(rep));
        bool pass = id == AssumptionId::A2Profile ? rep.max_violation < 0.0
                                                  : rep.max_violation <= 0.0;
        ctx.check(std::string("assumption_") + rep.id, pass,
                  json{{"max_violation", rep.max_violation}});
    }
    write_json_file(ctx.out / "assumption_reports.json", reports);
    ctx.artifact("assumption_reports.json");
    ctx.metrics["reports"] = reports;
}

// --------------------------- lpq-diagnose ----------------------------------

inline void run_lpq_diagnose(RunContext& ctx) {
    const json& p = ctx.config.at("params");
    double pp = p.at("p").get<double>();
    double q = p.at("q").get<double>();
    bool kato = kato_admissible(pp, q, ctx.model.d);

    LpqGrids grids;
    grids.n_time = p.at("n_time").get<long>();
    grids.n_ball = p.at("n_ball").get<long>();
    grids.lattice_step = p.at("lattice_step").get<double>();
    auto box = p.at("box").get<std::vector<double>>();
    auto interval = p.at("interval").get<std::vector<double>>();
    require(box.size() == 2 && interval.size() == 2, ErrorKind::Config,
            "box and interval must be [lo, hi] pairs");

    require(ctx.model.singularity.has_value(), ErrorKind::Config,
            "lpq-diagnose needs a model with a singularity profile");
    Vec lo = Vec::Constant(ctx.model.d, box[0]);
    Vec hi = Vec::Constant(ctx.model.d, box[1]);
    LpqResult res = lpq_norm(ctx.model.singularity->f0, pp, q, interval[0], interval[1], lo, hi,
                             grids);

    ctx.metrics["kato_admissible"] = kato;
    ctx.metrics["lpq_value"] = res.value;
    ctx.metrics["lattice_centers"] = res.centers;
    ctx.metrics["grids"] = json{{"n_time", grids.n_time},
                                {"n_ball", grids.n_ball},
                                {"lattice_step", grids.lattice_step}};
    ctx.check("profile_admissible", kato && std::isfinite(res.value),
              json{{"kato", kato}, {"lpq_value", res.value}});
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Config resolution
// ---------------------------------------------------------------------------

/// Validates a raw config against the strict schema (unknown keys rejected)
/// and materializes every default into the returned echo.
inline json resolve_config(const json& raw) {
    detail::check_keys(raw,
                       {"schema", "experiment", "model", "grid", "particles", "seed",
                        "output_dir", "write_trajectories", "params"},
                       "run config");
    json cfg;
    std::string schema = raw.value("schema", std::string(kConfigSchema));
    require(schema == kConfigSchema, ErrorKind::Config,
            "unsupported config schema '" + schema + "'");
    cfg["schema"] = schema;

    require(raw.contains("experiment"), ErrorKind::Config, "missing field 'experiment'");
    std::string exp = raw.at("experiment").get<std::string>();
    bool known = false;
    for (const std::string& e : experiment_names()) known = known || e == exp;
    require(known, ErrorKind::Config, "unknown experiment '" + exp + "'");
    cfg["experiment"] = exp;

    require(raw.contains("model"), ErrorKind::Config, "missing field 'model'");
    detail::check_keys(raw.at("model"), {"id", "params"}, "model block");
    require(raw.at("model").contains("id"), ErrorKind::Config, "missing model id");
    cfg["model"] = json{{"id", raw.at("model").at("id").get<std::string>()},
                        {"params", raw.at("model").value("params", json::object())}};

    require(raw.contains("grid"), ErrorKind::Config, "missing field 'grid'");
    detail::check_keys(raw.at("grid"), {"h", "T_hist", "T", "d"}, "grid block");
    json g = raw.at("grid");
    double h = detail::num_field(g, "h", 0.0);
    require(h > 0.0, ErrorKind::Config, "grid.h must be > 0");
    cfg["grid"] = json{{"h", h},
                       {"T_hist", detail::num_field(g, "T_hist", h)},
                       {"T", detail::num_field(g, "T", 1.0)},
                       {"d", static_cast<int>(detail::num_field(g, "d", 1))}};
    require(cfg["grid"]["d"].get<int>() == 1, ErrorKind::Config,
            "builtin models are scalar; grid.d must be 1");

    double particles = detail::num_field(raw, "particles", 64);
    require(particles >= 1, ErrorKind::Config, "particles must be >= 1");
    cfg["particles"] = static_cast<long>(particles);
    cfg["seed"] = static_cast<std::uint64_t>(detail::num_field(raw, "seed", 1));
    cfg["output_dir"] = raw.value("output_dir", std::string("runs/") + exp);
    cfg["write_trajectories"] = detail::bool_field(raw, "write_trajectories", false);

    json p = raw.value("params", json::object());
    json rp;
    if (exp == "simulate") {
        detail::check_keys(p, {"mode", "initial", "epr_p"}, "simulate params");
        std::string mode = p.value("mode", std::string("interacting"));
        require(mode == "interacting" || mode == "frozen", ErrorKind::Config,
                "simulate mode must be 'interacting' or 'frozen'");
        rp["mode"] = mode;
        rp["initial"] = resolve_initial_spec(p.value("initial", json{{"kind", "zero"}}),
                                             cfg["grid"]["d"].get<int>());
        rp["epr_p"] = detail::num_field(p, "epr_p", 2.0);
    } else if (exp == "picard") {
        detail::check_keys(p, {"initial", "tol", "max_iter", "theta", "common_noise",
                               "theta_sweep"},
                           "picard params");
        rp["initial"] = resolve_initial_spec(p.value("initial", json{{"kind", "zero"}}),
                                             cfg["grid"]["d"].get<int>());
        rp["tol"] = detail::num_field(p, "tol", 1e-3);
        rp["max_iter"] = static_cast<long>(detail::num_field(p, "max_iter", 20));
        rp["theta"] = detail::num_field(p, "theta", 0.0);
        rp["common_noise"] = detail::bool_field(p, "common_noise", true);
        if (p.contains("theta_sweep")) rp["theta_sweep"] = p.at("theta_sweep");
    } else if (exp == "couple") {
        detail::check_keys(p, {"initial_mu", "initial_nu", "kappa", "tau0", "p", "f",
                               "flow_tol", "flow_max_iter"},
                           "couple params");
        rp["initial_mu"] = resolve_initial_spec(
            p.value("initial_mu", json{{"kind", "point"}, {"value", {1.0}}}),
            cfg["grid"]["d"].get<int>());
        rp["initial_nu"] = resolve_initial_spec(p.value("initial_nu", json{{"kind", "zero"}}),
                                                cfg["grid"]["d"].get<int>());
        rp["kappa"] = detail::num_field(p, "kappa", 0.0);
        rp["tau0"] = detail::num_field(p, "tau0", 0.0);
        rp["p"] = detail::num_field(p, "p", 2.0);
        json fdesc = p.value("f", json{{"kind", "bounded_smooth"},
                                       {"params", {{"c0", 2.0}, {"c1", 1.0}}}});
        rp["f"] = TestFunction::from_json(fdesc, cfg["grid"]["d"].get<int>()).to_json();
        rp["flow_tol"] = detail::num_field(p, "flow_tol", 1e-3);
        rp["flow_max_iter"] = static_cast<long>(detail::num_field(p, "flow_max_iter", 20));
    } else if (exp == "lipschitz") {
        detail::check_keys(p, {"initial", "direction", "gaps", "pairs", "ratio_tol"},
                           "lipschitz params");
        rp["initial"] = resolve_initial_spec(
            p.value("initial", json{{"kind", "point"}, {"value", {1.0}}}),
            cfg["grid"]["d"].get<int>());
        rp["direction"] = resolve_initial_spec(
            p.value("direction", json{{"kind", "point"}, {"value", {1.0}}}),
            cfg["grid"]["d"].get<int>());
        rp["gaps"] = p.value("gaps", json::array({1.0, 0.5, 2.0, 10.0}));
        rp["pairs"] = static_cast<long>(detail::num_field(p, "pairs", 0));
        rp["ratio_tol"] = detail::num_field(p, "ratio_tol", 1e-12);
    } else if (exp == "moments") {
        detail::check_keys(p, {"initial_norms", "k", "batch", "ou_check"}, "moments params");
        rp["initial_norms"] = p.value("initial_norms", json::array({0.0, 1.0, 5.0, 25.0}));
        rp["k"] = p.value("k", json::array({2.0, 4.0}));
        rp["batch"] = static_cast<long>(detail::num_field(p, "batch", 1024));
        // "auto" resolves against the model block: plain OU only
        bool ou_auto = false;
        {
            const json& mp = cfg["model"]["params"];
            ou_auto = cfg["model"]["id"] == "linear_memory_meanfield" &&
                      detail::num_field(mp, "beta", 0.0) == 0.0 &&
                      detail::num_field(mp, "gamma", 0.0) == 0.0 &&
                      detail::num_field(mp, "a", 1.0) > 0.0 &&
                      detail::num_field(mp, "sigma0", 1.0) > 0.0;
        }
        if (p.contains("ou_check") && p.at("ou_check").is_boolean())
            rp["ou_check"] = p.at("ou_check").get<bool>();
        else
            rp["ou_check"] = ou_auto;
    } else if (exp == "exp-moments") {
        detail::check_keys(p, {"initial", "beta", "alpha"}, "exp-moments params");
        rp["initial"] = resolve_initial_spec(p.value("initial", json{{"kind", "zero"}}),
                                             cfg["grid"]["d"].get<int>());
        rp["beta"] = detail::num_field(p, "beta", 0.1);
        rp["alpha"] = detail::num_field(p, "alpha", 1.0);
    } else if (exp == "check-assumptions") {
        detail::check_keys(p, {"ids", "n_samples", "scale", "measure_atoms", "t_max"},
                           "check-assumptions params");
        json ids = p.value("ids", json::array({"H'", "H2", "A3'", "A1"}));
        for (const json& i : ids) assumption_from_name(i.get<std::string>());
        rp["ids"] = ids;
        rp["n_samples"] = static_cast<long>(detail::num_field(p, "n_samples", 10000));
        rp["scale"] = detail::num_field(p, "scale", 1.5);
        rp["measure_atoms"] = static_cast<long>(detail::num_field(p, "measure_atoms", 8));
        rp["t_max"] = detail::num_field(p, "t_max", 1.0);
    } else if (exp == "lpq-diagnose") {
        detail::check_keys(p, {"p", "q", "box", "interval", "n_time", "n_ball", "lattice_step"},
                           "lpq-diagnose params");
        rp["p"] = detail::num_field(p, "p", 4.0);
        rp["q"] = detail::num_field(p, "q", 4.0);
        rp["box"] = p.value("box", json::array({-2.0, 2.0}));
        rp["interval"] = p.value("interval", json::array({0.0, 1.0}));
        rp["n_time"] = static_cast<long>(detail::num_field(p, "n_time", 64));
        rp["n_ball"] = static_cast<long>(detail::num_field(p, "n_ball", 64));
        rp["lattice_step"] = detail::num_field(p, "lattice_step", 0.5);
    }
    cfg["params"] = rp;
    return cfg;
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

struct RunOptions {
    fs::path out_override;  ///< empty: use config output_dir
    int threads = 0;        ///< 0: hardware default
    bool plots = false;
    std::optional<std::uint64_t> seed_override;
};

/// Executes one experiment: validates the config, runs the named experiment,
/// writes the artifacts and the deterministic summary JSON, and reports
/// whether any declared property check failed. The summary is a pure
/// function of (config, seed); wall clock and thread count go to a separate
/// run_meta.json so reruns stay byte-identical.
inline RunOutcome run_experiment(const json& raw_config, const RunOptions& opts = {}) {
    auto t_start = std::chrono::steady_clock::now();
    json cfg = resolve_config(raw_config);
    if (opts.seed_override) cfg["seed"] = *opts.seed_override;

    detail::RunContext ctx;
    ctx.config = cfg;
    ctx.grid = GridSpec::from_times(cfg["grid"]["h"].get<double>(),
                                    cfg["grid"]["T_hist"].get<double>(),
                                    cfg["grid"]["T"].get<double>());
    ctx.model = builtin_model(cfg["model"]["id"].get<std::string>(), cfg["model"]["params"],
                              ctx.grid);
    ctx.particles = cfg["particles"].get<long>();
    ctx.plan = NoisePlan(cfg["seed"].get<std::uint64_t>());
    ctx.out = opts.out_override.empty() ? fs::path(cfg["output_dir"].get<std::string>())
                                        : opts.out_override;
    ctx.threads = resolve_threads(opts.threads);
    ctx.plots = opts.plots;
    fs::create_directories(ctx.out);

    std::string exp = cfg["experiment"].get<std::string>();
    if (exp == "simulate") detail::run_simulate(ctx);
    else if (exp == "picard") detail::run_picard(ctx);
    else if (exp == "couple") detail::run_couple(ctx);
    else if (exp == "lipschitz") detail::run_lipschitz(ctx);
    else if (exp == "moments") detail::run_moments(ctx);
    else if (exp == "exp-moments") detail::run_exp_moments(ctx);
    else if (exp == "check-assumptions") detail::run_check_assumptions(ctx);
    else if (exp == "lpq-diagnose") detail::run_lpq_diagnose(ctx);

    RunOutcome outcome;
    json checks = json::array();
    for (const PropertyCheck& c : ctx.checks) {
        checks.push_back(json{{"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
        outcome.property_failed = outcome.property_failed || !c.pass;
    }
    outcome.summary = json{{"schema", kSummarySchema},
                           {"experiment", exp},
                           {"config", cfg},
                           {"rng",
                            {{"master_seed", cfg["seed"].get<std::uint64_t>()},
                             {"generator", "splitmix64-boxmuller/1"}}},
                           {"metrics", ctx.metrics.is_null() ? json::object() : ctx.metrics},
                           {"checks", checks},
                           {"artifacts", ctx.artifacts}};
    outcome.out_dir = ctx.out;
    write_json_file(ctx.out / "summary.json", outcome.summary);

    auto t_end = std::chrono::steady_clock::now();
    outcome.wall_clock_ms =
        std::chrono::duration_cast<std::chrono::milliseconds>(t_end - t_start).count();
    write_json_file(ctx.out / "run_meta.json",
                    json{{"wall_clock_ms", outcome.wall_clock_ms},
                         {"threads", ctx.threads},
                         {"plots", ctx.plots}});
    return outcome;
}

}  // namespace memflow
