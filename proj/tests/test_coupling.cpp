#include "memflow/coupling.hpp"

#include "memflow/picard.hpp"

#include <doctest.h>

#include <cmath>
#include <vector>

using namespace memflow;

namespace {

GridSpec cpl_grid() { return GridSpec::from_times(0.01, 0.1, 2.0); }

CoefficientSet ou_model(double tau, double a, double sigma0, double gamma = 0.0,
                        const GridSpec& grid = cpl_grid()) {
    return builtin_model("linear_memory_meanfield",
                         json{{"tau", tau}, {"a", a}, {"sigma0", sigma0}, {"gamma", gamma}},
                         grid);
}

std::vector<WeightedSegment> points(double x, double tau, const GridSpec& grid, long m) {
    return std::vector<WeightedSegment>(static_cast<std::size_t>(m),
                                        point_path(Vec::Constant(1, x), tau, grid));
}

EmpiricalMeasureFlow dflow(double x, double tau, const GridSpec& grid) {
    return EmpiricalMeasureFlow::constant(
        grid, EmpiricalMeasure::from_segments({point_path(Vec::Constant(1, x), tau, grid)}));
}

}  // namespace

TEST_CASE("identical systems: X equals Y pathwise and all weights are one") {
    GridSpec grid = cpl_grid();
    CoefficientSet model = ou_model(0.5, 1.0, 0.4);
    NoisePlan plan(42);
    auto mu = points(1.0, 0.5, grid, 8);
    CouplingConfig cfg;
    cfg.kappa = 3.0;
    CouplingRun run = run_coupling(model, mu, mu, dflow(0.0, 0.5, grid), dflow(0.0, 0.5, grid),
                                   grid, plan, cfg);
    CHECK(run.w2_initial == 0.0);
    for (long i = 0; i < 8; ++i) {
        for (long t = 0; t <= grid.n_sim; ++t) {
            CHECK(run.x_ensemble.particle(i).value(t)[0] ==
                  run.y_ensemble.particle(i).value(t)[0]);
            CHECK(run.ledger.log_weight(i, t) == 0.0);
        }
    }
    for (long t = 0; t <= grid.n_sim; ++t) {
        CHECK(run.gap_p_weighted[static_cast<std::size_t>(t)] == 0.0);
        CHECK(run.ess[static_cast<std::size_t>(t)] == doctest::Approx(8.0).epsilon(1e-14));
    }
    CHECK_FALSE(run.ess_warning);

    DecayFit fit = decay_fit(run, 2.0, plan);
    CHECK(fit.degenerate);
    CHECK(fit.rate == -std::numeric_limits<double>::infinity());
}

TEST_CASE("deterministic linear pair: gap recursion, decay slope, entropy identity") {
    GridSpec grid = cpl_grid();
    double a = 1.0, kappa = 3.0, sigma0 = 0.5;
    CoefficientSet model = ou_model(0.5, a, sigma0);
    NoisePlan plan(7);
    auto mu = points(1.0, 0.5, grid, 4);
    auto nu = points(0.25, 0.5, grid, 4);
    CouplingConfig cfg;
    cfg.kappa = kappa;
    CouplingRun run = run_coupling(model, mu, nu, dflow(0.0, 0.5, grid), dflow(0.0, 0.5, grid),
                                   grid, plan, cfg);
    CHECK(run.w2_initial == doctest::Approx(0.75).epsilon(1e-14));

    // noise cancels in the pair: gap follows gap_{j+1} = gap_j (1 - (a+kappa) h)
    double q = 1.0 - (a + kappa) * grid.h;
    double gap = 0.75;
    for (long t = 1; t <= grid.n_sim; ++t) {
        gap *= q;
        double got = run.x_ensemble.particle(0).value(t)[0] -
                     run.y_ensemble.particle(0).value(t)[0];
        CHECK(got == doctest::Approx(gap).epsilon(1e-11));
    }

    DecayFit fit = decay_fit(run, 2.0, plan);
    CHECK_FALSE(fit.degenerate);
    // p = 2 gap moment decays at twice the pathwise log-rate
    double expected_rate = 2.0 * std::log(q) / grid.h;
    CHECK(std::abs(fit.rate - expected_rate) < 1e-10);
    CHECK(fit.ci_lo <= fit.rate);
    CHECK(fit.rate <= fit.ci_hi);

    // deterministic zeta: the weighted Girsanov identity collapses onto the
    // ledger quadrature exactly
    for (long t : {grid.n_sim / 2, grid.n_sim}) {
        double quad = 0.5 * run.ledger.int2_comb[0][static_cast<std::size_t>(t)];
        CHECK(std::abs(run.entropy_identity[static_cast<std::size_t>(t)] - quad) <=
              1e-10 * std::max(1.0, quad));
    }

    // direct E[R log R] agrees within Monte Carlo error of the identity
    double ent_id = run.entropy_identity[static_cast<std::size_t>(grid.n_sim)];
    double ent_dir = run.entropy_direct[static_cast<std::size_t>(grid.n_sim)];
    CHECK(std::isfinite(ent_dir));
    CHECK(std::abs(ent_dir - ent_id) < 1.0);
}

TEST_CASE("weighted gap is monotone nonincreasing in kappa for the linear model") {
    GridSpec grid = cpl_grid();
    CoefficientSet model = ou_model(0.5, 1.0, 0.5);
    NoisePlan plan(99);
    auto mu = points(1.0, 0.5, grid, 2);
    auto nu = points(0.0, 0.5, grid, 2);
    long t_probe = grid.n_sim / 2;
    double prev = std::numeric_limits<double>::infinity();
    for (double kappa : {2.0, 3.0, 5.0, 9.0}) {
        CouplingConfig cfg;
        cfg.kappa = kappa;
        CouplingRun run = run_coupling(model, mu, nu, dflow(0.0, 0.5, grid),
                                       dflow(0.0, 0.5, grid), grid, plan, cfg);
        double g = run.gap_p_weighted[static_cast<std::size_t>(t_probe)];
        CHECK(g <= prev + 1e-15);
        prev = g;
    }
}

TEST_CASE("ledger self-consistency: weights recomputed from stored drifts match bitwise") {
    GridSpec grid = GridSpec::from_times(0.02, 0.1, 1.0);
    CoefficientSet model = builtin_model(
        "linear_memory_meanfield",
        json{{"tau", 0.5}, {"a", 1.0}, {"gamma", 0.4}, {"sigma0", 0.5}}, grid);
    NoisePlan plan(31337);
    const long m = 16;
    auto mu = points(1.0, 0.5, grid, m);
    auto nu = points(0.2, 0.5, grid, m);

    // distribution-dependent flows from two small fixed-point solves
    PicardConfig pc;
    pc.tol = 1e-4;
    pc.max_iter = 30;
    EmpiricalMeasure gm = EmpiricalMeasure::from_segments(points(1.0, 0.5, grid, m));
    EmpiricalMeasure gn = EmpiricalMeasure::from_segments(points(0.2, 0.5, grid, m));
    PicardResult rm = solve_fixed_point(model, gm, grid, pc, plan);
    PicardResult rn = solve_fixed_point(model, gn, grid, pc, plan);
    REQUIRE(rm.trace.converged);
    REQUIRE(rn.trace.converged);

    CouplingConfig cfg;
    cfg.kappa = 3.0;
    CouplingRun run = run_coupling(model, mu, nu, rm.flow, rn.flow, grid, plan, cfg);

    const GirsanovLedger& led = run.ledger;
    for (long i = 0; i < m; ++i) {
        double lb = 0.0, lt = 0.0;
        Vec zb(1), zt(1), dw(1), dwbar(1);
        for (long j = 0; j < grid.n_sim; ++j) {
            zb[0] = led.zeta_bar[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
            zt[0] = led.zeta_tilde[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
            plan.increment_into(dw, static_cast<std::uint64_t>(i), noise_phase::increments,
                                static_cast<std::uint64_t>(j), 1, grid.h);
            dwbar = dw + zb * grid.h;
            lb = lb - zb.dot(dw) - 0.5 * zb.squaredNorm() * grid.h;
            lt = lt - zt.dot(dwbar) - 0.5 * zt.squaredNorm() * grid.h;
            CHECK(lb == led.log_rbar[static_cast<std::size_t>(i)][static_cast<std::size_t>(j + 1)]);
            CHECK(lt == led.log_rtilde[static_cast<std::size_t>(i)][static_cast<std::size_t>(j + 1)]);
        }
    }

    // measure-swap drift is nonzero here and obeys the declared magnitude bound
    double max_zb = 0.0;
    for (long i = 0; i < m; ++i)
        for (long j = 0; j < grid.n_sim; ++j)
            max_zb = std::max(max_zb, std::abs(led.zeta_bar[static_cast<std::size_t>(i)]
                                                           [static_cast<std::size_t>(j)]));
    CHECK(max_zb > 0.0);
    ZetaBarBound zb = zeta_bar_bound_check(run, model, rm.flow, rn.flow, 2.0, 2);
    CHECK(zb.max_defect <= 1e-12);
}

TEST_CASE("Y under the weighted law matches the nu-started discrete Gaussian") {
    GridSpec grid = GridSpec::from_times(0.01, 0.05, 1.0);
    double a = 1.0, sigma0 = 0.5, x0 = 1.0, y0 = 0.7;
    CoefficientSet model = ou_model(0.5, a, sigma0, 0.0, grid);
    NoisePlan plan(2718);
    const long m = 4000;
    CouplingConfig cfg;
    cfg.kappa = 3.0;
    cfg.threads = 4;
    CouplingRun run = run_coupling(model, points(x0, 0.5, grid, m), points(y0, 0.5, grid, m),
                                   dflow(0.0, 0.5, grid), dflow(0.0, 0.5, grid), grid, plan, cfg);
    double q = 1.0 - a * grid.h;
    double mean_exact = y0 * std::pow(q, static_cast<double>(grid.n_sim));
    double var_exact = 0.0;
    for (long j = 0; j < grid.n_sim; ++j)
        var_exact = var_exact * q * q + sigma0 * sigma0 * grid.h;

    WeightedMarginal marg = y_marginal_under_q(run, grid.n_sim);
    CHECK(marg.ess > 0.2 * static_cast<double>(m));
    CHECK(std::abs(marg.mean[0] - mean_exact) < 5.0 * marg.mean_stderr);
    double var_se = var_exact * std::sqrt(2.0 / marg.ess);
    CHECK(std::abs(marg.var[0] - var_exact) < 5.0 * var_se);
}

TEST_CASE("log-Harnack: constant f, Jensen case, Gaussian closed form") {
    GridSpec grid = GridSpec::from_times(0.01, 0.05, 1.0);
    double a = 1.0, sigma0 = 0.5;
    CoefficientSet model = ou_model(0.5, a, sigma0, 0.0, grid);
    NoisePlan plan(515);
    const long m = 4000;

    // constant f: both sides are log c exactly
    {
        CouplingConfig cfg;
        cfg.kappa = 3.0;
        cfg.threads = 4;
        CouplingRun run =
            run_coupling(model, points(1.0, 0.5, grid, 64), points(0.5, 0.5, grid, 64),
                         dflow(0.0, 0.5, grid), dflow(0.0, 0.5, grid), grid, plan, cfg);
        LogHarnackPoint pt = log_harnack_defect(run, TestFunction::constant(3.0), grid.n_sim);
        CHECK(pt.lhs == doctest::Approx(std::log(3.0)).epsilon(1e-14));
        CHECK(pt.defect == doctest::Approx(0.0).epsilon(1e-13));
    }

    // Jensen case mu = nu: defect = mean log f - log mean f <= 0 pathwise
    {
        CouplingConfig cfg;
        cfg.kappa = 3.0;
        cfg.threads = 4;
        CouplingRun run =
            run_coupling(model, points(1.0, 0.5, grid, m), points(1.0, 0.5, grid, m),
                         dflow(0.0, 0.5, grid), dflow(0.0, 0.5, grid), grid, plan, cfg);
        TestFunction f = TestFunction::exp_linear(Vec::Constant(1, 1.0));
        LogHarnackPoint pt = log_harnack_defect(run, f, grid.n_sim);
        CHECK(pt.defect <= 0.0);  // exact empirical Jensen, no noise slack needed
        CHECK(pt.defect <= 3.0 * pt.stderr_);
    }

    // Gaussian closed form with f = exp(xi(0)): discrete-exact values
    {
        double x0 = 1.0, y0 = 0.7;
        CouplingConfig cfg;
        cfg.kappa = 3.0;
        cfg.threads = 4;
        CouplingRun run =
            run_coupling(model, points(x0, 0.5, grid, m), points(y0, 0.5, grid, m),
                         dflow(0.0, 0.5, grid), dflow(0.0, 0.5, grid), grid, plan, cfg);
        TestFunction f = TestFunction::exp_linear(Vec::Constant(1, 1.0));
        LogHarnackPoint pt = log_harnack_defect(run, f, grid.n_sim);
        double q = 1.0 - a * grid.h;
        double qn = std::pow(q, static_cast<double>(grid.n_sim));
        double vn = 0.0;
        for (long j = 0; j < grid.n_sim; ++j) vn = vn * q * q + sigma0 * sigma0 * grid.h;
        double analytic = y0 * qn - (x0 * qn + 0.5 * vn);
        CHECK(std::abs(pt.defect - analytic) < 3.0 * pt.stderr_);
        CHECK(pt.w2sq_term == doctest::Approx((x0 - y0) * (x0 - y0)).epsilon(1e-12));
    }

    // nonpositive f is rejected
    {
        CouplingConfig cfg;
        cfg.kappa = 3.0;
        CouplingRun run =
            run_coupling(model, points(1.0, 0.5, grid, 8), points(0.5, 0.5, grid, 8),
                         dflow(0.0, 0.5, grid), dflow(0.0, 0.5, grid), grid, plan, cfg);
        CHECK_THROWS_AS(log_harnack_defect(run, TestFunction::linear(Vec::Constant(1, 1.0)),
                                           grid.n_sim),
                        Error);
    }
}

TEST_CASE("matrix diffusion: identical planar systems stay coupled exactly") {
    // custom d = 2 model with a non-diagonal invertible diffusion; exercises
    // the LU solve paths of the pull and both Girsanov drifts
    GridSpec grid = GridSpec::from_times(0.02, 0.1, 1.0);
    CoefficientSet m;
    m.id = "planar_rotation";
    m.d = 2;
    m.tau = 0.5;
    m.drift_b0 = [](double, Eigen::Ref<const Vec> x, Vec& b) {
        b[0] = -x[0] + 0.2 * x[1];
        b[1] = -x[1] - 0.2 * x[0];
    };
    m.drift_b1 = [](double, const SegmentView&, const EmpiricalMeasure& mu, Vec& b) {
        b = 0.1 * mu.mean_at_zero();
    };
    m.sigma = [](double, const SegmentView&, Mat& s) {
        s(0, 0) = 0.4;
        s(0, 1) = 0.1;
        s(1, 0) = -0.1;
        s(1, 1) = 0.3;
    };
    m.flags.distribution_dependent = true;
    m.flags.sigma_invertible = true;
    m.flags.constant_sigma = true;
    m.constants.tau = 0.5;
    m.constants.K1 = 1.5;
    m.constants.K2 = 0.005;
    m.constants.sigma_inv_norm = 10.0;

    Vec x0(2);
    x0 << 1.0, -0.5;
    std::vector<WeightedSegment> init(8, point_path(x0, 0.5, grid));
    EmpiricalMeasureFlow flow =
        EmpiricalMeasureFlow::constant(grid, EmpiricalMeasure::from_segments(init));
    NoisePlan plan(404);
    CouplingConfig cfg;
    cfg.kappa = 3.0;
    CouplingRun run = run_coupling(m, init, init, flow, flow, grid, plan, cfg);
    for (long i = 0; i < 8; ++i) {
        for (long t = 0; t <= grid.n_sim; ++t) {
            CHECK(run.x_ensemble.particle(i).value(t)[0] ==
                  run.y_ensemble.particle(i).value(t)[0]);
            CHECK(run.x_ensemble.particle(i).value(t)[1] ==
                  run.y_ensemble.particle(i).value(t)[1]);
            CHECK(run.ledger.log_weight(i, t) == 0.0);
        }
    }
    CHECK(epr_sweep(run.x_ensemble, 2.0).violations == 0);

    // separated starts still decay toward each other under the pull
    Vec y0(2);
    y0 << 0.0, 0.5;
    std::vector<WeightedSegment> init_nu(8, point_path(y0, 0.5, grid));
    CouplingRun run2 = run_coupling(m, init, init_nu, flow,
                                    EmpiricalMeasureFlow::constant(
                                        grid, EmpiricalMeasure::from_segments(init_nu)),
                                    grid, plan, cfg);
    CHECK(run2.gap_p_weighted.back() < run2.gap_p_weighted.front());
    CHECK(std::isfinite(run2.entropy_identity.back()));
}

TEST_CASE("coupling configuration contracts") {
    GridSpec grid = cpl_grid();
    CoefficientSet model = ou_model(0.5, 1.0, 0.5);
    NoisePlan plan(1);
    auto mu = points(1.0, 0.5, grid, 2);
    auto nu = points(0.0, 0.5, grid, 2);
    CouplingConfig bad;
    bad.kappa = 0.3;  // below tau
    CHECK_THROWS_AS(run_coupling(model, mu, nu, dflow(0.0, 0.5, grid), dflow(0.0, 0.5, grid),
                                 grid, plan, bad),
                    Error);
    CoefficientSet no_inv = ou_model(0.5, 1.0, 0.0);
    CouplingConfig cfg;
    cfg.kappa = 3.0;
    CHECK_THROWS_AS(run_coupling(no_inv, mu, nu, dflow(0.0, 0.5, grid), dflow(0.0, 0.5, grid),
                                 grid, plan, cfg),
                    Error);
}

TEST_CASE("gradient estimate: constant f, semigroup identity at t = 0, linear oracle") {
    GridSpec grid = GridSpec::from_times(0.005, 0.05, 2.0);
    double a = 1.0, sigma0 = 0.3;
    CoefficientSet model = ou_model(0.5, a, sigma0, 0.0, grid);
    NoisePlan plan(888);
    WeightedSegment xi = point_path(Vec::Constant(1, 0.5), 0.5, grid);
    WeightedSegment dir = point_path(Vec::Constant(1, 1.0), 0.5, grid);

    // constant f: everything is identically zero
    {
        GradientCheckResult res = gradient_estimate_check(
            model, TestFunction::constant(2.0), xi, dir, grid, plan, 64, 1e-3, 0.25, 2);
        for (const auto& row : res.rows) {
            CHECK(row.fd == 0.0);
            CHECK(row.var_term == 0.0);
            CHECK(row.residual == 0.0);
        }
        CHECK_FALSE(res.rate_defined);
    }

    // linear f: fd(0) is the exact directional derivative, fd(t) tracks the
    // scheme's directional gradient (1 - a h)^{t/h}
    {
        TestFunction f = TestFunction::linear(Vec::Constant(1, 1.0));
        GradientCheckResult res = gradient_estimate_check(model, f, xi, dir, grid, plan, 256,
                                                          1e-3, 0.25, 2);
        REQUIRE(res.rows.size() == static_cast<std::size_t>(grid.n_sim) + 1);
        CHECK(res.rows[0].fd == doctest::Approx(1.0).epsilon(1e-10));
        for (long t = 0; t <= grid.n_sim; t += grid.n_sim / 8) {
            double exact = std::pow(1.0 - a * grid.h, static_cast<double>(t));
            CHECK(std::abs(res.rows[static_cast<std::size_t>(t)].fd - exact) < 1e-9);
        }
        // the residual beyond the variance term decays at least at rate tau0
        REQUIRE(res.rate_defined);
        CHECK(res.fitted_rate <= -0.25);
        CHECK_FALSE(res.unstable);
    }
}
