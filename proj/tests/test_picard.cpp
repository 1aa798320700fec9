#include "memflow/picard.hpp"

#include <doctest.h>

#include <cmath>
#include <vector>

using namespace memflow;

namespace {

GridSpec pic_grid() { return GridSpec::from_times(0.02, 0.1, 1.0); }

EmpiricalMeasure dirac_gamma(double x, double tau, const GridSpec& grid, long m) {
    std::vector<WeightedSegment> atoms(static_cast<std::size_t>(m),
                                       point_path(Vec::Constant(1, x), tau, grid));
    return EmpiricalMeasure::from_segments(std::move(atoms));
}

}  // namespace

TEST_CASE("distribution-independent model: second iterate distance is exactly zero") {
    GridSpec grid = pic_grid();
    CoefficientSet model = builtin_model(
        "linear_memory_meanfield",
        json{{"tau", 0.5}, {"a", 1.0}, {"gamma", 0.0}, {"sigma0", 0.3}}, grid);
    NoisePlan plan(3003);
    PicardConfig cfg;
    cfg.tol = 1e-3;
    PicardResult res = solve_fixed_point(model, dirac_gamma(1.0, 0.5, grid, 16), grid, cfg, plan);
    CHECK(res.trace.converged);
    CHECK(res.trace.iterations == 1);
    REQUIRE(res.trace.distances.size() == 1);
    CHECK(res.trace.distances[0] == 0.0);
    // the two realized flows are bit-identical
    REQUIRE(res.trace.flows.size() == 2);
    for (double v : res.trace.w2_profiles[0]) CHECK(v == 0.0);
    CHECK(res.trace.certified);
    CHECK(res.trace.certified_distance == 0.0);
}

TEST_CASE("linear mean-field fixed point: convergence, contraction, mean oracle") {
    GridSpec grid = pic_grid();
    double a = 1.0, gamma_mf = 0.3, sigma0 = 0.2;
    CoefficientSet model = builtin_model(
        "linear_memory_meanfield",
        json{{"tau", 0.5}, {"a", a}, {"gamma", gamma_mf}, {"sigma0", sigma0}}, grid);
    NoisePlan plan(11);
    const long m = 128;
    PicardConfig cfg;
    cfg.tol = 1e-4;
    cfg.max_iter = 25;
    cfg.threads = 4;
    PicardResult res = solve_fixed_point(model, dirac_gamma(1.0, 0.5, grid, m), grid, cfg, plan);
    CHECK(res.trace.converged);
    CHECK(res.trace.certified);
    CHECK(res.trace.theta_used ==
          doctest::Approx(2.0 * (model.constants.K1 + model.constants.K2 + 1.0)));

    // contraction of the iterate gaps above the noise floor
    for (double r : res.trace.ratios) {
        if (std::isfinite(r)) CHECK(r < 1.0);
    }

    // fixed-point ensemble mean vs m0 e^{(gamma - a) t}
    const EmpiricalMeasureFlow& flow = res.flow;
    for (long t = 0; t <= grid.n_sim; ++t) {
        EmpiricalMeasure mu = flow.at(t);
        double mean = mu.mean_at_zero()[0];
        double pred = std::exp((gamma_mf - a) * grid.time_at(t));
        double tol = 3.0 * (sigma0 / std::sqrt(static_cast<double>(m)) + 2.0 * grid.h);
        CHECK(std::abs(mean - pred) < tol);
    }
}

TEST_CASE("fixed point matches the interacting particle system") {
    GridSpec grid = pic_grid();
    CoefficientSet model = builtin_model(
        "linear_memory_meanfield",
        json{{"tau", 0.5}, {"a", 1.0}, {"gamma", 0.3}, {"sigma0", 0.2}}, grid);
    NoisePlan plan(77);
    const long m = 64;
    EmpiricalMeasure gamma = dirac_gamma(1.0, 0.5, grid, m);
    PicardConfig cfg;
    cfg.tol = 1e-5;
    cfg.max_iter = 40;
    PicardResult res = solve_fixed_point(model, gamma, grid, cfg, plan);
    REQUIRE(res.trace.converged);

    std::vector<WeightedSegment> initials(static_cast<std::size_t>(m),
                                          point_path(Vec::Constant(1, 1.0), 0.5, grid));
    InteractingResult inter = simulate_interacting(model, initials, grid, plan);
    std::vector<double> prof = w2_profile(res.flow, inter.flow, 2);
    double dist = theta_weighted_max(prof, grid, res.trace.theta_used);
    CHECK(dist <= 2.0 * cfg.tol);
}

TEST_CASE("trace distances obey the recorded contraction factor") {
    GridSpec grid = pic_grid();
    CoefficientSet model = builtin_model(
        "linear_memory_meanfield",
        json{{"tau", 0.5}, {"a", 1.0}, {"gamma", 0.45}, {"sigma0", 0.25}}, grid);
    NoisePlan plan(5150);
    PicardConfig cfg;
    cfg.tol = 1e-7;  // force many iterations
    cfg.max_iter = 12;
    PicardResult res = solve_fixed_point(model, dirac_gamma(1.0, 0.5, grid, 64), grid, cfg, plan);
    const auto& d = res.trace.distances;
    REQUIRE(d.size() >= 3);
    double max_ratio = 0.0;
    for (double r : res.trace.ratios)
        if (std::isfinite(r)) max_ratio = std::max(max_ratio, r);
    REQUIRE(max_ratio > 0.0);
    double floor = cfg.tol * 1e-3;
    for (std::size_t j = 0; j + 1 < d.size(); ++j)
        CHECK(d[j + 1] <= max_ratio * d[j] + floor);
}

TEST_CASE("contraction report: theta sweep and degenerate trace") {
    GridSpec grid = pic_grid();
    CoefficientSet model = builtin_model(
        "linear_memory_meanfield",
        json{{"tau", 0.5}, {"a", 1.0}, {"gamma", 0.45}, {"sigma0", 0.25}}, grid);
    NoisePlan plan(5150);
    PicardConfig cfg;
    cfg.tol = 1e-7;
    cfg.max_iter = 12;
    PicardResult res = solve_fixed_point(model, dirac_gamma(1.0, 0.5, grid, 64), grid, cfg, plan);
    REQUIRE(res.trace.w2_profiles.size() >= 3);

    std::vector<double> thetas = {0.0, 1.0, 2.0, 4.0, 8.0};
    ContractionReport rep = contraction_report(res.trace, grid, cfg.tol, thetas);
    REQUIRE(rep.rows.size() == thetas.size());

    // ratios shrink as theta grows (e^{-theta t} damping)
    double prev = 1e300;
    for (const ContractionRow& row : rep.rows) {
        REQUIRE_FALSE(row.degenerate);
        CHECK(row.max_ratio <= prev + 1e-12);
        prev = row.max_ratio;
    }

    // theta = 0 equals plain sup-in-time W2 ratios recomputed by hand
    std::vector<double> d0;
    for (const auto& prof : res.trace.w2_profiles)
        d0.push_back(theta_weighted_max(prof, grid, 0.0));
    double hand = 0.0;
    for (std::size_t j = 0; j + 1 < d0.size(); ++j)
        if (d0[j] > cfg.tol * 1e-3) hand = std::max(hand, d0[j + 1] / d0[j]);
    CHECK(rep.rows[0].max_ratio == doctest::Approx(hand).epsilon(1e-13));

    // degenerate trace: distribution-independent model has all-zero distances
    CoefficientSet indep = builtin_model(
        "linear_memory_meanfield", json{{"tau", 0.5}, {"a", 1.0}, {"sigma0", 0.3}}, grid);
    PicardConfig c2;
    c2.tol = 1e-3;
    c2.max_iter = 6;
    NoisePlan plan2(99);
    PicardResult r2 = solve_fixed_point(indep, dirac_gamma(1.0, 0.5, grid, 8), grid, c2, plan2);
    CHECK(r2.trace.iterations == 1);  // too few recorded profiles
    CHECK_THROWS_AS(contraction_report(r2.trace, grid, c2.tol, thetas), Error);
}

TEST_CASE("gamma with non-finite moments is rejected up front") {
    GridSpec grid = pic_grid();
    CoefficientSet model = builtin_model(
        "linear_memory_meanfield", json{{"tau", 0.5}, {"a", 1.0}, {"sigma0", 0.3}}, grid);
    NoisePlan plan(1);
    std::vector<WeightedSegment> atoms;
    atoms.push_back(point_path(Vec::Constant(1, std::numeric_limits<double>::infinity()), 0.5,
                               grid));
    EmpiricalMeasure bad = EmpiricalMeasure::from_segments(std::move(atoms));
    PicardConfig cfg;
    CHECK_THROWS_AS(solve_fixed_point(model, bad, grid, cfg, plan), Error);
}

TEST_CASE("common noise vs independent noise across iterations") {
    GridSpec grid = pic_grid();
    CoefficientSet model = builtin_model(
        "linear_memory_meanfield",
        json{{"tau", 0.5}, {"a", 1.0}, {"gamma", 0.3}, {"sigma0", 0.2}}, grid);
    NoisePlan plan(321);
    EmpiricalMeasure gamma = dirac_gamma(1.0, 0.5, grid, 32);
    PicardConfig common;
    common.tol = 1e-4;
    common.max_iter = 30;
    PicardConfig indep = common;
    indep.common_noise = false;
    indep.tol = 5e-2;  // independent noise floors out at the MC scale
    PicardResult rc = solve_fixed_point(model, gamma, grid, common, plan);
    PicardResult ri = solve_fixed_point(model, gamma, grid, indep, plan);
    CHECK(rc.trace.converged);
    // with common noise the final gap sits far below the MC noise floor of
    // the independent-noise iteration
    REQUIRE(ri.trace.distances.size() >= 1);
    CHECK(rc.trace.distances.back() < ri.trace.distances.back());
}
