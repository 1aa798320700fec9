#include "memflow/measure.hpp"

#include "memflow/assignment.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

using namespace memflow;

namespace {

WeightedSegment constant_seg(double value, double tau, const GridSpec& grid) {
    return point_path(Vec::Constant(1, value), tau, grid);
}

EmpiricalMeasure measure_of_constants(const std::vector<double>& xs, double tau,
                                      const GridSpec& grid) {
    std::vector<WeightedSegment> segs;
    for (double x : xs) segs.push_back(constant_seg(x, tau, grid));
    return EmpiricalMeasure::from_segments(std::move(segs));
}

WeightedSegment random_seg(std::mt19937_64& rng, double tau, const GridSpec& grid) {
    std::normal_distribution<double> g(0.0, 2.0);
    std::vector<double> vals(static_cast<std::size_t>(grid.n_hist) + 1);
    for (double& v : vals) v = g(rng);
    return WeightedSegment(tau, grid.h, 1, std::move(vals));
}

EmpiricalMeasure random_measure(std::mt19937_64& rng, double tau, const GridSpec& grid, long m) {
    std::vector<WeightedSegment> segs;
    for (long i = 0; i < m; ++i) segs.push_back(random_seg(rng, tau, grid));
    return EmpiricalMeasure::from_segments(std::move(segs));
}

// Permutation-enumeration oracle for the optimal assignment cost.
double brute_force_wasserstein(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu, double k,
                               double window) {
    long m = mu.size();
    std::vector<int> perm(static_cast<std::size_t>(m));
    std::iota(perm.begin(), perm.end(), 0);
    double best = 1e300;
    long n_window = static_cast<long>(std::llround(window / mu.h()));
    do {
        double tot = 0.0;
        for (long i = 0; i < m; ++i) {
            const SegmentView& a = mu.atom(i);
            const SegmentView& b = nu.atom(perm[static_cast<std::size_t>(i)]);
            double cost = 0.0;
            for (long lag = 0; lag <= n_window; ++lag) {
                double w = std::exp(-mu.tau() * (static_cast<double>(lag) * mu.h()));
                cost = std::max(cost, w * std::abs(a.at_lag(lag)[0] - b.at_lag(lag)[0]));
            }
            tot += std::pow(cost, k);
        }
        best = std::min(best, tot);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return std::pow(best / static_cast<double>(m), 1.0 / std::max(1.0, k));
}

}  // namespace

TEST_CASE("assignment solver equals permutation enumeration") {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> u(0.0, 10.0);
    for (int n = 1; n <= 7; ++n) {
        for (int rep = 0; rep < 60; ++rep) {
            std::vector<double> cost(static_cast<std::size_t>(n) * n);
            for (double& c : cost) c = u(rng);
            // ties exercise the degenerate branches
            if (rep % 5 == 0)
                for (double& c : cost) c = std::round(c);
            AssignmentResult sol = solve_assignment(cost, n);
            std::vector<int> perm(static_cast<std::size_t>(n));
            std::iota(perm.begin(), perm.end(), 0);
            double best = 1e300;
            do {
                double tot = 0.0;
                for (int i = 0; i < n; ++i)
                    tot += cost[static_cast<std::size_t>(i) * n + perm[static_cast<std::size_t>(i)]];
                best = std::min(best, tot);
            } while (std::next_permutation(perm.begin(), perm.end()));
            CHECK(sol.total == doctest::Approx(best).epsilon(1e-12));
            // the reported assignment must be a permutation realizing the total
            std::vector<bool> seen(static_cast<std::size_t>(n), false);
            double realized = 0.0;
            for (int i = 0; i < n; ++i) {
                int j = sol.row_to_col[static_cast<std::size_t>(i)];
                CHECK(!seen[static_cast<std::size_t>(j)]);
                seen[static_cast<std::size_t>(j)] = true;
                realized += cost[static_cast<std::size_t>(i) * n + j];
            }
            CHECK(realized == sol.total);
        }
    }
}

TEST_CASE("assignment solver survives near-tie and duplicate-entry matrices") {
    std::mt19937_64 rng(13);
    std::normal_distribution<double> g(0.0, 2.0);
    // |a_i - b_j| structure produces ulp-level near-ties in the dual updates
    for (int n : {2, 3, 5, 7}) {
        for (int rep = 0; rep < 200; ++rep) {
            std::vector<double> a(static_cast<std::size_t>(n)), b(static_cast<std::size_t>(n));
            for (double& x : a) x = g(rng);
            for (double& x : b) x = g(rng);
            std::vector<double> cost(static_cast<std::size_t>(n) * n);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j)
                    cost[static_cast<std::size_t>(i) * n + j] =
                        std::abs(a[static_cast<std::size_t>(i)] - b[static_cast<std::size_t>(j)]);
            AssignmentResult sol = solve_assignment(cost, n);
            std::vector<int> perm(static_cast<std::size_t>(n));
            std::iota(perm.begin(), perm.end(), 0);
            double best = 1e300;
            do {
                double tot = 0.0;
                for (int i = 0; i < n; ++i)
                    tot += cost[static_cast<std::size_t>(i) * n + perm[static_cast<std::size_t>(i)]];
                best = std::min(best, tot);
            } while (std::next_permutation(perm.begin(), perm.end()));
            CHECK(sol.total <= best + 1e-10);
            CHECK(sol.total >= best - 1e-10);
        }
    }
    // all-equal costs: any permutation is optimal, solver must terminate
    for (int n : {1, 2, 16, 64}) {
        std::vector<double> cost(static_cast<std::size_t>(n) * n, 3.25);
        AssignmentResult sol = solve_assignment(cost, n);
        CHECK(sol.total == doctest::Approx(3.25 * n).epsilon(1e-14));
    }
}

TEST_CASE("wasserstein: identity, singleton, and the two-atom example") {
    GridSpec grid(1.0, 2, 0);
    EmpiricalMeasure mu = measure_of_constants({0.0, 10.0}, 0.5, grid);
    EmpiricalMeasure nu = measure_of_constants({1.0, 2.0}, 0.5, grid);

    CHECK(wasserstein(mu, mu, 2.0) == 0.0);

    EmpiricalMeasure d1 = measure_of_constants({3.0}, 0.5, grid);
    EmpiricalMeasure d2 = measure_of_constants({-1.0}, 0.5, grid);
    CHECK(wasserstein(d1, d2, 2.0) == doctest::Approx(4.0).epsilon(1e-15));

    // costs are |0-1|, |10-2| vs |0-2|, |10-1|: (1+64)/2 beats (4+81)/2
    double expected = std::sqrt(65.0 / 2.0);
    CHECK(wasserstein(mu, nu, 2.0) == doctest::Approx(expected).epsilon(1e-14));
    CHECK(wasserstein(mu, nu, 2.0) == doctest::Approx(5.70088).epsilon(1e-5));
}

TEST_CASE("wasserstein input contracts") {
    GridSpec grid(1.0, 2, 0);
    EmpiricalMeasure mu = measure_of_constants({0.0, 1.0}, 0.5, grid);
    EmpiricalMeasure nu = measure_of_constants({0.0, 1.0, 2.0}, 0.5, grid);
    CHECK_THROWS_AS(wasserstein(mu, nu, 2.0), Error);
    try {
        wasserstein(mu, nu, 2.0);
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::UnsupportedCoupling);
    }
    EmpiricalMeasure ok = measure_of_constants({0.5, 1.5}, 0.5, grid);
    CHECK_THROWS_AS(wasserstein(mu, ok, 0.0), Error);
    CHECK_THROWS_AS(wasserstein(mu, ok, -1.0), Error);
}

TEST_CASE("wasserstein equals permutation enumeration for small ensembles") {
    std::mt19937_64 rng(77);
    GridSpec grid(0.5, 4, 0);
    for (long m : {2L, 3L, 4L, 5L, 6L}) {
        for (int rep = 0; rep < 20; ++rep) {
            EmpiricalMeasure mu = random_measure(rng, 0.8, grid, m);
            EmpiricalMeasure nu = random_measure(rng, 0.8, grid, m);
            for (double k : {1.0, 2.0}) {
                double exact = brute_force_wasserstein(mu, nu, k, grid.t_hist());
                CHECK(wasserstein(mu, nu, k) == doctest::Approx(exact).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("wasserstein is nondecreasing in the window") {
    std::mt19937_64 rng(31);
    GridSpec grid(0.5, 6, 0);
    for (int rep = 0; rep < 30; ++rep) {
        EmpiricalMeasure mu = random_measure(rng, 0.7, grid, 4);
        EmpiricalMeasure nu = random_measure(rng, 0.7, grid, 4);
        double prev = 0.0;
        for (long n = 1; n <= 6; ++n) {
            double cur = wasserstein(mu, nu, 2.0, 0.5 * static_cast<double>(n));
            CHECK(cur >= prev - 1e-13);
            prev = cur;
        }
    }
}

TEST_CASE("wasserstein triangle inequality on random triples") {
    std::mt19937_64 rng(555);
    GridSpec grid(0.5, 3, 0);
    for (int rep = 0; rep < 1000; ++rep) {
        long m = 1 + static_cast<long>(rng() % 5);
        EmpiricalMeasure a = random_measure(rng, 0.9, grid, m);
        EmpiricalMeasure b = random_measure(rng, 0.9, grid, m);
        EmpiricalMeasure c = random_measure(rng, 0.9, grid, m);
        for (double k : {1.0, 2.0}) {
            double ab = wasserstein(a, b, k);
            double bc = wasserstein(b, c, k);
            double ac = wasserstein(a, c, k);
            CHECK(ac <= ab + bc + 1e-12);
            CHECK(wasserstein(b, a, k) == doctest::Approx(ab).epsilon(1e-13));
        }
    }
}

TEST_CASE("shared-randomness coupling upper-bounds the assignment optimum") {
    // any fixed pairing is a coupling, so its cost dominates the optimum
    std::mt19937_64 rng(4321);
    GridSpec grid(0.5, 3, 0);
    for (int rep = 0; rep < 100; ++rep) {
        long m = 2 + static_cast<long>(rng() % 4);
        EmpiricalMeasure a = random_measure(rng, 0.9, grid, m);
        EmpiricalMeasure b = random_measure(rng, 0.9, grid, m);
        double identity_cost = 0.0;
        for (long i = 0; i < m; ++i) {
            double cost = 0.0;
            for (long lag = 0; lag <= grid.n_hist; ++lag) {
                double w = std::exp(-0.9 * (static_cast<double>(lag) * grid.h));
                cost = std::max(cost, w * std::abs(a.atom(i).at_lag(lag)[0] -
                                                   b.atom(i).at_lag(lag)[0]));
            }
            identity_cost += cost * cost;
        }
        identity_cost = std::sqrt(identity_cost / static_cast<double>(m));
        CHECK(wasserstein(a, b, 2.0) <= identity_cost + 1e-13);
    }
}

TEST_CASE("wasserstein with k < 1 uses the unit outer exponent") {
    GridSpec grid(1.0, 2, 0);
    EmpiricalMeasure d1 = measure_of_constants({3.0}, 0.5, grid);
    EmpiricalMeasure d2 = measure_of_constants({-1.0}, 0.5, grid);
    // singleton coupling: W_k(delta, delta) = cost^k for k < 1
    CHECK(wasserstein(d1, d2, 0.5) == doctest::Approx(std::pow(4.0, 0.5)).epsilon(1e-14));
    EmpiricalMeasure mu = measure_of_constants({0.0, 10.0}, 0.5, grid);
    EmpiricalMeasure nu = measure_of_constants({1.0, 2.0}, 0.5, grid);
    // mean matched cost^k without the outer 1/k root
    double best = std::min((std::pow(1.0, 0.5) + std::pow(8.0, 0.5)) / 2.0,
                           (std::pow(2.0, 0.5) + std::pow(9.0, 0.5)) / 2.0);
    CHECK(wasserstein(mu, nu, 0.5) == doctest::Approx(best).epsilon(1e-13));
}

TEST_CASE("moment_norm: zero atoms, k = 0 convention, two-atom example") {
    GridSpec grid(1.0, 2, 0);
    EmpiricalMeasure zeros = measure_of_constants({0.0, 0.0, 0.0}, 0.5, grid);
    CHECK(moment_norm(zeros, 2.0) == 0.0);
    CHECK(moment_norm(zeros, 0.0) == 1.0);
    EmpiricalMeasure two = measure_of_constants({1.0, 3.0}, 0.5, grid);
    CHECK(moment_norm(two, 2.0) == doctest::Approx(std::sqrt(5.0)).epsilon(1e-15));
    CHECK(moment_norm(two, 0.0) == 1.0);
}

TEST_CASE("measure mean at zero is the plain average") {
    GridSpec grid(1.0, 2, 0);
    EmpiricalMeasure mu = measure_of_constants({1.0, 2.0, 6.0}, 0.5, grid);
    CHECK(mu.mean_at_zero()[0] == doctest::Approx(3.0).epsilon(1e-15));
}

TEST_CASE("flow distance: constant flows and the two-time example") {
    GridSpec grid(1.0, 2, 1);
    EmpiricalMeasure mu = measure_of_constants({0.0, 10.0}, 0.5, grid);
    EmpiricalMeasureFlow f = EmpiricalMeasureFlow::constant(grid, mu);
    CHECK(flow_distance_theta(f, f, 0.7) == 0.0);

    // constant-in-time W2 = w: the weighted sup is attained at t = 0
    EmpiricalMeasure nu = measure_of_constants({1.0, 2.0}, 0.5, grid);
    EmpiricalMeasureFlow gflow = EmpiricalMeasureFlow::constant(grid, nu);
    double w = wasserstein(mu, nu, 2.0);
    CHECK(flow_distance_theta(f, gflow, 0.7) == doctest::Approx(w).epsilon(1e-14));
    // theta = 0 is the plain sup in time
    CHECK(flow_distance_theta(f, gflow, 0.0) == doctest::Approx(w).epsilon(1e-14));
}

TEST_CASE("flow distance: two-time example with a growing W2 profile") {
    // W2(0) = 1 and W2(h) = e^{theta h} * 2: the weighted max is 2 at t = h
    double theta = 0.7;
    GridSpec grid(1.0, 1, 1);
    auto mk = [&](double v_hist, double v0, double v1) {
        auto particles = std::make_shared<std::vector<Trajectory>>();
        Trajectory traj(grid, 0.9, 1);
        traj.value_mut(-1)[0] = v_hist;
        traj.value_mut(0)[0] = v0;
        traj.value_mut(1)[0] = v1;
        particles->push_back(std::move(traj));
        EmpiricalMeasureFlow::Backing b;
        b.particle_data.push_back(particles->front().raw());
        b.tau = 0.9;
        b.h = grid.h;
        b.n_hist = grid.n_hist;
        b.d = 1;
        b.keepalive = particles;
        return EmpiricalMeasureFlow::from_backing(grid, std::move(b));
    };
    EmpiricalMeasureFlow f = mk(0.0, 0.0, 0.0);
    EmpiricalMeasureFlow g = mk(0.0, 1.0, std::exp(theta) * 2.0);
    double w0 = wasserstein(f.at(0), g.at(0), 2.0);
    double w1 = wasserstein(f.at(1), g.at(1), 2.0);
    CHECK(w0 == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(w1 == doctest::Approx(std::exp(theta) * 2.0).epsilon(1e-13));
    // direct evaluation of the weighted max over the two grid times
    double direct = std::max(w0, std::exp(-theta * grid.h) * w1);
    CHECK(flow_distance_theta(f, g, theta) == doctest::Approx(direct).epsilon(1e-13));
    CHECK(flow_distance_theta(f, g, theta) == doctest::Approx(2.0).epsilon(1e-13));
}

TEST_CASE("flow distance is nonincreasing in theta") {
    std::mt19937_64 rng(808);
    GridSpec grid(0.5, 3, 4);

    // ensemble-backed flows from hand-built trajectories
    auto mk_flow = [&](std::uint64_t salt) {
        auto particles = std::make_shared<std::vector<Trajectory>>();
        std::normal_distribution<double> g(0.0, 1.0);
        std::mt19937_64 local(salt);
        for (int i = 0; i < 5; ++i) {
            Trajectory traj(grid, 0.8, 1);
            for (long t = -3; t <= 4; ++t) traj.value_mut(t)[0] = g(local);
            particles->push_back(std::move(traj));
        }
        EmpiricalMeasureFlow::Backing b;
        for (const Trajectory& traj : *particles) b.particle_data.push_back(traj.raw());
        b.tau = 0.8;
        b.h = grid.h;
        b.n_hist = grid.n_hist;
        b.d = 1;
        b.keepalive = particles;
        return EmpiricalMeasureFlow::from_backing(grid, std::move(b));
    };
    EmpiricalMeasureFlow f = mk_flow(1);
    EmpiricalMeasureFlow g = mk_flow(2);
    double prev = 1e300;
    for (double theta : {0.0, 0.5, 1.0, 2.0, 4.0}) {
        double cur = flow_distance_theta(f, g, theta);
        CHECK(cur <= prev + 1e-13);
        prev = cur;
    }
}

TEST_CASE("backed sweep agrees with the per-time assignment route") {
    std::mt19937_64 rng(909);
    GridSpec grid(0.25, 5, 12);
    std::normal_distribution<double> g(0.0, 1.0);
    auto mk = [&](int m) {
        auto particles = std::make_shared<std::vector<Trajectory>>();
        for (int i = 0; i < m; ++i) {
            Trajectory traj(grid, 1.1, 1);
            for (long t = -5; t <= 12; ++t) traj.value_mut(t)[0] = g(rng);
            particles->push_back(std::move(traj));
        }
        EmpiricalMeasureFlow::Backing b;
        for (const Trajectory& traj : *particles) b.particle_data.push_back(traj.raw());
        b.tau = 1.1;
        b.h = grid.h;
        b.n_hist = grid.n_hist;
        b.d = 1;
        b.keepalive = particles;
        return EmpiricalMeasureFlow::from_backing(grid, std::move(b));
    };
    EmpiricalMeasureFlow f = mk(6);
    EmpiricalMeasureFlow gf = mk(6);
    std::vector<double> fast = w2_profile(f, gf, 2);
    REQUIRE(fast.size() == 13);
    for (long t = 0; t <= 12; ++t) {
        double direct = wasserstein(f.at(t), gf.at(t), 2.0);
        CHECK(fast[static_cast<std::size_t>(t)] == doctest::Approx(direct).epsilon(1e-12));
    }
    // identical flows: exactly zero through both routes
    std::vector<double> zero = w2_profile(f, f, 2);
    for (double v : zero) CHECK(v == 0.0);
}
