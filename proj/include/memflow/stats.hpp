#pragma once

#include "memflow/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace memflow {

struct MeanStderr {
    double mean = 0.0;
    double stderr_ = 0.0;
    long n = 0;
};

inline MeanStderr mean_stderr(const std::vector<double>& xs) {
    MeanStderr r;
    r.n = static_cast<long>(xs.size());
    if (r.n == 0) return r;
    double s = 0.0;
    for (double x : xs) s += x;
    r.mean = s / static_cast<double>(r.n);
    if (r.n < 2) return r;
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.stderr_ = std::sqrt(ss / (static_cast<double>(r.n) * (r.n - 1.0)));
    return r;
}

/// Self-normalized importance-sampling mean with a delta-method standard
/// error and the effective sample size of the weights.
struct WeightedMean {
    double mean = 0.0;
    double stderr_ = 0.0;
    double ess = 0.0;
};

inline WeightedMean weighted_mean(const std::vector<double>& values,
                                  const std::vector<double>& weights) {
    require(values.size() == weights.size(), ErrorKind::Shape, "weighted mean size mismatch");
    WeightedMean r;
    double sw = 0.0, sw2 = 0.0;
    for (double w : weights) {
        sw += w;
        sw2 += w * w;
    }
    require(sw > 0.0, ErrorKind::Numeric, "weights sum to zero");
    double m = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) m += weights[i] * values[i];
    m /= sw;
    double var = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        double wn = weights[i] / sw;
        var += wn * wn * (values[i] - m) * (values[i] - m);
    }
    r.mean = m;
    r.stderr_ = std::sqrt(var);
    r.ess = sw * sw / sw2;
    return r;
}

/// Ordinary least squares line y = a + b x.
struct LineFit {
    double intercept = 0.0;
    double slope = 0.0;
    double r2 = 0.0;
    long n = 0;
};

inline LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
    require(x.size() == y.size(), ErrorKind::Shape, "fit size mismatch");
    LineFit f;
    f.n = static_cast<long>(x.size());
    require(f.n >= 2, ErrorKind::Domain, "line fit needs at least 2 points");
    double mx = 0.0, my = 0.0;
    for (long i = 0; i < f.n; ++i) {
        mx += x[static_cast<std::size_t>(i)];
        my += y[static_cast<std::size_t>(i)];
    }
    mx /= static_cast<double>(f.n);
    my /= static_cast<double>(f.n);
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (long i = 0; i < f.n; ++i) {
        double dx = x[static_cast<std::size_t>(i)] - mx;
        double dy = y[static_cast<std::size_t>(i)] - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    require(sxx > 0.0, ErrorKind::Domain, "line fit: x values are all equal");
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    f.r2 = (syy > 0.0) ? (sxy * sxy) / (sxx * syy) : 1.0;
    return f;
}

/// Percentile bootstrap confidence interval for a statistic computed from
/// per-particle data. `statistic(indices)` receives a resample (with
/// replacement) of particle indices and returns the refitted statistic.
struct BootstrapCI {
    double lo = 0.0;
    double hi = 0.0;
    long replicates = 0;
};

template <typename StatFn>
BootstrapCI bootstrap_ci(long n_particles, long replicates, double level,
                         std::mt19937_64& rng, StatFn&& statistic) {
    require(n_particles >= 1, ErrorKind::Domain, "bootstrap needs particles");
    require(replicates >= 10, ErrorKind::Domain, "bootstrap needs >= 10 replicates");
    std::uniform_int_distribution<long> pick(0, n_particles - 1);
    std::vector<double> stats;
    stats.reserve(static_cast<std::size_t>(replicates));
    std::vector<long> idx(static_cast<std::size_t>(n_particles));
    for (long r = 0; r < replicates; ++r) {
        for (long i = 0; i < n_particles; ++i) idx[static_cast<std::size_t>(i)] = pick(rng);
        double s = statistic(idx);
        if (std::isfinite(s)) stats.push_back(s);
    }
    BootstrapCI ci;
    ci.replicates = static_cast<long>(stats.size());
    require(ci.replicates >= 10, ErrorKind::Numeric, "bootstrap produced too few finite replicates");
    std::sort(stats.begin(), stats.end());
    double alpha = (1.0 - level) / 2.0;
    auto at = [&](double q) {
        double pos = q * (static_cast<double>(stats.size()) - 1.0);
        std::size_t k = static_cast<std::size_t>(pos);
        double frac = pos - static_cast<double>(k);
        if (k + 1 >= stats.size()) return stats.back();
        return stats[k] * (1.0 - frac) + stats[k + 1] * frac;
    };
    ci.lo = at(alpha);
    ci.hi = at(1.0 - alpha);
    return ci;
}

/// Nonnegative least squares fit of y against two basis vectors; used by the
/// gradient-estimate diagnostic. Tries the three feasible active sets and
/// keeps the feasible minimizer.
struct TwoBasisFit {
    double c1 = 0.0;
    double c2 = 0.0;
};

inline TwoBasisFit nnls_two_basis(const std::vector<double>& y, const std::vector<double>& b1,
                                  const std::vector<double>& b2) {
    require(y.size() == b1.size() && y.size() == b2.size(), ErrorKind::Shape,
            "nnls size mismatch");
    auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        return s;
    };
    double a11 = dot(b1, b1), a12 = dot(b1, b2), a22 = dot(b2, b2);
    double r1 = dot(b1, y), r2 = dot(b2, y);
    auto sse = [&](double c1, double c2) {
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            double e = y[i] - c1 * b1[i] - c2 * b2[i];
            s += e * e;
        }
        return s;
    };
    double best = std::numeric_limits<double>::infinity();
    TwoBasisFit fit;
    double det = a11 * a22 - a12 * a12;
    if (det > 0.0) {
        double c1 = (r1 * a22 - r2 * a12) / det;
        double c2 = (r2 * a11 - r1 * a12) / det;
        if (c1 >= 0.0 && c2 >= 0.0) {
            fit = {c1, c2};
            best = sse(c1, c2);
        }
    }
    if (a11 > 0.0) {
        double c1 = std::max(0.0, r1 / a11);
        double s = sse(c1, 0.0);
        if (s < best) {
            best = s;
            fit = {c1, 0.0};
        }
    }
    if (a22 > 0.0) {
        double c2 = std::max(0.0, r2 / a22);
        double s = sse(0.0, c2);
        if (s < best) {
            best = s;
            fit = {0.0, c2};
        }
    }
    return fit;
}

}  // namespace memflow
