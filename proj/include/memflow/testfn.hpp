#pragma once

#include "memflow/common.hpp"
#include "memflow/segment.hpp"

#include <json.hpp>

#include <cmath>
#include <limits>
#include <string>

namespace memflow {

using json = nlohmann::json;

/// Test functions on path space form a small closed vocabulary so their
/// Lipschitz data (sup of the gradient and of the log-gradient, both with
/// respect to the weighted path norm) are supplied analytically instead of
/// being estimated. All kinds read the path only through xi(0).
///
///   constant:       f = c0
///   linear:         f = <v, xi(0)> + c0          (for gradient diagnostics)
///   exp_linear:     f = exp(<v, xi(0)> + c0)     (unbounded; Gaussian oracles)
///   bounded_smooth: f = c0 + c1 tanh(<v, xi(0)>) (bounded, strictly positive)
class TestFunction {
public:
    enum class Kind { Constant, Linear, ExpLinear, BoundedSmooth };

    static TestFunction constant(double c0) {
        TestFunction f;
        f.kind_ = Kind::Constant;
        f.c0_ = c0;
        return f;
    }

    static TestFunction linear(const Vec& v, double c0 = 0.0) {
        TestFunction f;
        f.kind_ = Kind::Linear;
        f.v_ = v;
        f.c0_ = c0;
        return f;
    }

    static TestFunction exp_linear(const Vec& v, double c0 = 0.0) {
        TestFunction f;
        f.kind_ = Kind::ExpLinear;
        f.v_ = v;
        f.c0_ = c0;
        return f;
    }

    static TestFunction bounded_smooth(const Vec& v, double c0, double c1) {
        require(c0 > c1 && c1 > 0.0, ErrorKind::Domain,
                "bounded_smooth needs c0 > c1 > 0 for strict positivity");
        TestFunction f;
        f.kind_ = Kind::BoundedSmooth;
        f.v_ = v;
        f.c0_ = c0;
        f.c1_ = c1;
        return f;
    }

    Kind kind() const { return kind_; }

    double operator()(const SegmentView& xi) const {
        double z = v_.size() > 0 ? v_.dot(xi.at_lag(0)) : 0.0;
        switch (kind_) {
            case Kind::Constant: return c0_;
            case Kind::Linear: return z + c0_;
            case Kind::ExpLinear: return std::exp(z + c0_);
            case Kind::BoundedSmooth: return c0_ + c1_ * std::tanh(z);
        }
        return 0.0;
    }

    bool strictly_positive() const {
        return kind_ == Kind::ExpLinear || kind_ == Kind::BoundedSmooth ||
               (kind_ == Kind::Constant && c0_ > 0.0);
    }

    /// sup_xi ||grad f||  in the weighted path norm (|xi(0)| <= ||xi||_tau).
    double grad_sup() const {
        switch (kind_) {
            case Kind::Constant: return 0.0;
            case Kind::Linear: return v_.norm();
            case Kind::ExpLinear: return std::numeric_limits<double>::infinity();
            case Kind::BoundedSmooth: return c1_ * v_.norm();
        }
        return 0.0;
    }

    /// sup_xi ||grad log f||.
    double grad_log_sup() const {
        switch (kind_) {
            case Kind::Constant: return 0.0;
            case Kind::Linear: return std::numeric_limits<double>::infinity();
            case Kind::ExpLinear: return v_.norm();
            case Kind::BoundedSmooth: return c1_ * v_.norm() / (c0_ - c1_);
        }
        return 0.0;
    }

    static TestFunction from_json(const json& j, int d) {
        require(j.is_object(), ErrorKind::Config, "test function must be an object");
        // grad_sup / grad_log_sup may appear on the wire; the analytic values
        // derived from (kind, params) are authoritative
        for (auto it = j.begin(); it != j.end(); ++it)
            require(it.key() == "kind" || it.key() == "params" || it.key() == "grad_sup" ||
                        it.key() == "grad_log_sup",
                    ErrorKind::Config, "unknown test-function key '" + it.key() + "'");
        std::string kind = j.at("kind").get<std::string>();
        json p = j.value("params", json::object());
        Vec v = Vec::Ones(d);
        if (p.contains("v")) {
            auto arr = p.at("v").get<std::vector<double>>();
            require(static_cast<int>(arr.size()) == d, ErrorKind::Config,
                    "test-function direction has wrong dimension");
            v = Eigen::Map<const Vec>(arr.data(), d);
        }
        double c0 = p.value("c0", kind == "bounded_smooth" ? 2.0 : 0.0);
        double c1 = p.value("c1", 1.0);
        if (kind == "constant") return constant(p.value("c0", 1.0));
        if (kind == "linear") return linear(v, c0);
        if (kind == "exp_linear") return exp_linear(v, c0);
        if (kind == "bounded_smooth") return bounded_smooth(v, c0, c1);
        throw Error(ErrorKind::Config, "unknown test-function kind '" + kind + "'");
    }

    json to_json() const {
        json p;
        if (v_.size() > 0) p["v"] = std::vector<double>(v_.data(), v_.data() + v_.size());
        p["c0"] = c0_;
        if (kind_ == Kind::BoundedSmooth) p["c1"] = c1_;
        const char* name = kind_ == Kind::Constant ? "constant"
                           : kind_ == Kind::Linear ? "linear"
                           : kind_ == Kind::ExpLinear ? "exp_linear"
                                                      : "bounded_smooth";
        json out{{"kind", name}, {"params", p}};
        double gs = grad_sup(), gls = grad_log_sup();
        out["grad_sup"] = std::isfinite(gs) ? json(gs) : json("inf");
        out["grad_log_sup"] = std::isfinite(gls) ? json(gls) : json("inf");
        return out;
    }

private:
    Kind kind_ = Kind::Constant;
    Vec v_;
    double c0_ = 1.0;
    double c1_ = 0.0;
};

}  // namespace memflow
