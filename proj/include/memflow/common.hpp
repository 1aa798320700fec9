#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace memflow {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Error taxonomy shared across the library. Every throwing operation uses
/// one of these kinds so callers (and the CLI) can map failures to exit codes
/// without string matching.
enum class ErrorKind {
    MalformedSegment,
    GridMismatch,
    OutOfRange,
    Shape,
    Numeric,
    Domain,
    UnsupportedCoupling,
    MatrixInversion,
    BlowUp,
    Config,
    Io,
};

inline const char* error_kind_name(ErrorKind k) {
    switch (k) {
        case ErrorKind::MalformedSegment: return "malformed-segment";
        case ErrorKind::GridMismatch: return "grid-mismatch";
        case ErrorKind::OutOfRange: return "out-of-range";
        case ErrorKind::Shape: return "shape";
        case ErrorKind::Numeric: return "numeric";
        case ErrorKind::Domain: return "domain";
        case ErrorKind::UnsupportedCoupling: return "unsupported-coupling";
        case ErrorKind::MatrixInversion: return "matrix-inversion";
        case ErrorKind::BlowUp: return "blow-up";
        case ErrorKind::Config: return "config";
        case ErrorKind::Io: return "io";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg)
        : std::runtime_error(std::string(error_kind_name(kind)) + ": " + msg), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
    if (!cond) throw Error(kind, msg);
}

inline bool all_finite(const Vec& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i)
        if (!std::isfinite(v[i])) return false;
    return true;
}

inline bool all_finite(const Mat& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i)
        if (!std::isfinite(m.data()[i])) return false;
    return true;
}

}  // namespace memflow
