#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hiercontrol {

/// Base of every error raised by the library. `kind()` is a stable
/// machine-readable tag; `exit_code()` is what the CLI returns for it.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what, int code)
        : std::runtime_error(what), kind_(std::move(kind)), code_(code) {}

    const std::string& kind() const noexcept { return kind_; }
    int exit_code() const noexcept { return code_; }

    /// Optional numeric trail (iterate norms, residual history).
    const std::vector<double>& history() const noexcept { return history_; }
    Error& with_history(std::vector<double> h) {
        history_ = std::move(h);
        return *this;
    }

private:
    std::string kind_;
    int code_;
    std::vector<double> history_;
};

/// Bad input: malformed config, rejected geometry or coefficients,
/// failed weight construction. Exit code 2.
class ValidationError : public Error {
public:
    ValidationError(std::string kind, const std::string& what)
        : Error(std::move(kind), what, 2) {}
};

/// A solver gave up. Exit code 3.
class SolverError : public Error {
public:
    SolverError(std::string kind, const std::string& what)
        : Error(std::move(kind), what, 3) {}
};

class ConfigError : public ValidationError {
public:
    ConfigError(std::string path, const std::string& what)
        : ValidationError("ConfigError", path + ": " + what), path_(std::move(path)) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

inline ValidationError geometry_rejected(const std::string& what) { return {"GeometryRejected", what}; }
inline ValidationError coefficient_rejected(const std::string& what) { return {"CoefficientRejected", what}; }
inline ValidationError construction_failed(const std::string& what) { return {"ConstructionFailed", what}; }
inline ValidationError weight_inequality_violated(const std::string& what) {
    return {"WeightInequalityViolated", what};
}
inline ValidationError trajectory_condition_violated(const std::string& what) {
    return {"TrajectoryConditionViolated", what};
}

inline SolverError step_divergence(const std::string& what) { return {"StepDivergence", what}; }
inline SolverError singular_step(const std::string& what) { return {"SingularStep", what}; }
inline SolverError fixed_point_diverged(const std::string& what) { return {"FixedPointDiverged", what}; }
inline SolverError cg_stalled(const std::string& what) { return {"CGStalled", what}; }
inline SolverError form_not_coercive(const std::string& what) { return {"FormNotCoercive", what}; }
inline SolverError outer_diverged(const std::string& what) { return {"OuterDiverged", what}; }
inline SolverError degenerate_sample(const std::string& what) { return {"DegenerateSample", what}; }

}  // namespace hiercontrol
