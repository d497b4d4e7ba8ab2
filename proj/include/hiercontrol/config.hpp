#pragma once

#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "leader.hpp"

namespace hiercontrol {

using json = nlohmann::json;

struct FollowerSpec {
    double alpha = 1.0;
    double mu = 100.0;
    /// Constant target value on O_id x (0,T).
    double target = 0.0;
};

struct SolverSpec {
    double y0_amplitude = 1.0;
    int y0_mode = 1;
    unsigned long long seed = 0;
    std::string convection = "centered";
    WeightOptions weights;
    NashOptions nash;
    HumOptions hum;
    WlsOptions wls;
    PicardOptions picard;
};

/// A parsed configuration. Every field is optional; defaults give the heat
/// equation on (0,1) x (0,1) with the SameObservation geometry.
struct Config {
    json raw = json::object();
    SpaceTimeGrid grid;
    GeometrySpec geometry;
    Family family = Family::Constant;
    CoefficientParams coefficients;
    std::array<FollowerSpec, 2> followers;
    SolverSpec solver;

    CoefficientModel model() const { return CoefficientModel(family, coefficients); }

    Problem problem() const {
        const ControlGeometry geo = checked_geometry(geometry, grid);
        std::array<FollowerObjective, 2> fo;
        for (int i = 0; i < 2; ++i) {
            const auto& f = followers[static_cast<std::size_t>(i)];
            Field t(grid);
            for (int n = 1; n <= grid.Nt; ++n)
                for (int j = 1; j <= grid.Nx; ++j) t.cell(n)[static_cast<std::size_t>(j)] = f.target;
            fo[static_cast<std::size_t>(i)] = FollowerObjective{f.alpha, f.mu, std::move(t)};
        }
        return Problem(grid, geo, model(), std::move(fo), sine_profile(grid, solver.y0_amplitude, solver.y0_mode));
    }

    CarlemanWeights weights(const Problem& P) const {
        return build_weights(construct_eta(P.geo, grid), grid, P.geo.case_tag, solver.weights);
    }
};

namespace detail {

/// Typed access into one JSON object with path-qualified errors and a check
/// that no unknown keys are present.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_, "must be an object");
    }

    const std::string& path() const { return path_; }
    std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key) && !j_.at(key).is_null();
    }
    const json& raw(const std::string& key) const { return j_.at(key); }

    void number(const std::string& key, double& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_number()) throw ConfigError(at(key), "must be a number");
        out = v.get<double>();
    }
    template <class Int>
    void integer(const std::string& key, Int& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_number_integer()) throw ConfigError(at(key), "must be an integer");
        out = v.get<Int>();
    }
    void string(const std::string& key, std::string& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_string()) throw ConfigError(at(key), "must be a string");
        out = v.get<std::string>();
    }
    void optional_number(const std::string& key, std::optional<double>& out) {
        if (!has(key)) return;
        double v = 0.0;
        number(key, v);
        out = v;
    }
    void span(const std::string& key, Span& out) {
        if (!has(key)) return;
        out = parse_span(j_.at(key), at(key));
    }
    void optional_span(const std::string& key, std::optional<Span>& out) {
        if (!has(key)) return;
        out = parse_span(j_.at(key), at(key));
    }
    void numbers(const std::string& key, std::vector<double>& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_array() || v.empty()) throw ConfigError(at(key), "must be a nonempty array of numbers");
        out.clear();
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!v[i].is_number()) throw ConfigError(at(key) + "[" + std::to_string(i) + "]", "must be a number");
            out.push_back(v[i].get<double>());
        }
    }
    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw ConfigError(at(k), "unknown key");
    }

private:
    static Span parse_span(const json& v, const std::string& path) {
        if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
            throw ConfigError(path, "must be [lo, hi]");
        return {v[0].get<double>(), v[1].get<double>()};
    }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline void positive(double v, const std::string& path) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(path, "must be positive");
}

}  // namespace detail

inline Config parse_config(const json& doc) {
    Config c;
    c.raw = doc;
    detail::Section top(doc, "");
    if (top.has("grid")) {
        detail::Section s(top.raw("grid"), "grid");
        s.number("L", c.grid.L);
        s.number("T", c.grid.T);
        s.integer("Nx", c.grid.Nx);
        s.integer("Nt", c.grid.Nt);
        s.finish();
    }
    c.grid.check();

    if (top.has("geometry")) {
        detail::Section s(top.raw("geometry"), "geometry");
        auto& g = c.geometry;
        s.span("O", g.O);
        s.span("O1", g.O1);
        s.span("O2", g.O2);
        s.span("O1d", g.O1d);
        s.span("O2d", g.O2d);
        s.optional_span("O_tilde", g.O_tilde);
        s.optional_span("omega0", g.omega0);
        s.optional_span("omega1", g.omega1);
        s.optional_span("omega2", g.omega2);
        s.finish();
    }

    if (top.has("coefficients")) {
        detail::Section s(top.raw("coefficients"), "coefficients");
        std::string fam = family_name(c.family);
        s.string("family", fam);
        c.family = parse_family(fam);
        auto& p = c.coefficients;
        s.number("a_base", p.a_base);
        s.number("b", p.b);
        s.number("k", p.k);
        s.number("gamma", p.gamma);
        s.number("c1", p.c1);
        s.number("c2", p.c2);
        s.finish();
    }

    if (top.has("followers")) {
        const auto& arr = top.raw("followers");
        if (!arr.is_array() || arr.size() != 2) throw ConfigError("followers", "must be an array of two objects");
        for (std::size_t i = 0; i < 2; ++i) {
            detail::Section s(arr[i], "followers[" + std::to_string(i) + "]");
            auto& f = c.followers[i];
            s.number("alpha", f.alpha);
            s.number("mu", f.mu);
            s.number("target", f.target);
            s.finish();
            if (!(f.alpha >= 0.0) || !std::isfinite(f.alpha)) throw ConfigError(s.at("alpha"), "must be nonnegative");
            detail::positive(f.mu, s.at("mu"));
            if (!std::isfinite(f.target)) throw ConfigError(s.at("target"), "must be finite");
        }
    }

    if (top.has("solver")) {
        detail::Section s(top.raw("solver"), "solver");
        auto& v = c.solver;
        s.number("y0_amplitude", v.y0_amplitude);
        s.integer("y0_mode", v.y0_mode);
        s.integer("seed", v.seed);
        s.string("convection", v.convection);
        if (v.convection != "centered") throw ConfigError(s.at("convection"), "only \"centered\" is implemented");
        s.number("c_s", v.weights.c_s);
        s.optional_number("s", v.weights.s);
        s.optional_number("lambda", v.weights.lambda);
        s.number("nash_tol", v.nash.tol);
        s.integer("nash_max_sweeps", v.nash.max_sweeps);
        s.number("step_tol", v.nash.step.tol);
        s.numbers("eps_schedule", v.hum.eps_schedule);
        s.number("cg_tol", v.hum.cg_tol);
        v.wls.cg_tol = v.hum.cg_tol;
        s.integer("cg_max_iter", v.hum.max_iter);
        s.integer("wls_max_cycles", v.wls.max_cycles);
        s.integer("picard_max_outer", v.picard.max_outer);
        s.number("picard_tol", v.picard.tol);
        s.number("picard_damping", v.picard.damping);
        s.number("smallness_factor", v.picard.gate_factor);
        s.finish();
        if (!std::isfinite(v.y0_amplitude)) throw ConfigError(s.at("y0_amplitude"), "must be finite");
        if (v.y0_mode < 1) throw ConfigError(s.at("y0_mode"), "must be at least 1");
        for (const auto& [k, val] : {std::pair<const char*, double>{"nash_tol", v.nash.tol}, {"step_tol", v.nash.step.tol},
                                     {"cg_tol", v.hum.cg_tol}, {"picard_tol", v.picard.tol},
                                     {"picard_damping", v.picard.damping}})
            detail::positive(val, s.at(k));
        for (std::size_t i = 0; i < v.hum.eps_schedule.size(); ++i)
            detail::positive(v.hum.eps_schedule[i], s.at("eps_schedule") + "[" + std::to_string(i) + "]");
        if (v.nash.max_sweeps < 1) throw ConfigError(s.at("nash_max_sweeps"), "must be at least 1");
        if (v.picard.max_outer < 1) throw ConfigError(s.at("picard_max_outer"), "must be at least 1");
    }
    c.solver.picard.wls = c.solver.wls;
    top.finish();
    return c;
}

inline Config load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("(file)", "cannot open " + path);
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("(file)", std::string("malformed JSON: ") + e.what());
    }
    return parse_config(doc);
}

}  // namespace hiercontrol
