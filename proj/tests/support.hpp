#pragma once

#include <string>

#include "hiercontrol/hiercontrol.hpp"

namespace testing_support {

using namespace hiercontrol;

inline std::string config_path(const std::string& name) { return std::string(HIERCONTROL_CONFIG_DIR) + "/" + name; }

/// Control sets wide enough to hold interior nodes at Nx = 16.
inline GeometrySpec coarse_geometry() {
    GeometrySpec s;
    s.O = {0.25, 0.75};
    s.O1 = {0.05, 0.25};
    s.O2 = {0.75, 0.95};
    s.O1d = {0.35, 0.65};
    s.O2d = {0.35, 0.65};
    return s;
}

struct ProblemOptions {
    int Nx = 16, Nt = 16;
    double T = 1.0;
    Family family = Family::Constant;
    CoefficientParams coeffs;
    GeometrySpec geometry = coarse_geometry();
    double alpha = 1.0, mu = 100.0, target = 0.0;
    /// Targets vanish on cells with midpoint after target_until * T, so their
    /// weighted norm stays finite as the weights blow up at T.
    double target_until = 1.0;
    double amplitude = 1.0;
};

inline Problem make_problem(const ProblemOptions& o = {}) {
    const SpaceTimeGrid g(1.0, o.T, o.Nx, o.Nt);
    const auto geo = checked_geometry(o.geometry, g);
    std::array<FollowerObjective, 2> fo;
    for (auto& f : fo) {
        Field t(g);
        for (int n = 1; n <= g.Nt; ++n)
            if (g.tmid(n) <= o.target_until * o.T)
                for (int j = 1; j <= g.Nx; ++j) t(n, j) = o.target;
        f = FollowerObjective{o.alpha, o.mu, t};
    }
    return Problem(g, geo, CoefficientModel(o.family, o.coeffs), fo, sine_profile(g, o.amplitude));
}

inline CarlemanWeights weights_for(const Problem& P, const WeightOptions& o = {}) {
    return build_weights(construct_eta(P.geo, P.grid), P.grid, P.geo.case_tag, o);
}

/// Seeded Gaussian cell field with zero boundary values.
inline Field random_field(const SpaceTimeGrid& g, std::mt19937_64& rng, Staging st = Staging::Forward) {
    std::normal_distribution<double> N(0.0, 1.0);
    Field f(g, st);
    for (int n = 0; n <= g.Nt; ++n)
        for (int j = 1; j <= g.Nx; ++j) f(n, j) = N(rng);
    return f;
}

inline std::vector<double> random_slice(const SpaceTimeGrid& g, std::mt19937_64& rng) {
    std::normal_distribution<double> N(0.0, 1.0);
    std::vector<double> v(static_cast<std::size_t>(g.nodes()), 0.0);
    for (int j = 1; j <= g.Nx; ++j) v[static_cast<std::size_t>(j)] = N(rng);
    return v;
}

}  // namespace testing_support
