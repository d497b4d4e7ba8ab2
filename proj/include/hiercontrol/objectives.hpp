#pragma once

#include <array>
#include <vector>

#include "coefficients.hpp"
#include "field.hpp"
#include "geometry.hpp"

namespace hiercontrol {

/// Follower i: J_i = alpha/2 ||y - y_d||^2 on O_id x (0,T) + mu/2 ||v||^2 on O_i x (0,T).
struct FollowerObjective {
    double alpha = 1.0;
    double mu = 100.0;
    /// Cell field (Forward staging), zero outside O_id.
    Field target;
};

/// Everything a solve needs besides the leader control.
struct Problem {
    SpaceTimeGrid grid;
    ControlGeometry geo;
    CoefficientModel model;
    std::array<FollowerObjective, 2> followers;
    /// Initial state y0 on all nodes, boundary entries zero.
    std::vector<double> y0;

    Mask B, C[2], Bi[2];

    Problem() = default;
    Problem(SpaceTimeGrid g, ControlGeometry geometry, CoefficientModel m, std::array<FollowerObjective, 2> f,
            std::vector<double> init)
        : grid(g), geo(std::move(geometry)), model(m), followers(std::move(f)), y0(std::move(init)) {
        refresh_masks();
    }

    void refresh_masks() {
        B = geo.O.mask();
        for (int i = 0; i < 2; ++i) {
            C[i] = geo.Oid[i].mask();
            Bi[i] = geo.Oi[i].mask();
            if (followers[i].target.data().empty()) followers[i].target = Field(grid);
            followers[i].target.apply_mask(C[i]);
        }
        if (y0.empty()) y0.assign(static_cast<std::size_t>(grid.nodes()), 0.0);
        y0.front() = y0.back() = 0.0;
    }
};

/// Nodal values of A sin(k pi x / L).
inline std::vector<double> sine_profile(const SpaceTimeGrid& g, double amplitude, int mode = 1) {
    std::vector<double> v(static_cast<std::size_t>(g.nodes()), 0.0);
    for (int j = 1; j <= g.Nx; ++j) v[static_cast<std::size_t>(j)] = amplitude * std::sin(mode * M_PI * g.x(j) / g.L);
    return v;
}

}  // namespace hiercontrol
