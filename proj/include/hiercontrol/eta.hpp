#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "geometry.hpp"

namespace hiercontrol {

/// Auxiliary function on the spatial nodes: positive inside, zero at both
/// ends, derivative nonzero away from its omega set.
struct EtaFunction {
    std::vector<double> value;  // nodes 0..Nx+1
    std::vector<double> deriv;  // analytic derivative at the nodes
    Mask critical_set;          // omega mask; the only place deriv may vanish
    double sup_norm = 0.0;
    double kappa = 0.0;
    double xstar = 0.0;
    /// Position of the derivative zero (bisection on the analytic derivative).
    double critical_point = 0.0;
};

namespace detail {

/// Unnormalized candidate x (L-x) exp(-kappa (x-x*)^2) and its derivative.
struct EtaCandidate {
    double L, xs, kappa, N = 1.0;
    double value(double x) const { return N * x * (L - x) * std::exp(-kappa * (x - xs) * (x - xs)); }
    double deriv(double x) const {
        return N * std::exp(-kappa * (x - xs) * (x - xs)) * ((L - 2 * x) - 2 * kappa * (x - xs) * x * (L - x));
    }
};

inline bool derivative_ok(const std::vector<double>& d, const Mask& omega) {
    for (std::size_t j = 0; j < d.size(); ++j)
        if (omega[j] == 0.0 && !(std::abs(d[j]) > 0.0)) return false;
    return true;
}

inline bool candidate_ok(const EtaCandidate& c, const SpaceTimeGrid& g, const Mask& omega) {
    for (int j = 0; j < g.nodes(); ++j)
        if (omega[static_cast<std::size_t>(j)] == 0.0 && !(std::abs(c.deriv(g.x(j))) > 0.0)) return false;
    return true;
}

/// Root of a continuous function with f(a) > 0 > f(b).
template <class Fn>
double bisect_root(Fn f, double a, double b) {
    for (int it = 0; it < 200 && b - a > 0.0; ++it) {
        const double m = 0.5 * (a + b);
        if (m == a || m == b) break;
        (f(m) > 0.0 ? a : b) = m;
    }
    return 0.5 * (a + b);
}

/// Monotone C1 map of [0,L]: identity outside [a,b], sends x2 to x1.
/// Piecewise cubic Hermite with end slopes 1 and a harmonic-mean slope at x2.
struct Warp {
    double a, b, x2, x1, d;
    Warp(double a_, double b_, double x2_, double x1_) : a(a_), b(b_), x2(x2_), x1(x1_) {
        const double s1 = (x1 - a) / (x2 - a), s2 = (b - x1) / (b - x2);
        d = 2.0 * s1 * s2 / (s1 + s2);
    }
    void eval(double x, double& y, double& dy) const {
        if (x <= a || x >= b) {
            y = x;
            dy = 1.0;
            return;
        }
        const bool left = x < x2;
        const double x0 = left ? a : x2, xe = left ? x2 : b;
        const double y0 = left ? a : x1, ye = left ? x1 : b;
        const double m0 = left ? 1.0 : d, me = left ? d : 1.0;
        const double h = xe - x0, t = (x - x0) / h;
        const double t2 = t * t, t3 = t2 * t;
        y = (2 * t3 - 3 * t2 + 1) * y0 + (t3 - 2 * t2 + t) * h * m0 + (-2 * t3 + 3 * t2) * ye + (t3 - t2) * h * me;
        dy = ((6 * t2 - 6 * t) * y0 + (3 * t2 - 4 * t + 1) * h * m0 + (-6 * t2 + 6 * t) * ye + (3 * t2 - 2 * t) * h * me) / h;
    }
};

}  // namespace detail

/// One auxiliary function for a single omega: smallest kappa (by bisection)
/// whose node-wise derivative check passes outside omega.
inline EtaFunction construct_single_eta(const Interval& omega, const SpaceTimeGrid& g) {
    if (!omega.valid() || mask_empty(omega.mask())) throw construction_failed("omega set is empty");
    const Mask wm = omega.mask();
    detail::EtaCandidate c{g.L, omega.mid(), 0.0};
    if (!detail::candidate_ok(c, g, wm)) {
        double lo = 0.0, hi = 1.0;
        int grow = 0;
        c.kappa = hi;
        while (!detail::candidate_ok(c, g, wm)) {
            lo = hi;
            hi *= 2.0;
            c.kappa = hi;
            if (++grow > 60) throw construction_failed("no kappa places the critical point inside omega");
        }
        for (int it = 0; it < 50; ++it) {
            const double mid = 0.5 * (lo + hi);
            c.kappa = mid;
            (detail::candidate_ok(c, g, wm) ? hi : lo) = mid;
        }
        c.kappa = hi;
        if (!detail::candidate_ok(c, g, wm)) throw construction_failed("bisection on kappa did not settle");
    }
    double umax = 0.0;
    for (int j = 0; j < g.nodes(); ++j) umax = std::max(umax, c.value(g.x(j)));
    EtaFunction e;
    e.value.resize(static_cast<std::size_t>(g.nodes()));
    e.deriv.resize(e.value.size());
    for (int j = 0; j < g.nodes(); ++j) {
        const auto J = static_cast<std::size_t>(j);
        e.value[J] = c.value(g.x(j)) / umax;
        e.deriv[J] = c.deriv(g.x(j)) / umax;
    }
    e.value.front() = e.value.back() = 0.0;
    e.sup_norm = *std::max_element(e.value.begin(), e.value.end());
    e.critical_set = wm;
    e.kappa = c.kappa;
    e.xstar = c.xs;
    e.critical_point = detail::bisect_root([&](double x) { return c.deriv(x); }, 0.0, g.L);
    return e;
}

/// Check the standing properties of an auxiliary function on the grid.
inline bool eta_valid(const EtaFunction& e) {
    if (e.value.front() != 0.0 || e.value.back() != 0.0) return false;
    for (std::size_t j = 1; j + 1 < e.value.size(); ++j)
        if (!(e.value[j] > 0.0)) return false;
    return detail::derivative_ok(e.deriv, e.critical_set);
}

/// Second function of a pair: eta1 warped inside Õ so its critical point
/// moves into omega2, then the bump (eta1∘psi - eta1) rescaled so both
/// node-wise sup norms match.
inline EtaFunction construct_partner_eta(const EtaFunction& e1, const Interval& omega2, const Interval& O_tilde,
                                         const SpaceTimeGrid& g) {
    if (!omega2.valid() || mask_empty(omega2.mask())) throw construction_failed("omega2 is empty");
    detail::EtaCandidate c{g.L, e1.xstar, e1.kappa};
    double umax = 0.0;
    for (int j = 0; j < g.nodes(); ++j) umax = std::max(umax, c.value(g.x(j)));
    c.N = 1.0 / umax;

    const double a = O_tilde.lo(), b = O_tilde.hi();
    const double x2 = omega2.mid(), x1 = e1.critical_point;
    if (!(a < x2 && x2 < b && a < x1 && x1 < b))
        throw construction_failed("critical points must lie inside O_tilde");
    const detail::Warp psi(a, b, x2, x1);

    const std::size_t n = static_cast<std::size_t>(g.nodes());
    std::vector<double> bump(n), dbump(n);
    for (int j = 0; j < g.nodes(); ++j) {
        const auto J = static_cast<std::size_t>(j);
        const double x = g.x(j);
        double y, dy;
        psi.eval(x, y, dy);
        if (!(dy > 0.0)) throw construction_failed("warp is not monotone");
        bump[J] = (x <= a || x >= b) ? 0.0 : c.value(y) - e1.value[J];
        dbump[J] = (x <= a || x >= b) ? 0.0 : c.deriv(y) * dy - e1.deriv[J];
    }
    // Amplitude so the warped peak node lands exactly on sup eta1.
    std::size_t jp = 0;
    for (std::size_t j = 0; j < n; ++j)
        if (e1.value[j] + bump[j] > e1.value[jp] + bump[jp]) jp = j;
    const double amp = bump[jp] > 0.0 ? (e1.sup_norm - e1.value[jp]) / bump[jp] : 1.0;

    EtaFunction e;
    e.value.resize(n);
    e.deriv.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
        e.value[j] = e1.value[j] + amp * bump[j];
        e.deriv[j] = e1.deriv[j] + amp * dbump[j];
    }
    e.sup_norm = *std::max_element(e.value.begin(), e.value.end());
    e.critical_set = omega2.mask();
    e.kappa = e1.kappa;
    e.xstar = x2;
    e.critical_point = x2;
    if (!eta_valid(e)) throw construction_failed("partner function fails the derivative check outside omega2");
    if (std::abs(e.sup_norm - e1.sup_norm) > 1e-12) throw construction_failed("sup norms of the pair differ");
    return e;
}

/// eta0 alone (SameObservation) or the pair (eta1, eta2).
inline std::vector<EtaFunction> construct_eta(const ControlGeometry& geo, const SpaceTimeGrid& g) {
    if (geo.omega.empty()) throw construction_failed("no omega set");
    std::vector<EtaFunction> out{construct_single_eta(geo.omega[0], g)};
    if (geo.two_eta()) {
        if (geo.omega.size() < 2) throw construction_failed("second omega set missing");
        out.push_back(construct_partner_eta(out[0], geo.omega[1], geo.O_tilde, g));
    }
    for (const auto& e : out)
        if (!eta_valid(e)) throw construction_failed("auxiliary function fails its node-wise check");
    return out;
}

}  // namespace hiercontrol
