#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "leader.hpp"
#include "parallel.hpp"

namespace hiercontrol {

// ---------------------------------------------------------------------------
// Discrete quadrature helpers. All weighted integrals are accumulated as
// natural logs: e^{-2 s sigma} and e^{-5 s beta*} underflow at default s.
// ---------------------------------------------------------------------------

namespace detail {

inline double sq(double v) { return v * v; }

/// log(v^2 * scale), -inf for v == 0.
inline double log_sq(double v, double scale) { return v == 0.0 ? -kInf : 2 * std::log(std::abs(v)) + std::log(scale); }

/// sum_j u_j^2 dx over interior nodes.
inline double l2sq(std::span<const double> u, double dx) {
    double s = 0.0;
    for (std::size_t j = 1; j + 1 < u.size(); ++j) s += u[j] * u[j];
    return s * dx;
}

/// sum over faces of ((u_{f+1}-u_f)/dx)^2 dx.
inline double grad_sq(std::span<const double> u, double dx) {
    double s = 0.0;
    for (std::size_t f = 0; f + 1 < u.size(); ++f) s += sq((u[f + 1] - u[f]) / dx);
    return s * dx;
}

/// sum over interior nodes of the squared second difference, times dx.
inline double lap_sq(std::span<const double> u, double dx) {
    double s = 0.0;
    for (std::size_t j = 1; j + 1 < u.size(); ++j) s += sq((u[j + 1] - 2 * u[j] + u[j - 1]) / (dx * dx));
    return s * dx;
}

inline std::vector<double> diff(std::span<const double> a, std::span<const double> b, double h) {
    std::vector<double> d(a.size());
    for (std::size_t j = 0; j < a.size(); ++j) d[j] = (a[j] - b[j]) / h;
    return d;
}

/// log of rho_r(t)^2 * q, where q is a nonnegative spatial quantity.
inline double log_rho_times(const CarlemanWeights& w, Rho r, double t, double q) {
    if (q == 0.0) return -kInf;
    return 2 * w.log_rho(r, t) + std::log(q);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Carleman functionals I_m
// ---------------------------------------------------------------------------

/// The three summands of I_m(psi), each as prefactor (s, lambda powers) and
/// weighted integral, all natural logs; -inf encodes 0.
struct CarlemanBreakdown {
    int m = 0;
    int eta = 0;
    /// 0: s^{m-4} lambda^{m-3} ∬ e^{-2s sigma} xi^{m-4} (|psi_t|^2 + |psi_xx|^2)
    /// 1: s^{m-2} lambda^{m-1} ∬ e^{-2s sigma} xi^{m-2} |psi_x|^2
    /// 2: s^m lambda^{m+1} ∬ e^{-2s sigma} xi^m |psi|^2
    std::array<double, 3> log_prefactor{};
    std::array<double, 3> log_integral{-kInf, -kInf, -kInf};
    double log_term(int i) const { return log_prefactor[static_cast<std::size_t>(i)] + log_integral[static_cast<std::size_t>(i)]; }
    double log_total() const {
        detail::LogSum t;
        for (int i = 0; i < 3; ++i) t.add(log_term(i));
        return t.value();
    }
    double total() const { return std::exp(log_total()); }
};

/// I_m(psi) with the untruncated weights of auxiliary function `eta`
/// (0 for the plain functional, i-1 for the indexed one).
///
/// Quadrature: cell n = 1..Nt at the midtime, interior nodes with weight dx.
/// psi_t = (psi^n - psi^{n-1})/dt; psi, psi_x (centered) and psi_xx (second
/// difference) are taken from the level average (psi^{n-1} + psi^n)/2.
inline CarlemanBreakdown carleman_functional(const CarlemanWeights& w, const Field& psi, int m = 0, int eta = 0) {
    const auto& g = w.grid;
    const double dx = g.dx(), dt = g.dt(), s = w.s, lam = w.lambda;
    CarlemanBreakdown out;
    out.m = m;
    out.eta = eta;
    out.log_prefactor = {(m - 4) * std::log(s) + (m - 3) * std::log(lam), (m - 2) * std::log(s) + (m - 1) * std::log(lam),
                         m * std::log(s) + (m + 1) * std::log(lam)};
    std::array<detail::LogSum, 3> acc;
    std::vector<double> avg(static_cast<std::size_t>(g.nodes()));
    for (int n = 1; n <= g.Nt; ++n) {
        const double t = g.tmid(n);
        auto a = psi.level(n - 1), b = psi.level(n);
        for (std::size_t j = 0; j < avg.size(); ++j) avg[j] = 0.5 * (a[j] + b[j]);
        for (int j = 1; j <= g.Nx; ++j) {
            const auto J = static_cast<std::size_t>(j);
            const double ls = -2 * s * w.sigma(eta, j, t), lx = std::log(w.xi(eta, j, t));
            const double pt = (b[J] - a[J]) / dt;
            const double pxx = (avg[J + 1] - 2 * avg[J] + avg[J - 1]) / (dx * dx);
            const double px = (avg[J + 1] - avg[J - 1]) / (2 * dx);
            const double d2 = pt * pt + pxx * pxx;
            if (d2 > 0.0) acc[0].add(ls + (m - 4) * lx + std::log(d2 * dx * dt));
            acc[1].add(ls + (m - 2) * lx + detail::log_sq(px, dx * dt));
            acc[2].add(ls + m * lx + detail::log_sq(avg[J], dx * dt));
        }
    }
    for (std::size_t i = 0; i < 3; ++i) out.log_integral[i] = acc[i].value();
    return out;
}

/// log of s^a lambda^b ∬_{mask} e^{-2 s sigma_k} xi_k^q |v|^2 over cells.
inline double log_weighted_sigma(const CarlemanWeights& w, int k, const Field& v, const Mask* mask, double q, double a,
                                 double b) {
    const auto& g = w.grid;
    detail::LogSum acc;
    for (int n = 1; n <= g.Nt; ++n) {
        const double t = g.tmid(n);
        auto c = v.cell(n);
        for (int j = 1; j <= g.Nx; ++j) {
            const auto J = static_cast<std::size_t>(j);
            if (mask && (*mask)[J] == 0.0) continue;
            acc.add(-2 * w.s * w.sigma(k, j, t) + q * std::log(w.xi(k, j, t)) + detail::log_sq(c[J], g.dx() * g.dt()));
        }
    }
    const double v0 = acc.value();
    return v0 == -kInf ? v0 : v0 + a * std::log(w.s) + b * std::log(w.lambda);
}

/// For the nested case: the index i0 with omega_{i0} inside O_{j0,d} and
/// omega_{j0} away from O_{i0,d}.
inline int nested_i0(const ControlGeometry& geo) {
    for (int i = 0; i < 2 && geo.omega.size() == 2; ++i) {
        const int j = 1 - i;
        if (mask_subset(geo.omega[static_cast<std::size_t>(i)].mask(), geo.Oid[j].mask()) &&
            mask_disjoint(geo.omega[static_cast<std::size_t>(j)].mask(), geo.Oid[i].mask()))
            return i;
    }
    return 0;
}

/// Both sides of the Carleman estimate for one adjoint solution (no sources),
/// following the geometry case. Natural logs.
struct CarlemanBound {
    double log_lhs = -kInf;
    double log_rhs = -kInf;
    double log_C() const { return log_lhs == -kInf ? -kInf : log_lhs - log_rhs; }
};

inline CarlemanBound carleman_bound(const Problem& P, const CarlemanWeights& w, const CoupledAdjoint& adj) {
    const auto& g = P.grid;
    Field h(g);
    for (int i = 0; i < 2; ++i) h.axpy(P.followers[static_cast<std::size_t>(i)].alpha, adj.gamma[i]);
    CarlemanBound b;
    detail::LogSum lhs, rhs;
    switch (w.tag) {
        case CaseTag::SameObservation:
            lhs.add(carleman_functional(w, adj.phi, 0, 0).log_total());
            lhs.add(carleman_functional(w, h, 0, 0).log_total());
            rhs.add(log_weighted_sigma(w, 0, adj.phi, &P.B, 4, 4, 5));
            break;
        case CaseTag::DisjointOverlap:
            lhs.add(carleman_functional(w, adj.gamma[0], 0, 0).log_total());
            lhs.add(carleman_functional(w, adj.gamma[1], 0, 1).log_total());
            lhs.add(log_weighted_sigma(w, 0, adj.phi, nullptr, -3, -3, -2));
            for (int k = 0; k < 2; ++k) rhs.add(log_weighted_sigma(w, k, adj.phi, &P.B, 4, 4, 5));
            break;
        case CaseTag::NestedOverlap: {
            const int i0 = nested_i0(P.geo), j0 = 1 - i0;
            lhs.add(carleman_functional(w, adj.gamma[j0], 0, j0).log_total());
            lhs.add(carleman_functional(w, h, 0, i0).log_total());
            lhs.add(log_weighted_sigma(w, j0, adj.phi, nullptr, -3, -3, -2));
            for (int k = 0; k < 2; ++k) rhs.add(log_weighted_sigma(w, k, adj.phi, &P.B, 4, 4, 5));
            break;
        }
    }
    b.log_lhs = lhs.value();
    b.log_rhs = rhs.value();
    return b;
}

// ---------------------------------------------------------------------------
// Observability sampling
// ---------------------------------------------------------------------------

/// One terminal datum: both sides of the observability inequality with zero
/// sources, natural logs.
struct ObservabilitySample {
    double log_lhs = -kInf;   // ||phi(0)||^2 + ∬ e^{-5s beta*} xi*^{-3} (|phi|^2 + |gamma1|^2 + |gamma2|^2)
    double log_rhs = -kInf;   // ∬_O e^{-4s beta*} xi*^4 |phi|^2
    double log_ratio = -kInf;
    double log_h_terms = -kInf;  // ∬ e^{-5s beta*} xi*^{-3} |alpha1 gamma1 + alpha2 gamma2|^2, reported only
    CarlemanBound carleman;
    int resamples = 0;
};

struct ObservabilityReport {
    int n_samples = 0;
    double s = 0.0, lambda = 0.0;
    CaseTag tag = CaseTag::SameObservation;
    std::vector<ObservabilitySample> samples;
    int degenerate = 0;
    double log_max_ratio = -kInf;
    double log_max_carleman_C = -kInf;
};

/// Both sides for a given terminal datum; nullopt if the right side vanishes.
inline std::optional<ObservabilitySample> observability_ratio(const Problem& P, const LinearizedOperator& op,
                                                              const CarlemanWeights& w,
                                                              std::span<const double> phiT) {
    const auto& g = P.grid;
    if (max_abs(phiT) == 0.0) return std::nullopt;
    const auto adj = solve_coupled_adjoint(P, op, phiT, nullptr, 1e-13, 2000);
    Field h(g);
    for (int i = 0; i < 2; ++i) h.axpy(P.followers[static_cast<std::size_t>(i)].alpha, adj.gamma[i]);

    detail::LogSum lhs, rhs, hterm;
    lhs.add(detail::log_sq(1.0, detail::l2sq(adj.phi.level(0), g.dx())) );
    for (int n = 1; n <= g.Nt; ++n) {
        const double t = g.tmid(n);
        const double lb = w.sel_beta_star(t) * w.s, lx = std::log(w.sel_xi_star(t));
        double all = 0.0, obs = 0.0, hh = 0.0;
        for (int j = 1; j <= g.Nx; ++j) {
            const auto J = static_cast<std::size_t>(j);
            const double ph = adj.phi.cell(n)[J];
            all += ph * ph + detail::sq(adj.gamma[0].cell(n)[J]) + detail::sq(adj.gamma[1].cell(n)[J]);
            obs += P.B[J] * ph * ph;
            hh += detail::sq(h.cell(n)[J]);
        }
        const double q = g.dx() * g.dt();
        if (all > 0.0) lhs.add(-5 * lb - 3 * lx + std::log(all * q));
        if (obs > 0.0) rhs.add(-4 * lb + 4 * lx + std::log(obs * q));
        if (hh > 0.0) hterm.add(-5 * lb - 3 * lx + std::log(hh * q));
    }
    ObservabilitySample smp;
    smp.log_lhs = lhs.value();
    smp.log_rhs = rhs.value();
    if (smp.log_rhs == -kInf) return std::nullopt;
    smp.log_ratio = smp.log_lhs - smp.log_rhs;
    smp.log_h_terms = hterm.value();
    smp.carleman = carleman_bound(P, w, adj);
    return smp;
}

/// Gaussian nodal terminal datum with unit discrete L2 norm.
inline std::vector<double> random_terminal(const SpaceTimeGrid& g, std::mt19937_64& rng) {
    std::normal_distribution<double> N(0.0, 1.0);
    std::vector<double> v(static_cast<std::size_t>(g.nodes()), 0.0);
    for (int j = 1; j <= g.Nx; ++j) v[static_cast<std::size_t>(j)] = N(rng);
    const double nv = norm_x(v, g.dx());
    if (nv > 0.0)
        for (auto& x : v) x /= nv;
    return v;
}

/// Sample k draws from its own stream seeded by (seed, k), so results do not
/// depend on thread count or completion order.
inline ObservabilityReport observability_sample(const Problem& P, const CarlemanWeights& w, int n_samples,
                                                unsigned long long seed) {
    const StateModel sm(P.model, P.grid);
    const auto op = LinearizedOperator::at_zero(sm);
    ObservabilityReport rep;
    rep.n_samples = n_samples;
    rep.s = w.s;
    rep.lambda = w.lambda;
    rep.tag = w.tag;
    rep.samples.resize(static_cast<std::size_t>(n_samples));
    parallel_for(n_samples, [&](int k) {
        std::seed_seq sq{static_cast<unsigned>(seed & 0xffffffffu), static_cast<unsigned>(seed >> 32),
                         static_cast<unsigned>(k)};
        std::mt19937_64 rng(sq);
        for (int attempt = 0; attempt <= 10; ++attempt) {
            const auto phiT = random_terminal(P.grid, rng);
            if (auto smp = observability_ratio(P, op, w, phiT)) {
                smp->resamples = attempt;
                rep.samples[static_cast<std::size_t>(k)] = *smp;
                return;
            }
        }
        throw degenerate_sample("sample " + std::to_string(k) + " stayed degenerate after 10 resamples");
    });
    for (const auto& s : rep.samples) {
        rep.degenerate += s.resamples;
        rep.log_max_ratio = std::max(rep.log_max_ratio, s.log_ratio);
        rep.log_max_carleman_C = std::max(rep.log_max_carleman_C, s.carleman.log_C());
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Second derivative of J_1 at a Nash state
// ---------------------------------------------------------------------------

/// Directional derivative of the state Jacobian at level n: d/de A_n(y + e h).
/// Faces: dk = (a_ss g + 2 a_s) h_x; nodes: dc = F_yy h + F_yq h_x,
/// db = F_qy h + F_qq h_x (centered h_x at nodes).
inline LevelCoefficients jacobian_derivative(const StateModel& sm, int n, std::span<const double> y,
                                             std::span<const double> h) {
    const auto& g = sm.grid();
    const auto& m = sm.model();
    std::vector<double> wv(y.begin(), y.end());
    if (sm.shift()) {
        auto yb = sm.shift()->level(n);
        for (std::size_t j = 0; j < wv.size(); ++j) wv[j] += yb[j];
    }
    const int nx = g.Nx;
    const double dx = g.dx(), t = g.t(n);
    LevelCoefficients d(nx);
    for (int f = 0; f <= nx; ++f) {
        const auto F = static_cast<std::size_t>(f);
        const double gr = (wv[F + 1] - wv[F]) / dx, hg = (h[F + 1] - h[F]) / dx;
        const auto s = m.a_sample(gr, t, g.xface(f));
        d.k[F] = (s.ass * gr + 2 * s.as) * hg;
    }
    for (int j = 1; j <= nx; ++j) {
        const auto J = static_cast<std::size_t>(j);
        const auto fj = m.F_jet(wv[J], (wv[J + 1] - wv[J - 1]) / (2 * dx));
        const double hq = (h[J + 1] - h[J - 1]) / (2 * dx);
        d.c[J] = fj.d2[0][0] * h[J] + fj.d2[0][1] * hq;
        d.b[J] = fj.d2[1][0] * h[J] + fj.d2[1][1] * hq;
    }
    return d;
}

struct SecondVariation {
    double form = 0.0;      // <D^2 J_1 (w, w)> = ∬_{O1} eta w + mu1 ||w||^2
    double w_norm_sq = 0.0;
    Field h, eta;
};

/// Second derivative of J_1 in v^1 along w (v^2 fixed) at the state driven
/// by (f, v): h solves the linearized state equation with source 1_{O1} w,
/// eta the second-order adjoint with source alpha1 1_{O1d} h - (dA[h])^T p1.
inline SecondVariation second_variation(const NashSystem& S, const Field& f, const std::array<Field, 2>& v,
                                        const Field& w) {
    const Problem& P = *S.P;
    const auto& g = P.grid;
    const double dx = g.dx();
    const Field y = detail::state_for(S, detail::full_source(S, f, v[0], v[1]));
    const LinearizedOperator local =
        S.mode == NashMode::Nonlinear ? LinearizedOperator(*S.sm, y) : LinearizedOperator();
    const LinearizedOperator& op = S.mode == NashMode::Nonlinear ? local : *S.lin;
    const std::vector<double> zero(static_cast<std::size_t>(g.nodes()), 0.0);

    Field src(g);
    for (int n = 1; n <= g.Nt; ++n)
        for (int j = 1; j <= g.Nx; ++j)
            src.cell(n)[static_cast<std::size_t>(j)] = P.Bi[0][static_cast<std::size_t>(j)] * w.cell(n)[static_cast<std::size_t>(j)];
    SecondVariation out;
    out.h = solve_linearized_forward(op, zero, src);

    const double a1 = P.followers[0].alpha;
    Field esrc(g);
    for (int n = 1; n <= g.Nt; ++n)
        for (int j = 1; j <= g.Nx; ++j) {
            const auto J = static_cast<std::size_t>(j);
            esrc.cell(n)[J] = a1 * P.C[0][J] * out.h.cell(n)[J];
        }
    if (S.mode == NashMode::Nonlinear) {
        const Field p1 = solve_adjoint_backward(op, zero, detail::adjoint_source(S, 0, y, true));
        std::vector<double> tmp(static_cast<std::size_t>(g.nodes()));
        for (int n = 1; n <= g.Nt; ++n) {
            const auto dA = jacobian_derivative(*S.sm, n, y.level(n), out.h.level(n));
            dA.apply_transpose(p1.cell(n), tmp, dx);
            auto e = esrc.cell(n);
            for (int j = 1; j <= g.Nx; ++j) e[static_cast<std::size_t>(j)] -= tmp[static_cast<std::size_t>(j)];
        }
    }
    out.eta = solve_adjoint_backward(op, zero, esrc);

    const double mu = P.followers[0].mu;
    double ew = 0.0, ww = 0.0;
    for (int n = 1; n <= g.Nt; ++n)
        for (int j = 1; j <= g.Nx; ++j) {
            const auto J = static_cast<std::size_t>(j);
            const double wj = P.Bi[0][J] * w.cell(n)[J];
            ew += out.eta.cell(n)[J] * wj;
            ww += wj * wj;
        }
    const double q = g.dt() * dx;
    out.w_norm_sq = ww * q;
    out.form = ew * q + mu * out.w_norm_sq;
    return out;
}

/// (J_1(v^1 + s w) - 2 J_1(v^1) + J_1(v^1 - s w)) / s^2 through full re-solves.
inline double second_difference(const NashSystem& S, const Field& f, const std::array<Field, 2>& v, const Field& w,
                                double s) {
    auto vp = v, vm = v;
    vp[0].axpy(s, w);
    vm[0].axpy(-s, w);
    const double jp = follower_cost(S, f, 0, vp), j0 = follower_cost(S, f, 0, v), jm = follower_cost(S, f, 0, vm);
    return (jp - 2 * j0 + jm) / (s * s);
}

struct EquilibriumRow {
    double mu = 0.0;
    std::vector<double> form;    // per direction, divided by ||w||^2
    std::vector<double> oracle;  // second differences, same normalization
    double min_form = kInf;
    double max_rel_err = 0.0;
    int nash_iterations = 0;
};

struct EquilibriumReport {
    std::vector<EquilibriumRow> rows;
    int directions = 0;
    /// Smallest grid mu from which every row has a positive minimum.
    std::optional<double> mu_star;
    bool monotone = true;  // min_form non-decreasing along the sorted grid
    double max_rel_err = 0.0;
};

struct EquilibriumOptions {
    NashMode mode = NashMode::Nonlinear;
    int directions = 20;
    unsigned long long seed = 0;
    double oracle_step = 1e-4;
    NashOptions nash{1e-12, 2000, 1.0, 0.1, {1e-14, 100, 1e-13}, true};
};

/// Re-solve the Nash equilibrium under f for each mu_1 in the grid and
/// evaluate the second-derivative form along common random directions on O1.
inline EquilibriumReport equilibrium_second_derivative(const Problem& P, const Field& f, std::vector<double> mu_grid,
                                                       const EquilibriumOptions& opt = {}) {
    const auto& g = P.grid;
    std::sort(mu_grid.begin(), mu_grid.end());
    std::mt19937_64 rng(opt.seed);
    std::vector<Field> dirs;
    for (int k = 0; k < opt.directions; ++k) dirs.push_back(random_direction(g, P.Bi[0], rng));

    EquilibriumReport rep;
    rep.directions = opt.directions;
    rep.rows.resize(mu_grid.size());
    parallel_for(static_cast<int>(mu_grid.size()), [&](int r) {
        Problem Pm = P;
        Pm.followers[0].mu = mu_grid[static_cast<std::size_t>(r)];
        const StateModel sm(Pm.model, g);
        const auto lin = LinearizedOperator::at_zero(sm);
        NashSystem S{&Pm, &sm, &lin, opt.mode, nullptr, nullptr, opt.nash.step};
        const auto sol = solve_nash_fixed_point(S, f, opt.nash);
        EquilibriumRow row;
        row.mu = Pm.followers[0].mu;
        row.nash_iterations = sol.iterations;
        const double scale = std::max(1.0, norm_q(sol.v[0], g));
        for (const auto& w : dirs) {
            const auto sv = second_variation(S, f, sol.v, w);
            if (sv.w_norm_sq == 0.0) {
                row.form.push_back(0.0);
                row.oracle.push_back(0.0);
                continue;
            }
            const double a = sv.form / sv.w_norm_sq;
            const double o = second_difference(S, f, sol.v, w, opt.oracle_step * scale) / sv.w_norm_sq;
            row.form.push_back(a);
            row.oracle.push_back(o);
            row.min_form = std::min(row.min_form, a);
            row.max_rel_err = std::max(row.max_rel_err, std::abs(a - o) / std::max({std::abs(a), std::abs(o), 1e-300}));
        }
        rep.rows[static_cast<std::size_t>(r)] = std::move(row);
    });
    for (std::size_t r = 0; r < rep.rows.size(); ++r) {
        rep.max_rel_err = std::max(rep.max_rel_err, rep.rows[r].max_rel_err);
        if (r > 0 && rep.rows[r].min_form < rep.rows[r - 1].min_form) rep.monotone = false;
    }
    for (std::size_t r = rep.rows.size(); r-- > 0;) {
        if (!(rep.rows[r].min_form > 0.0)) break;
        rep.mu_star = rep.rows[r].mu;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Weighted a priori estimates on a null-control solution
// ---------------------------------------------------------------------------

struct EstimateTerm {
    std::string name;
    double log_value = -kInf;
};

/// One estimate: left-hand-side terms, right-hand-side data terms, and the
/// log of their ratio (the empirical constant). 0/0 is "vacuous".
struct EstimateSide {
    std::vector<EstimateTerm> lhs, rhs;
    double log_lhs = -kInf, log_rhs = -kInf;
    bool vacuous = false;
    double log_ratio() const { return vacuous ? 0.0 : log_lhs - log_rhs; }
    bool finite() const { return vacuous || (log_lhs < kInf && log_rhs < kInf && log_rhs > -kInf); }
    void close() {
        detail::LogSum a, b;
        for (const auto& t : lhs) a.add(t.log_value);
        for (const auto& t : rhs) b.add(t.log_value);
        log_lhs = a.value();
        log_rhs = b.value();
        vacuous = log_lhs == -kInf && log_rhs == -kInf;
    }
};

struct EstimateDiagnostics {
    EstimateSide first;   // rho2 / rho3 energy estimate on y, p1, p2
    EstimateSide second;  // rho4 / rho5 estimate on time derivatives of y
    std::vector<ChainConstant> chain;
    bool finite() const { return first.finite() && second.finite(); }
};

namespace detail {

/// sup over levels of rho_r(t_n)^2 q(level n); levels with q == 0 are skipped
/// (the terminal level, where rho is infinite, is zero by construction).
template <class Q>
double log_sup_levels(const CarlemanWeights& w, Rho r, int from, int to, Q q) {
    double best = -kInf;
    for (int n = from; n <= to; ++n) best = std::max(best, log_rho_times(w, r, w.grid.t(n), q(n)));
    return best;
}

/// ∬ rho_r^2 q over cells, weight at the midtime.
template <class Q>
double log_cells(const CarlemanWeights& w, Rho r, int from, int to, Q q) {
    LogSum acc;
    for (int n = from; n <= to; ++n) acc.add(log_rho_times(w, r, w.grid.tmid(n), q(n) * w.grid.dt()));
    return acc.value();
}

}  // namespace detail

/// Left- and right-hand sides of the two weighted energy estimates on the
/// WLS quantities (yhat, phat, f) with the run's stored sources.
inline EstimateDiagnostics weighted_estimate_report(const Problem& P, const NullControlResult& res,
                                                    const CarlemanWeights& w) {
    const auto& g = P.grid;
    const double dx = g.dx(), dt = g.dt();
    const int Nt = g.Nt;
    const Field& y = res.yhat.data().empty() ? res.nash.y : res.yhat;
    const std::array<Field, 2>& p = res.phat[0].data().empty() ? res.nash.p : res.phat;
    std::array<const Field*, 3> U{&y, &p[0], &p[1]};
    EstimateDiagnostics d;
    using detail::log_cells;
    using detail::log_sup_levels;
    auto sum3 = [](auto fn) {
        detail::LogSum s;
        for (int k = 0; k < 3; ++k) s.add(fn(k));
        return s.value();
    };
    auto dt_level = [&](const Field& u, int n) { return detail::diff(u.level(n), u.level(n - 1), dt); };

    auto& A = d.first;
    A.lhs.push_back({"sup rho2^2 ||u||^2", sum3([&](int k) {
                         return log_sup_levels(w, Rho::rho2, 0, Nt, [&](int n) { return detail::l2sq(U[k]->level(n), dx); });
                     })});
    A.lhs.push_back({"∬ rho2^2 |u_x|^2", sum3([&](int k) {
                         return log_cells(w, Rho::rho2, 1, Nt, [&](int n) { return detail::grad_sq(U[k]->cell(n), dx); });
                     })});
    A.lhs.push_back({"sup rho3^2 ||u_x||^2", sum3([&](int k) {
                         return log_sup_levels(w, Rho::rho3, 0, Nt, [&](int n) { return detail::grad_sq(U[k]->level(n), dx); });
                     })});
    A.lhs.push_back({"∬ rho3^2 (|u_t|^2 + |u_xx|^2)", sum3([&](int k) {
                         return log_cells(w, Rho::rho3, 1, Nt, [&](int n) {
                             return detail::l2sq(dt_level(*U[k], n), dx) + detail::lap_sq(U[k]->cell(n), dx);
                         });
                     })});

    const Sources& src = res.sources;
    const bool have_src = !src.empty();
    auto rhs_common = [&](EstimateSide& E) {
        if (have_src) {
            E.rhs.push_back({"∬ rho^2 |G|^2", log_cells(w, Rho::rho, 1, Nt, [&](int n) { return detail::l2sq(src.G.cell(n), dx); })});
            E.rhs.push_back({"∬ rho^2 (|G1|^2 + |G2|^2)", log_cells(w, Rho::rho, 1, Nt, [&](int n) {
                                 return detail::l2sq(src.G1.cell(n), dx) + detail::l2sq(src.G2.cell(n), dx);
                             })});
        }
        E.rhs.push_back({"∬_O rho1^2 |f|^2", log_cells(w, Rho::rho1, 1, Nt, [&](int n) {
                             return dot_x(res.f.cell(n), res.f.cell(n), P.B, dx);
                         })});
        E.rhs.push_back({"∬ rho0^2 (|p1|^2 + |p2|^2)", log_cells(w, Rho::rho0, 1, Nt, [&](int n) {
                             return detail::l2sq(p[0].cell(n), dx) + detail::l2sq(p[1].cell(n), dx);
                         })});
        E.rhs.push_back({"∬ rho0^2 |y|^2", log_cells(w, Rho::rho0, 1, Nt, [&](int n) { return detail::l2sq(y.cell(n), dx); })});
    };
    A.rhs.push_back({"||y0||^2", detail::log_sq(1.0, detail::l2sq(P.y0, dx))});
    rhs_common(A);
    A.close();

    auto& B = d.second;
    B.lhs.push_back({"sup rho4^2 ||y_t||^2", log_sup_levels(w, Rho::rho4, 1, Nt, [&](int n) {
                         return detail::l2sq(dt_level(y, n), dx);
                     })});
    B.lhs.push_back({"∬ rho4^2 |y_xt|^2", log_cells(w, Rho::rho4, 1, Nt, [&](int n) { return detail::grad_sq(dt_level(y, n), dx); })});
    B.lhs.push_back({"sup rho5^2 ||y_xt||^2", log_sup_levels(w, Rho::rho5, 1, Nt, [&](int n) {
                         return detail::grad_sq(dt_level(y, n), dx);
                     })});
    B.lhs.push_back({"∬ rho5^2 (|y_tt|^2 + |y_xxt|^2)", [&] {
                         detail::LogSum acc;
                         for (int n = 1; n < Nt; ++n) {
                             const auto ytt = detail::diff(dt_level(y, n + 1), dt_level(y, n), dt);
                             acc.add(detail::log_rho_times(w, Rho::rho5, g.t(n), detail::l2sq(ytt, dx) * dt));
                         }
                         acc.add(log_cells(w, Rho::rho5, 1, Nt, [&](int n) { return detail::lap_sq(dt_level(y, n), dx); }));
                         return acc.value();
                     }()});
    B.lhs.push_back({"sup rho5^2 ||y_xx||^2", log_sup_levels(w, Rho::rho5, 0, Nt, [&](int n) {
                         return detail::lap_sq(y.level(n), dx);
                     })});
    B.rhs.push_back({"||y0||_H3^2", detail::log_sq(norm_h3_proxy(P.y0, dx), 1.0)});
    if (have_src) {
        B.rhs.push_back({"||G(0)||_H1^2", detail::log_sq(norm_h1(src.G.cell(1), dx), 1.0)});
        B.rhs.push_back({"∬ rho3^2 |G_t|^2", log_cells(w, Rho::rho3, 1, Nt - 1, [&](int n) {
                             return detail::l2sq(detail::diff(src.G.cell(n + 1), src.G.cell(n), dt), dx);
                         })});
    }
    rhs_common(B);
    B.close();

    d.chain = weight_report(w).chain;
    return d;
}

// ---------------------------------------------------------------------------
// Amplitude sweep for the nonlinear loop
// ---------------------------------------------------------------------------

struct SweepRow {
    double amplitude = 0.0;
    bool converged = false;
    int iterations = 0;
    double terminal_ratio = 0.0;
    double smallness = 0.0;
    std::string error;
};

struct SweepReport {
    std::vector<SweepRow> rows;
    std::optional<double> first_failure;
};

/// Picard null control from y0 = A sin(mode pi x / L) for each amplitude,
/// in parallel; rows keep the input order.
inline SweepReport amplitude_sweep(const Problem& P, const CarlemanWeights& w, const std::vector<double>& amplitudes,
                                   int mode = 1, const PicardOptions& opt = {}) {
    SweepReport rep;
    rep.rows.resize(amplitudes.size());
    parallel_for(static_cast<int>(amplitudes.size()), [&](int k) {
        Problem Pa = P;
        const double a = amplitudes[static_cast<std::size_t>(k)];
        Pa.y0 = sine_profile(P.grid, a, mode);
        SweepRow row;
        row.amplitude = a;
        row.smallness = norm_h3_proxy(Pa.y0, P.grid.dx());
        try {
            const auto r = null_control_nonlinear_picard(Pa, w, opt);
            row.converged = true;
            row.iterations = r.iterations;
            row.terminal_ratio = r.terminal_ratio();
        } catch (const Error& e) {
            row.error = e.kind();
            row.iterations = static_cast<int>(e.history().size());
        }
        rep.rows[static_cast<std::size_t>(k)] = row;
    });
    for (const auto& r : rep.rows)
        if (!r.converged && (!rep.first_failure || r.amplitude < *rep.first_failure)) rep.first_failure = r.amplitude;
    return rep;
}

}  // namespace hiercontrol
