#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <vector>

#include "parallel.hpp"
#include "pde.hpp"

namespace hiercontrol {

enum class NashMode { Linear, Nonlinear };

struct NashOptions {
    double tol = 1e-9;
    int max_sweeps = 500;
    double theta = 1.0;
    double min_theta = 0.1;
    StepOptions step;
    /// Follower targets enter the adjoint sources; off when they are already
    /// folded into explicit sources.
    bool include_targets = true;
};

/// Extra cell sources for the state equation and the two adjoint equations.
struct Sources {
    Field G, G1, G2;
    bool empty() const { return G.data().empty(); }
};

struct NashSolution {
    Field y;                   // Forward
    std::array<Field, 2> p;    // Backward
    std::array<Field, 2> v;    // cell fields, v_i = -(1/mu_i) p_i on O_i
    int iterations = 0;
    double residual = 0.0;     // final relative update
    std::array<double, 2> J{};
    std::vector<double> history;
    double theta = 1.0;
};

/// The operator pieces a Nash solve needs: a state model (plain or shifted)
/// and, in linear mode, a fixed linearization.
struct NashSystem {
    const Problem* P = nullptr;
    const StateModel* sm = nullptr;
    const LinearizedOperator* lin = nullptr;  // required for NashMode::Linear
    NashMode mode = NashMode::Linear;
    const Sources* sources = nullptr;
    /// Initial state override (z-system); defaults to P->y0.
    const std::vector<double>* y0 = nullptr;
    StepOptions step;

    std::span<const double> init() const { return y0 ? std::span<const double>(*y0) : std::span<const double>(P->y0); }
};

/// (alpha_i/2) ||y - y_id||^2 on O_id x (0,T) + (mu_i/2) ||v_i||^2 on O_i x (0,T), cell quadrature.
inline double evaluate_functional(const Problem& P, int i, const Field& y, const Field& vi) {
    const auto& g = P.grid;
    const auto& fo = P.followers[static_cast<std::size_t>(i)];
    double misfit = 0.0, cost = 0.0;
    for (int n = 1; n <= g.Nt; ++n) {
        auto yn = y.cell(n);
        auto tn = fo.target.cell(n);
        auto vn = vi.cell(n);
        for (int j = 1; j <= g.Nx; ++j) {
            const auto J = static_cast<std::size_t>(j);
            const double d = yn[J] - tn[J];
            misfit += P.C[i][J] * d * d;
            cost += P.Bi[i][J] * vn[J] * vn[J];
        }
    }
    const double w = g.dt() * g.dx();
    return 0.5 * fo.alpha * misfit * w + 0.5 * fo.mu * cost * w;
}

namespace detail {

inline Field state_for(const NashSystem& S, const Field& src) {
    if (S.mode == NashMode::Linear) return solve_linearized_forward(*S.lin, S.init(), src);
    return solve_forward(*S.sm, S.init(), src, S.step);
}

inline Field full_source(const NashSystem& S, const Field& f, const Field& v1, const Field& v2) {
    Field src = control_source(*S.P, &f, &v1, &v2);
    if (S.sources && !S.sources->empty()) src += S.sources->G;
    return src;
}

inline Field adjoint_source(const NashSystem& S, int i, const Field& y, bool targets) {
    const Problem& P = *S.P;
    const auto& fo = P.followers[static_cast<std::size_t>(i)];
    Field r(P.grid, Staging::Forward);
    for (int n = 1; n <= P.grid.Nt; ++n) {
        auto out = r.cell(n);
        auto yn = y.cell(n);
        auto tn = fo.target.cell(n);
        for (int j = 1; j <= P.grid.Nx; ++j) {
            const auto J = static_cast<std::size_t>(j);
            out[J] = fo.alpha * P.C[i][J] * (yn[J] - (targets ? tn[J] : 0.0));
        }
    }
    if (S.sources && !S.sources->empty()) r += i == 0 ? S.sources->G1 : S.sources->G2;
    return r;
}

/// v_i = -(1/mu_i) p_i on O_i, cell by cell (assigned, not solved).
inline Field follower_from_adjoint(const Problem& P, int i, const Field& p) {
    Field v(P.grid, Staging::Forward);
    const double mu = P.followers[static_cast<std::size_t>(i)].mu;
    for (int n = 1; n <= P.grid.Nt; ++n) {
        auto out = v.cell(n);
        auto pc = p.cell(n);
        for (int j = 1; j <= P.grid.Nx; ++j) {
            const auto J = static_cast<std::size_t>(j);
            out[J] = P.Bi[i][J] * -(pc[J] / mu);
        }
    }
    return v;
}

}  // namespace detail

/// Block Gauss-Seidel on the optimality system: state forward, both adjoints
/// backward, followers assigned from the adjoints, relaxed by theta.
inline NashSolution solve_nash_fixed_point(const NashSystem& S, const Field& f, const NashOptions& opt = {},
                                           const std::array<Field, 2>* v_init = nullptr) {
    const Problem& P = *S.P;
    const auto& g = P.grid;
    NashSolution sol;
    sol.v = v_init ? *v_init : std::array<Field, 2>{Field(g), Field(g)};
    double theta = opt.theta;
    double first = -1.0;
    for (int sweep = 1; sweep <= opt.max_sweeps; ++sweep) {
        sol.y = detail::state_for(S, detail::full_source(S, f, sol.v[0], sol.v[1]));
        const LinearizedOperator local = S.mode == NashMode::Nonlinear ? LinearizedOperator(*S.sm, sol.y)
                                                                        : LinearizedOperator();
        const LinearizedOperator& adj = S.mode == NashMode::Nonlinear ? local : *S.lin;
        std::array<Field, 2> vnew;
        for (int i = 0; i < 2; ++i) {
            sol.p[i] = solve_adjoint_backward(adj, std::vector<double>(static_cast<std::size_t>(g.nodes()), 0.0),
                                              detail::adjoint_source(S, i, sol.y, opt.include_targets));
            vnew[i] = detail::follower_from_adjoint(P, i, sol.p[i]);
        }
        double num = 0.0, den = 0.0;
        for (int i = 0; i < 2; ++i) {
            Field d = vnew[i];
            d -= sol.v[i];
            num += dot_q(d, d, g);
            den += dot_q(vnew[i], vnew[i], g);
        }
        const double upd = num == 0.0 ? 0.0 : std::sqrt(num / den);
        sol.history.push_back(upd);
        sol.iterations = sweep;
        sol.residual = upd;
        if (!std::isfinite(upd) || (first > 0.0 && upd > 1e8 * first))
            throw fixed_point_diverged("Nash fixed point blew up at sweep " + std::to_string(sweep))
                .with_history(sol.history);
        if (first < 0.0) first = upd;
        if (upd <= opt.tol) {
            sol.v = std::move(vnew);
            sol.theta = theta;
            for (int i = 0; i < 2; ++i) sol.J[i] = evaluate_functional(P, i, sol.y, sol.v[i]);
            return sol;
        }
        const auto& h = sol.history;
        if (h.size() >= 3 && h[h.size() - 1] > h[h.size() - 2] && h[h.size() - 2] > h[h.size() - 3])
            theta = std::max(opt.min_theta, 0.5 * theta);
        for (int i = 0; i < 2; ++i) {
            for (std::size_t k = 0; k < sol.v[i].data().size(); ++k)
                sol.v[i].data()[k] += theta * (vnew[i].data()[k] - sol.v[i].data()[k]);
        }
    }
    throw fixed_point_diverged("Nash fixed point not converged after " + std::to_string(opt.max_sweeps) + " sweeps")
        .with_history(sol.history);
}

/// Coupled adjoint system with followers eliminated:
///   L* phi = sum_i alpha_i C_i gamma_i + Gphi,  phi(T) = phiT,
///   L gamma_i = -(1/mu_i) B_i phi + Ggamma_i,   gamma_i(0) = 0.
/// Its solution map is the transpose of the Nash-coupled forward map.
struct CoupledAdjoint {
    Field phi;                    // Backward
    std::array<Field, 2> gamma;   // Forward
    int iterations = 0;
};

inline CoupledAdjoint solve_coupled_adjoint(const Problem& P, const LinearizedOperator& op, std::span<const double> phiT,
                                            const Sources* src = nullptr, double tol = 1e-9, int max_sweeps = 500) {
    const auto& g = P.grid;
    CoupledAdjoint out{Field(g, Staging::Backward), {Field(g), Field(g)}, 0};
    const std::vector<double> zero(static_cast<std::size_t>(g.nodes()), 0.0);
    std::vector<double> hist;
    for (int sweep = 1; sweep <= max_sweeps; ++sweep) {
        Field rphi(g);
        for (int i = 0; i < 2; ++i) {
            const double a = P.followers[static_cast<std::size_t>(i)].alpha;
            for (int n = 1; n <= g.Nt; ++n) {
                auto r = rphi.cell(n);
                auto gm = out.gamma[i].cell(n);
                for (int j = 1; j <= g.Nx; ++j) {
                    const auto J = static_cast<std::size_t>(j);
                    r[J] += a * P.C[i][J] * gm[J];
                }
            }
        }
        if (src && !src->empty()) rphi += src->G;
        out.phi = solve_adjoint_backward(op, phiT, rphi);
        double num = 0.0, den = 0.0;
        for (int i = 0; i < 2; ++i) {
            Field rg = detail::follower_from_adjoint(P, i, out.phi);  // -(1/mu) B_i phi
            if (src && !src->empty()) rg += i == 0 ? src->G1 : src->G2;
            Field gnew = solve_linearized_forward(op, zero, rg);
            Field d = gnew;
            d -= out.gamma[i];
            num += dot_q(d, d, g);
            den += dot_q(gnew, gnew, g);
            out.gamma[i] = std::move(gnew);
        }
        out.iterations = sweep;
        const double upd = num == 0.0 ? 0.0 : std::sqrt(num / den);
        hist.push_back(upd);
        if (!std::isfinite(upd)) break;
        if (upd <= tol) return out;
    }
    throw fixed_point_diverged("coupled adjoint fixed point did not converge").with_history(hist);
}

struct GradientReport {
    std::vector<double> analytic;   // <p_i + mu_i v_i, w>
    std::vector<double> fd;         // Richardson central differences
    std::vector<double> normalized; // |fd| / (||w|| scale)
    std::vector<int> follower;
    double max_normalized = 0.0;
};

/// Random unit direction supported on a mask, as a cell field.
inline Field random_direction(const SpaceTimeGrid& g, const Mask& m, std::mt19937_64& rng) {
    std::normal_distribution<double> N(0.0, 1.0);
    Field w(g);
    for (int n = 1; n <= g.Nt; ++n) {
        auto c = w.cell(n);
        for (int j = 1; j <= g.Nx; ++j) {
            const double r = N(rng);
            c[static_cast<std::size_t>(j)] = m[static_cast<std::size_t>(j)] * r;
        }
    }
    const double nw = norm_q(w, g);
    if (nw > 0.0) w *= 1.0 / nw;
    return w;
}

/// J_i as a function of v_i alone (v_j fixed), through a full state re-solve.
inline double follower_cost(const NashSystem& S, const Field& f, int i, const std::array<Field, 2>& v) {
    const Field y = detail::state_for(S, detail::full_source(S, f, v[0], v[1]));
    return evaluate_functional(*S.P, i, y, v[static_cast<std::size_t>(i)]);
}

/// Central finite differences of J_i along random directions on O_i, with a
/// Richardson step at h/2. Directions alternate between the two followers.
inline GradientReport verify_quasi_equilibrium(const NashSystem& S, const NashSolution& sol, const Field& f,
                                               int n_directions, unsigned long long seed = 0) {
    const Problem& P = *S.P;
    const auto& g = P.grid;
    std::mt19937_64 rng(seed);
    GradientReport rep;
    std::vector<Field> dirs;
    for (int k = 0; k < n_directions; ++k) dirs.push_back(random_direction(g, P.Bi[k % 2], rng));
    rep.analytic.resize(dirs.size());
    rep.fd.resize(dirs.size());
    rep.normalized.resize(dirs.size());
    rep.follower.resize(dirs.size());
    parallel_for(n_directions, [&](int k) {
        const int i = k % 2;
        const auto I = static_cast<std::size_t>(i);
        const Field& w = dirs[static_cast<std::size_t>(k)];
        const double mu = P.followers[I].mu;
        const double vnorm = norm_q(sol.v[I], P.Bi[i], g);
        const double h = 1e-5 * std::max(vnorm, 1.0);
        auto central = [&](double step) {
            auto vp = sol.v, vm = sol.v;
            vp[I].axpy(step, w);
            vm[I].axpy(-step, w);
            return (follower_cost(S, f, i, vp) - follower_cost(S, f, i, vm)) / (2 * step);
        };
        const double d1 = central(h), d2 = central(0.5 * h);
        const double rich = (4.0 * d2 - d1) / 3.0;
        double an = 0.0;
        for (int n = 1; n <= g.Nt; ++n) {
            auto pc = sol.p[I].cell(n);
            auto vc = sol.v[I].cell(n);
            auto wc = w.cell(n);
            for (int j = 1; j <= g.Nx; ++j) {
                const auto J = static_cast<std::size_t>(j);
                an += P.Bi[i][J] * (pc[J] + mu * vc[J]) * wc[J];
            }
        }
        an *= g.dt() * g.dx();
        double scale = mu * vnorm + norm_q(sol.p[I], P.Bi[i], g);
        if (scale == 0.0) scale = 1.0;
        const auto K = static_cast<std::size_t>(k);
        rep.analytic[K] = an;
        rep.fd[K] = rich;
        rep.normalized[K] = std::abs(rich) / (norm_q(w, g) * scale);
        rep.follower[K] = i;
    });
    for (double x : rep.normalized) rep.max_normalized = std::max(rep.max_normalized, x);
    return rep;
}

}  // namespace hiercontrol
