#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "geometry.hpp"
#include "nash.hpp"
#include "weights.hpp"

namespace hiercontrol {

/// Natural logs of the weighted quantities ∬rho0^2 (|y|^2 + |p1|^2 + |p2|^2)
/// and ∬_O (rho1^2 |f|^2 + rho3^2 |f_t|^2). -inf means the integral is 0.
struct WeightedNorms {
    double log_state = -kInf;
    double log_control = -kInf;
    double log_control_t = -kInf;
    bool finite() const {
        return log_state < kInf && log_control < kInf && log_control_t < kInf;
    }
};

namespace detail {

/// Running log(sum exp(x_k)) without overflow.
struct LogSum {
    double m = -kInf, s = 0.0;
    void add(double x) {
        if (x == -kInf) return;
        if (x == kInf) {
            m = kInf;
            return;
        }
        if (m == kInf) return;
        if (x <= m) {
            s += std::exp(x - m);
        } else {
            s = s * std::exp(m - x) + 1.0;
            m = x;
        }
    }
    double value() const { return m == -kInf || m == kInf ? m : m + std::log(s); }
};

/// log of rho^2 * dt dx sum_j mask_j v_j^2 on cell n, with the weight at
/// node time t_n. A zero cell contributes nothing even where rho is infinite.
inline double log_weighted_cell(const CarlemanWeights& w, Rho r, int n, double sumsq) {
    if (sumsq == 0.0) return -kInf;
    return 2 * w.log_rho(r, w.grid.t(n)) + std::log(sumsq * w.grid.dt() * w.grid.dx());
}

}  // namespace detail

inline WeightedNorms weighted_norms(const CarlemanWeights& w, const Problem& P, const Field& y,
                                    const std::array<Field, 2>& p, const Field& f) {
    const auto& g = P.grid;
    WeightedNorms out;
    detail::LogSum st, ct, ctt;
    for (int n = 1; n <= g.Nt; ++n) {
        double ss = 0.0, cs = 0.0, cts = 0.0;
        for (int j = 1; j <= g.Nx; ++j) {
            const auto J = static_cast<std::size_t>(j);
            ss += y.cell(n)[J] * y.cell(n)[J];
            for (const auto& pi : p) ss += pi.cell(n)[J] * pi.cell(n)[J];
            cs += P.B[J] * f.cell(n)[J] * f.cell(n)[J];
            if (n < g.Nt) {
                const double ft = (f.cell(n + 1)[J] - f.cell(n)[J]) / g.dt();
                cts += P.B[J] * ft * ft;
            }
        }
        st.add(detail::log_weighted_cell(w, Rho::rho0, n, ss));
        ct.add(detail::log_weighted_cell(w, Rho::rho1, n, cs));
        ctt.add(detail::log_weighted_cell(w, Rho::rho3, n, cts));
    }
    out.log_state = st.value();
    out.log_control = ct.value();
    out.log_control_t = ctt.value();
    return out;
}

struct EpsRow {
    double eps = 0.0;
    double terminal_norm = 0.0;
    int iterations = 0;
    double control_norm = 0.0;
    bool converged = false;
};

struct NullControlResult {
    std::string method;
    Field f;
    NashSolution nash;          // re-solved under f
    double terminal_norm = 0.0; // ||y(T)|| of the re-solve (distance to ybar(T) for trajectories)
    double y0_norm = 0.0;
    WeightedNorms weighted;
    int iterations = 0;
    double epsilon = 0.0;
    std::vector<EpsRow> eps_table;
    std::vector<double> history;
    Sources sources;

    // Weighted least squares extras.
    Field yhat;
    std::array<Field, 2> phat;
    bool yhat_terminal_zero = false;
    double resim_mismatch = 0.0;
    double consistency = 0.0;
    double dropped_rhs = 0.0;
    bool cg_converged = true;

    // Picard / trajectory extras.
    double smallness = 0.0;
    bool smallness_gate = true;
    std::vector<ConditionCheck> checks;

    double terminal_ratio() const { return y0_norm > 0.0 ? terminal_norm / y0_norm : terminal_norm; }
};

/// Follower targets moved into the adjoint sources: G_i = -alpha_i C_i y_id.
inline Sources target_sources(const Problem& P) {
    const auto& g = P.grid;
    Sources s{Field(g), Field(g), Field(g)};
    for (int i = 0; i < 2; ++i) {
        Field& Gi = i == 0 ? s.G1 : s.G2;
        const auto& fo = P.followers[static_cast<std::size_t>(i)];
        for (int n = 1; n <= g.Nt; ++n)
            for (int j = 1; j <= g.Nx; ++j)
                Gi.cell(n)[static_cast<std::size_t>(j)] =
                    -fo.alpha * P.C[i][static_cast<std::size_t>(j)] * fo.target.cell(n)[static_cast<std::size_t>(j)];
    }
    return s;
}

struct CgOutcome {
    int iterations = 0;
    bool converged = false;
    double rel_residual = 0.0;
    std::vector<double> history;
};

/// Preconditioned CG on a symmetric positive operator with periodic restarts
/// from the true residual. inv_diag == nullptr means no preconditioner.
/// `stall_window` > 0 raises CGStalled when the residual fails to drop by 1%
/// over that many iterations.
template <class Apply>
CgOutcome pcg(Apply A, const std::vector<double>& b, std::vector<double>& x, const std::vector<double>* inv_diag,
              double tol, int cap_per_cycle, int max_cycles, int stall_window = 0) {
    const std::size_t N = b.size();
    auto dot = [](const std::vector<double>& a, const std::vector<double>& c) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * c[i];
        return s;
    };
    CgOutcome out;
    const double bn = std::sqrt(dot(b, b));
    if (bn == 0.0) {
        std::fill(x.begin(), x.end(), 0.0);
        out.converged = true;
        return out;
    }
    std::vector<double> r(N), z(N), p(N), Ap(N);
    for (int cycle = 0; cycle < max_cycles; ++cycle) {
        A(x, Ap);
        for (std::size_t i = 0; i < N; ++i) r[i] = b[i] - Ap[i];
        auto precond = [&] {
            for (std::size_t i = 0; i < N; ++i) z[i] = inv_diag ? (*inv_diag)[i] * r[i] : r[i];
        };
        precond();
        p = z;
        double rz = dot(r, z);
        for (int it = 0; it < cap_per_cycle; ++it) {
            const double rn = std::sqrt(dot(r, r)) / bn;
            out.history.push_back(rn);
            out.rel_residual = rn;
            if (rn <= tol) {
                out.converged = true;
                return out;
            }
            const auto& h = out.history;
            if (stall_window > 0 && static_cast<int>(h.size()) > stall_window &&
                h.back() > 0.99 * h[h.size() - 1 - static_cast<std::size_t>(stall_window)])
                throw cg_stalled("relative gradient reduction below 1e-2 over " + std::to_string(stall_window) +
                                 " iterations")
                    .with_history(h);
            A(p, Ap);
            const double pAp = dot(p, Ap);
            if (!(pAp > 0.0)) {
                if (pAp == 0.0 && dot(p, p) == 0.0) break;
                throw form_not_coercive("non-positive curvature direction in conjugate gradient");
            }
            const double a = rz / pAp;
            for (std::size_t i = 0; i < N; ++i) {
                x[i] += a * p[i];
                r[i] -= a * Ap[i];
            }
            precond();
            const double rz2 = dot(r, z);
            for (std::size_t i = 0; i < N; ++i) p[i] = z[i] + (rz2 / rz) * p[i];
            rz = rz2;
            ++out.iterations;
        }
    }
    A(x, Ap);
    for (std::size_t i = 0; i < N; ++i) r[i] = b[i] - Ap[i];
    out.rel_residual = std::sqrt(dot(r, r)) / bn;
    out.converged = out.rel_residual <= tol;
    return out;
}

// ---------------------------------------------------------------------------
// Penalized HUM
// ---------------------------------------------------------------------------

struct HumOptions {
    std::vector<double> eps_schedule{1e-2, 1e-4, 1e-6, 1e-8};
    double cg_tol = 1e-10;
    int max_iter = 4000;
    int stall_window = 50;
    /// Relative-update tolerance of the inner Nash solves defining the map.
    double inner_tol = 1e-13;
};

/// min 1/2 ∬_O rho1^2 |f|^2 + 1/(2 eps) ||y_f(T)||^2 with y_f the
/// Nash-coupled state. Solved in g = rho1 f (rho1 normalized by its
/// minimum), where the functional is 1/2 ||g||^2 + 1/(2 eps)||K g + y_free||^2.
class PenalizedHum {
public:
    PenalizedHum(const Problem& P, const LinearizedOperator& op, const LeaderWeights& lw, HumOptions opt = {})
        : P_(&P), op_(&op), opt_(std::move(opt)), D_(static_cast<std::size_t>(P.grid.Nt + 1), 0.0),
          sm_(P.model, P.grid), zero_(static_cast<std::size_t>(P.grid.nodes()), 0.0) {
        for (std::size_t n = 1; n < D_.size(); ++n) D_[n] = std::sqrt(lw.hum[n]);
    }

    const Problem& problem() const { return *P_; }
    int unknowns() const { return P_->grid.Nt * P_->grid.Nx; }

    /// Control f = rho1^{-1} B g.
    Field control(const std::vector<double>& gv) const {
        const auto& g = P_->grid;
        Field f(g);
        for (int n = 1; n <= g.Nt; ++n)
            for (int j = 1; j <= g.Nx; ++j)
                f.cell(n)[static_cast<std::size_t>(j)] =
                    D_[static_cast<std::size_t>(n)] * P_->B[static_cast<std::size_t>(j)] * gv[idx(n, j)];
        return f;
    }

    /// Nash-coupled state under f, y0 and targets as in the problem.
    NashSolution full_state(const Field& f) const {
        NashSystem S{P_, &sm_, op_, NashMode::Linear, nullptr, nullptr, {}};
        NashOptions no;
        no.tol = opt_.inner_tol;
        return solve_nash_fixed_point(S, f, no);
    }

    std::vector<double> free_terminal() const {
        const Field zero(P_->grid);
        const auto s = full_state(zero);
        auto l = s.y.level(P_->grid.Nt);
        return {l.begin(), l.end()};
    }

    /// K g: terminal state of the homogeneous coupled system (y0 = 0, no targets).
    std::vector<double> apply_K(const std::vector<double>& gv) const {
        NashSystem S{P_, &sm_, op_, NashMode::Linear, nullptr, &zero_, {}};
        NashOptions no;
        no.tol = opt_.inner_tol;
        no.include_targets = false;
        const auto s = solve_nash_fixed_point(S, control(gv), no);
        auto l = s.y.level(P_->grid.Nt);
        return {l.begin(), l.end()};
    }

    /// K^T w in the space-time inner product: rho1^{-1} B phi.
    std::vector<double> apply_KT(const std::vector<double>& w) const {
        const auto& g = P_->grid;
        const auto ca = solve_coupled_adjoint(*P_, *op_, w, nullptr, opt_.inner_tol);
        std::vector<double> out(static_cast<std::size_t>(unknowns()), 0.0);
        for (int n = 1; n <= g.Nt; ++n)
            for (int j = 1; j <= g.Nx; ++j)
                out[idx(n, j)] = D_[static_cast<std::size_t>(n)] * P_->B[static_cast<std::size_t>(j)] *
                                 ca.phi.cell(n)[static_cast<std::size_t>(j)];
        return out;
    }

    double functional(const std::vector<double>& gv, double eps, const std::vector<double>& yfree) const {
        const auto& g = P_->grid;
        auto yT = apply_K(gv);
        for (std::size_t j = 0; j < yT.size(); ++j) yT[j] += yfree[j];
        double gg = 0.0;
        for (double v : gv) gg += v * v;
        return 0.5 * gg * g.dt() * g.dx() + 0.5 / eps * dot_x(yT, yT, g.dx());
    }

    /// Gradient in the space-time inner product: g + K^T (K g + y_free) / eps.
    std::vector<double> gradient(const std::vector<double>& gv, double eps, const std::vector<double>& yfree) const {
        auto yT = apply_K(gv);
        for (std::size_t j = 0; j < yT.size(); ++j) yT[j] += yfree[j];
        auto kt = apply_KT(yT);
        for (std::size_t i = 0; i < kt.size(); ++i) kt[i] = gv[i] * mask_at(i) + kt[i] / eps;
        return kt;
    }

    NullControlResult solve() const {
        const auto& g = P_->grid;
        NullControlResult res;
        res.method = "penalized_hum";
        res.y0_norm = norm_x(P_->y0, g.dx());
        const auto yfree = free_terminal();
        std::vector<double> gv(static_cast<std::size_t>(unknowns()), 0.0);
        const int N = unknowns();
        for (double eps : opt_.eps_schedule) {
            auto KTy = apply_KT(yfree);
            std::vector<double> b(KTy.size());
            for (std::size_t i = 0; i < b.size(); ++i) b[i] = -KTy[i] / eps;
            auto A = [&](const std::vector<double>& v, std::vector<double>& out) {
                auto kt = apply_KT(apply_K(v));
                for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * mask_at(i) + kt[i] / eps;
            };
            const auto cg = pcg(A, b, gv, nullptr, opt_.cg_tol, std::min(opt_.max_iter, 10 * N), 1,
                                opt_.stall_window);
            const Field f = control(gv);
            const auto sol = full_state(f);
            EpsRow row;
            row.eps = eps;
            row.iterations = cg.iterations;
            row.converged = cg.converged;
            row.terminal_norm = norm_x(sol.y.level(g.Nt), g.dx());
            row.control_norm = norm_q(f, g);
            res.eps_table.push_back(row);
            res.iterations += cg.iterations;
            res.history.insert(res.history.end(), cg.history.begin(), cg.history.end());
            res.epsilon = eps;
            res.f = f;
            res.nash = sol;
            res.terminal_norm = row.terminal_norm;
        }
        if (opt_.eps_schedule.empty()) {
            res.f = Field(g);
            res.nash = full_state(res.f);
            res.terminal_norm = norm_x(res.nash.y.level(g.Nt), g.dx());
        }
        return res;
    }

    /// Terminal norms along the schedule never increase.
    static bool monotone(const std::vector<EpsRow>& t) {
        for (std::size_t k = 1; k < t.size(); ++k)
            if (t[k].terminal_norm > t[k - 1].terminal_norm) return false;
        return true;
    }

    std::size_t idx(int n, int j) const {
        return static_cast<std::size_t>((n - 1) * P_->grid.Nx + (j - 1));
    }

private:
    double mask_at(std::size_t i) const {
        return P_->B[i % static_cast<std::size_t>(P_->grid.Nx) + 1];
    }

    const Problem* P_;
    const LinearizedOperator* op_;
    HumOptions opt_;
    std::vector<double> D_;
    StateModel sm_;
    std::vector<double> zero_;
};

// ---------------------------------------------------------------------------
// Weighted least squares
// ---------------------------------------------------------------------------

struct WlsOptions {
    double cg_tol = 1e-10;
    /// Restart cycles; each cycle is capped at 10 sqrt(unknowns) iterations.
    int max_cycles = 40;
};

/// Quadratic form b on (u, z1, z2) with u on levels 0..Nt and z_i on levels
/// 1..Nt (z_i(0) = 0), all with zero boundary values. With
///   R_n   = (u_{n-1} - u_n)/dt + A_n^T u_{n-1} - sum_i alpha_i C_i z^i_n
///   Q^i_n = (z^i_n - z^i_{n-1})/dt + A_n z^i_n + B_i u_{n-1} / mu_i
///   P_n   = B u_{n-1}
/// b = dt dx sum_n W0_n (|R_n|^2 + |Q^1_n|^2 + |Q^2_n|^2) + W1_n |P_n|^2.
/// All vectors are flat; the dt dx factor is divided out everywhere.
class WeightedLeastSquares {
public:
    WeightedLeastSquares(const Problem& P, const LinearizedOperator& op, const LeaderWeights& lw)
        : P_(&P), op_(&op), lw_(&lw), nx_(P.grid.Nx), nt_(P.grid.Nt) {}

    std::size_t size() const { return static_cast<std::size_t>((nt_ + 1) * nx_ + 2 * nt_ * nx_); }
    std::size_t iu(int m, int j) const { return static_cast<std::size_t>(m * nx_ + j - 1); }
    std::size_t iz(int i, int m, int j) const {
        return static_cast<std::size_t>((nt_ + 1) * nx_ + i * nt_ * nx_ + (m - 1) * nx_ + j - 1);
    }

    struct Blocks {
        std::vector<double> R, Q1, Q2, Pb;  // cell n (1..Nt) at (n-1) Nx + j-1
    };

    Blocks residual(const std::vector<double>& U) const {
        const auto& g = P_->grid;
        const double dt = g.dt(), dx = g.dx();
        const std::size_t C = static_cast<std::size_t>(nt_ * nx_);
        Blocks b{std::vector<double>(C), std::vector<double>(C), std::vector<double>(C), std::vector<double>(C)};
        std::vector<double> uprev(node_count()), tmp(node_count()), zc(node_count());
        for (int n = 1; n <= nt_; ++n) {
            load_u(U, n - 1, uprev);
            op_->level(n).apply_transpose(uprev, tmp, dx);
            for (int j = 1; j <= nx_; ++j) {
                const auto J = static_cast<std::size_t>(j);
                double r = (uprev[J] - U[iu(n, j)]) / dt + tmp[J];
                for (int i = 0; i < 2; ++i) r -= P_->followers[i].alpha * P_->C[i][J] * U[iz(i, n, j)];
                b.R[cix(n, j)] = r;
                b.Pb[cix(n, j)] = P_->B[J] * uprev[J];
            }
            for (int i = 0; i < 2; ++i) {
                load_z(U, i, n, zc);
                op_->level(n).apply(zc, tmp, dx);
                auto& Q = i == 0 ? b.Q1 : b.Q2;
                for (int j = 1; j <= nx_; ++j) {
                    const auto J = static_cast<std::size_t>(j);
                    const double zp = n > 1 ? U[iz(i, n - 1, j)] : 0.0;
                    Q[cix(n, j)] = (zc[J] - zp) / dt + tmp[J] + P_->Bi[i][J] * uprev[J] / P_->followers[i].mu;
                }
            }
        }
        return b;
    }

    /// Transpose of `residual` applied to already weighted blocks.
    std::vector<double> transpose(const Blocks& w) const {
        const auto& g = P_->grid;
        const double dt = g.dt(), dx = g.dx();
        std::vector<double> out(size(), 0.0);
        std::vector<double> r(node_count()), tmp(node_count());
        for (int n = 1; n <= nt_; ++n) {
            load_cell(w.R, n, r);
            op_->level(n).apply(r, tmp, dx);
            for (int j = 1; j <= nx_; ++j) {
                const auto J = static_cast<std::size_t>(j);
                double v = r[J] / dt + tmp[J] + P_->B[J] * w.Pb[cix(n, j)];
                for (int i = 0; i < 2; ++i)
                    v += P_->Bi[i][J] * (i == 0 ? w.Q1 : w.Q2)[cix(n, j)] / P_->followers[i].mu;
                out[iu(n - 1, j)] += v;
                out[iu(n, j)] -= r[J] / dt;
                for (int i = 0; i < 2; ++i) out[iz(i, n, j)] -= P_->followers[i].alpha * P_->C[i][J] * r[J];
            }
            for (int i = 0; i < 2; ++i) {
                const auto& Q = i == 0 ? w.Q1 : w.Q2;
                load_cell(Q, n, r);
                op_->level(n).apply_transpose(r, tmp, dx);
                for (int j = 1; j <= nx_; ++j) {
                    const auto J = static_cast<std::size_t>(j);
                    out[iz(i, n, j)] += r[J] / dt + tmp[J];
                    if (n > 1) out[iz(i, n - 1, j)] -= r[J] / dt;
                }
            }
        }
        return out;
    }

    Blocks weighted(Blocks b) const {
        for (int n = 1; n <= nt_; ++n) {
            const double w0 = lw_->W0[static_cast<std::size_t>(n)], w1 = lw_->W1[static_cast<std::size_t>(n)];
            for (int j = 1; j <= nx_; ++j) {
                const auto k = cix(n, j);
                b.R[k] *= w0;
                b.Q1[k] *= w0;
                b.Q2[k] *= w0;
                b.Pb[k] *= w1;
            }
        }
        return b;
    }

    void apply(const std::vector<double>& U, std::vector<double>& out) const { out = transpose(weighted(residual(U))); }

    double form(const std::vector<double>& U, const std::vector<double>& V) const {
        const auto a = apply_copy(U);
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * V[i];
        return s;
    }

    /// Exact diagonal of the form.
    std::vector<double> diagonal() const {
        const auto& g = P_->grid;
        const double dt = g.dt(), dx = g.dx();
        std::vector<double> d(size(), 0.0);
        for (int n = 1; n <= nt_; ++n) {
            const auto N = static_cast<std::size_t>(n);
            const double w0 = lw_->W0[N], w1 = lw_->W1[N];
            const Tridiag M = op_->level(n).matrix(dx, 1.0 / dt);
            for (int j = 1; j <= nx_; ++j) {
                const auto J = static_cast<std::size_t>(j);
                const std::size_t i = J - 1;
                const std::size_t last = static_cast<std::size_t>(nx_ - 1);
                double row = M.di[i] * M.di[i];
                if (i > 0) row += M.lo[i] * M.lo[i];
                if (i < last) row += M.up[i] * M.up[i];
                double col = M.di[i] * M.di[i];
                if (i > 0) col += M.up[i - 1] * M.up[i - 1];
                if (i < last) col += M.lo[i + 1] * M.lo[i + 1];
                double du = w0 * row + w1 * P_->B[J] * P_->B[J];
                for (int k = 0; k < 2; ++k) {
                    const double c = P_->Bi[k][J] / P_->followers[k].mu;
                    du += w0 * c * c;
                }
                d[iu(n - 1, j)] += du;
                d[iu(n, j)] += w0 / (dt * dt);
                for (int k = 0; k < 2; ++k) {
                    const double a = P_->followers[k].alpha * P_->C[k][J];
                    d[iz(k, n, j)] += w0 * (col + a * a);
                    if (n > 1) d[iz(k, n - 1, j)] += w0 / (dt * dt);
                }
            }
        }
        return d;
    }

    /// Linear functional (y0, u(0)) + ∬ G u + G1 z1 + G2 z2, divided by dt dx.
    std::vector<double> rhs(std::span<const double> y0, const Sources* src) const {
        const auto& g = P_->grid;
        std::vector<double> b(size(), 0.0);
        for (int j = 1; j <= nx_; ++j) b[iu(0, j)] += y0[static_cast<std::size_t>(j)] / g.dt();
        if (src && !src->empty())
            for (int n = 1; n <= nt_; ++n)
                for (int j = 1; j <= nx_; ++j) {
                    const auto J = static_cast<std::size_t>(j);
                    b[iu(n - 1, j)] += src->G.cell(n)[J];
                    b[iz(0, n, j)] += src->G1.cell(n)[J];
                    b[iz(1, n, j)] += src->G2.cell(n)[J];
                }
        return b;
    }

    struct Solution {
        std::vector<double> U;
        Field y, f;
        std::array<Field, 2> p;
        CgOutcome cg;
        double dropped_rhs = 0.0;  // rhs mass on unknowns the form does not see
    };

    Solution solve(std::span<const double> y0, const Sources* src, const WlsOptions& opt = {}) const {
        const auto d = diagonal();
        auto b = rhs(y0, src);
        std::vector<double> inv(d.size(), 0.0);
        double dropped = 0.0, total = 0.0;
        int active = 0;
        for (std::size_t i = 0; i < d.size(); ++i) {
            total += b[i] * b[i];
            if (d[i] > 0.0) {
                inv[i] = 1.0 / d[i];
                ++active;
            } else {
                dropped += b[i] * b[i];
                b[i] = 0.0;
            }
        }
        Solution s;
        s.dropped_rhs = total > 0.0 ? std::sqrt(dropped / total) : 0.0;
        s.U.assign(d.size(), 0.0);
        const int cap = std::max(1, static_cast<int>(std::ceil(10.0 * std::sqrt(static_cast<double>(active)))));
        s.cg = pcg([&](const std::vector<double>& v, std::vector<double>& o) { apply(v, o); }, b, s.U, &inv,
                   opt.cg_tol, cap, opt.max_cycles);
        recover(s, y0);
        return s;
    }

    /// yhat_n = W0_n R_n, phat^i at level n-1 = W0_n Q^i_n, fhat_n = -W1_n P_n.
    void recover(Solution& s, std::span<const double> y0) const {
        const auto& g = P_->grid;
        const auto w = weighted(residual(s.U));
        s.y = Field(g, Staging::Forward);
        s.p = {Field(g, Staging::Backward), Field(g, Staging::Backward)};
        s.f = Field(g, Staging::Forward);
        std::copy(y0.begin(), y0.end(), s.y.level(0).begin());
        s.y(0, 0) = s.y(0, nx_ + 1) = 0.0;
        for (int n = 1; n <= nt_; ++n)
            for (int j = 1; j <= nx_; ++j) {
                const auto k = cix(n, j);
                s.y(n, j) = w.R[k];
                s.p[0](n - 1, j) = w.Q1[k];
                s.p[1](n - 1, j) = w.Q2[k];
                s.f(n, j) = -w.Pb[k];
            }
    }

private:
    std::size_t node_count() const { return static_cast<std::size_t>(nx_ + 2); }
    std::size_t cix(int n, int j) const { return static_cast<std::size_t>((n - 1) * nx_ + j - 1); }

    std::vector<double> apply_copy(const std::vector<double>& U) const {
        std::vector<double> o;
        apply(U, o);
        return o;
    }
    void load_u(const std::vector<double>& U, int m, std::vector<double>& out) const {
        out.front() = out.back() = 0.0;
        for (int j = 1; j <= nx_; ++j) out[static_cast<std::size_t>(j)] = U[iu(m, j)];
    }
    void load_z(const std::vector<double>& U, int i, int m, std::vector<double>& out) const {
        out.front() = out.back() = 0.0;
        for (int j = 1; j <= nx_; ++j) out[static_cast<std::size_t>(j)] = U[iz(i, m, j)];
    }
    void load_cell(const std::vector<double>& c, int n, std::vector<double>& out) const {
        out.front() = out.back() = 0.0;
        for (int j = 1; j <= nx_; ++j) out[static_cast<std::size_t>(j)] = c[cix(n, j)];
    }

    const Problem* P_;
    const LinearizedOperator* op_;
    const LeaderWeights* lw_;
    int nx_, nt_;
};

/// Residual of the linear optimality system minus its sources, relative to
/// the source and control scale.
inline double linear_consistency(const Problem& P, const LinearizedOperator& op, const Field& y,
                                 const std::array<Field, 2>& p, const Field& f, const Sources& src) {
    auto R = apply_linear_optimality_residual(P, op, y, p[0], p[1], f);
    const auto& g = P.grid;
    double scale = 0.0;
    if (!src.empty()) {
        R.G -= src.G;
        R.G1 -= src.G1;
        R.G2 -= src.G2;
        scale = std::sqrt(dot_q(src.G, src.G, g) + dot_q(src.G1, src.G1, g) + dot_q(src.G2, src.G2, g));
    }
    scale = std::max({scale, norm_x(P.y0, g.dx()), norm_q(f, g), 1e-300});
    return R.norm(g) / scale;
}

/// Weighted least-squares null control of the linear system at `op` with
/// sources `src` (targets are expected inside src).
inline NullControlResult null_control_weighted_ls(const Problem& P, const StateModel& sm, const LinearizedOperator& op,
                                                  const CarlemanWeights& w, const Sources& src,
                                                  const WlsOptions& opt = {}) {
    const auto& g = P.grid;
    const auto lw = leader_weights(w);
    const WeightedLeastSquares wls(P, op, lw);
    auto s = wls.solve(P.y0, &src, opt);

    NullControlResult res;
    res.method = "weighted_ls";
    res.y0_norm = norm_x(P.y0, g.dx());
    res.f = s.f;
    res.yhat = s.y;
    res.phat = s.p;
    res.iterations = s.cg.iterations;
    res.history = s.cg.history;
    res.cg_converged = s.cg.converged;
    res.dropped_rhs = s.dropped_rhs;
    res.sources = src;
    res.yhat_terminal_zero = max_abs(s.y.level(g.Nt)) == 0.0;
    res.weighted = weighted_norms(w, P, s.y, s.p, s.f);
    res.consistency = linear_consistency(P, op, s.y, s.p, s.f, src);

    NashSystem S{&P, &sm, &op, NashMode::Linear, &src, nullptr, {}};
    NashOptions no;
    no.include_targets = false;
    no.tol = 1e-12;
    res.nash = solve_nash_fixed_point(S, s.f, no);
    res.terminal_norm = norm_x(res.nash.y.level(g.Nt), g.dx());
    Field d = res.nash.y;
    d -= s.y;
    const double ny = norm_q(s.y, g);
    res.resim_mismatch = ny > 0.0 ? norm_q(d, g) / ny : norm_q(d, g);
    return res;
}

inline NullControlResult null_control_weighted_ls(const Problem& P, const CarlemanWeights& w,
                                                  const WlsOptions& opt = {}) {
    const StateModel sm(P.model, P.grid);
    const auto op = LinearizedOperator::at_zero(sm);
    return null_control_weighted_ls(P, sm, op, w, target_sources(P), opt);
}

inline NullControlResult null_control_penalized(const Problem& P, const CarlemanWeights& w, HumOptions opt = {}) {
    const StateModel sm(P.model, P.grid);
    const auto op = LinearizedOperator::at_zero(sm);
    const auto lw = leader_weights(w);
    const PenalizedHum hum(P, op, lw, std::move(opt));
    auto res = hum.solve();
    res.weighted = weighted_norms(w, P, res.nash.y, res.nash.p, res.f);
    return res;
}

// ---------------------------------------------------------------------------
// Picard outer loop and trajectories
// ---------------------------------------------------------------------------

struct PicardOptions {
    int max_outer = 60;
    double tol = 1e-9;          // nonlinear optimality residual relative to ||y0||
    double damping = 0.5;
    double blowup = 1e6;        // residual growth over the first iterate that counts as divergence
    double gate_factor = 0.1;   // smallness gate ||y0||_{H3 proxy} <= gate_factor a0, reported only
    WlsOptions wls;
};

/// Remainder sources turning the nonlinear optimality system into the linear
/// one at `op0`: G = -(N(y) - A0 y), G_i = -(A(y)^T - A0^T) p_i - alpha_i C_i y_id.
inline Sources remainder_sources(const Problem& P, const StateModel& sm, const LinearizedOperator& op0, const Field& y,
                                 const std::array<Field, 2>& p) {
    const auto& g = P.grid;
    const double dx = g.dx();
    Sources s = target_sources(P);
    std::vector<double> a(static_cast<std::size_t>(g.nodes())), b(a.size());
    for (int n = 1; n <= g.Nt; ++n) {
        sm.residual(n, y.level(n), a);
        op0.level(n).apply(y.level(n), b, dx);
        for (int j = 1; j <= g.Nx; ++j) s.G.cell(n)[static_cast<std::size_t>(j)] = -(a[static_cast<std::size_t>(j)] - b[static_cast<std::size_t>(j)]);
        const auto Jy = sm.jacobian(n, y.level(n));
        for (int i = 0; i < 2; ++i) {
            Jy.apply_transpose(p[i].cell(n), a, dx);
            op0.level(n).apply_transpose(p[i].cell(n), b, dx);
            Field& Gi = i == 0 ? s.G1 : s.G2;
            for (int j = 1; j <= g.Nx; ++j) {
                const auto J = static_cast<std::size_t>(j);
                Gi.cell(n)[J] -= a[J] - b[J];
            }
        }
    }
    return s;
}

inline double nonlinear_residual(const Problem& P, const StateModel& sm, const Field& y, const std::array<Field, 2>& p,
                                 const Field& f) {
    auto R = apply_optimality_residual(P, sm, y, p[0], p[1], f);
    double r = R.norm(P.grid);
    std::vector<double> d(R.y0_out);
    for (std::size_t j = 0; j < d.size(); ++j) d[j] -= P.y0[j];
    return std::hypot(r, norm_x(d, P.grid.dx()));
}

/// Damped Picard iteration on the remainder sources, each step a weighted
/// least-squares solve of the linear problem at the zero state of `sm`.
inline NullControlResult picard_core(const Problem& P, const StateModel& sm, const CarlemanWeights& w,
                                     const PicardOptions& opt) {
    const auto& g = P.grid;
    const auto op0 = LinearizedOperator::at_zero(sm);
    const auto lw = leader_weights(w);
    const WeightedLeastSquares wls(P, op0, lw);

    NullControlResult res;
    res.method = "picard_nonlinear";
    res.y0_norm = norm_x(P.y0, g.dx());
    res.smallness = norm_h3_proxy(P.y0, g.dx());
    res.smallness_gate = res.smallness <= opt.gate_factor * P.model.a0();
    const double scale = std::max(res.y0_norm, 1e-300);

    const Sources first = target_sources(P);
    auto s = wls.solve(P.y0, &first, opt.wls);
    Field y = s.y, f = s.f;
    std::array<Field, 2> p = s.p;
    double theta = opt.damping, r0 = -1.0, prev = kInf;
    std::vector<double> norms;
    for (int k = 1; k <= opt.max_outer; ++k) {
        const double r = nonlinear_residual(P, sm, y, p, f) / scale;
        res.history.push_back(r);
        norms.push_back(norm_q(y, g));
        res.iterations = k;
        if (!std::isfinite(r) || (r0 > 0.0 && r > opt.blowup * r0))
            throw outer_diverged("Picard outer loop blew up at iteration " + std::to_string(k)).with_history(norms);
        if (r0 < 0.0) r0 = std::max(r, 1e-300);
        if (r <= opt.tol) {
            res.f = f;
            res.yhat = y;
            res.phat = p;
            res.sources = remainder_sources(P, sm, op0, y, p);
            res.cg_converged = s.cg.converged;
            res.dropped_rhs = s.dropped_rhs;
            res.yhat_terminal_zero = max_abs(y.level(g.Nt)) == 0.0;
            res.weighted = weighted_norms(w, P, y, p, f);
            NashSystem S{&P, &sm, nullptr, NashMode::Nonlinear, nullptr, nullptr, {}};
            NashOptions no;
            no.tol = 1e-12;
            res.nash = solve_nash_fixed_point(S, f, no);
            res.terminal_norm = norm_x(res.nash.y.level(g.Nt), g.dx());
            return res;
        }
        theta = r < prev ? std::min(1.0, 2.0 * theta) : std::max(1.0 / 64.0, 0.5 * theta);
        prev = r;
        const Sources src = remainder_sources(P, sm, op0, y, p);
        s = wls.solve(P.y0, &src, opt.wls);
        y.axpy(theta, [&] { Field d = s.y; d -= y; return d; }());
        f.axpy(theta, [&] { Field d = s.f; d -= f; return d; }());
        for (int i = 0; i < 2; ++i) p[i].axpy(theta, [&] { Field d = s.p[i]; d -= p[i]; return d; }());
    }
    throw outer_diverged("Picard outer loop not converged after " + std::to_string(opt.max_outer) + " iterations")
        .with_history(norms);
}

inline NullControlResult null_control_nonlinear_picard(const Problem& P, const CarlemanWeights& w,
                                                       const PicardOptions& opt = {}) {
    const StateModel sm(P.model, P.grid);
    return picard_core(P, sm, w, opt);
}

/// sup |ybar_x| over all levels and faces against a0 / (2M), where M bounds
/// the derivatives of a. M = 0 makes the bound infinite.
inline ConditionCheck trajectory_condition(const Problem& P, const Field& ybar) {
    const auto& g = P.grid;
    double sup = 0.0;
    for (int n = 0; n <= g.Nt; ++n)
        for (int j = 0; j <= g.Nx; ++j) sup = std::max(sup, std::abs(ybar(n, j + 1) - ybar(n, j)) / g.dx());
    const double M = P.model.M();
    const double bound = M > 0.0 ? P.model.a0() / (2.0 * M) : kInf;
    ConditionCheck c;
    c.name = "sup |ybar_x| <= a0/(2M)";
    c.pass = sup <= bound;
    c.measure = sup;
    c.detail = "bound " + (std::isfinite(bound) ? std::to_string(bound) : std::string("inf"));
    return c;
}

/// Relative residual of ybar in the uncontrolled equation.
inline double uncontrolled_residual(const Problem& P, const Field& ybar) {
    const auto& g = P.grid;
    const StateModel sm(P.model, g);
    std::vector<double> r(static_cast<std::size_t>(g.nodes()));
    double num = 0.0, den = 0.0;
    for (int n = 1; n <= g.Nt; ++n) {
        sm.residual(n, ybar.level(n), r);
        for (int j = 1; j <= g.Nx; ++j) {
            const double e = (ybar(n, j) - ybar(n - 1, j)) / g.dt() + r[static_cast<std::size_t>(j)];
            num = std::max(num, std::abs(e));
            den = std::max(den, std::abs(ybar(n, j) / g.dt()));
        }
    }
    return den > 0.0 ? num / den : num;
}

/// Drive y(T) to ybar(T) through the z = y - ybar reduction: the state model
/// is shifted by ybar, z0 = y0 - ybar(0), z_id = y_id - ybar.
inline NullControlResult null_control_trajectory(const Problem& P, const Field& ybar, const CarlemanWeights& w,
                                                 const PicardOptions& opt = {}) {
    const auto& g = P.grid;
    const auto cond = trajectory_condition(P, ybar);
    if (!cond.pass)
        throw trajectory_condition_violated("sup |ybar_x| = " + std::to_string(cond.measure) + " exceeds " +
                                            cond.detail);
    Problem Pz = P;
    for (int j = 0; j < g.nodes(); ++j) Pz.y0[static_cast<std::size_t>(j)] = P.y0[static_cast<std::size_t>(j)] - ybar(0, j);
    for (int i = 0; i < 2; ++i) {
        Field& t = Pz.followers[static_cast<std::size_t>(i)].target;
        for (int n = 1; n <= g.Nt; ++n)
            for (int j = 0; j < g.nodes(); ++j) t.cell(n)[static_cast<std::size_t>(j)] -= ybar.level(n)[static_cast<std::size_t>(j)];
    }
    Pz.refresh_masks();
    const StateModel sm(P.model, g, &ybar);
    auto res = picard_core(Pz, sm, w, opt);
    res.method = "trajectory";
    res.checks.push_back(cond);
    ConditionCheck solves{"ybar solves the uncontrolled equation", true, uncontrolled_residual(P, ybar), ""};
    solves.pass = solves.measure <= 1e-8;
    res.checks.push_back(solves);
    return res;
}

}  // namespace hiercontrol
