#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "coefficients.hpp"
#include "field.hpp"
#include "objectives.hpp"
#include "tridiag.hpp"

namespace hiercontrol {

/// Linear spatial operator at one time level,
///   (A h)_j = -(k_{j+1/2}(h_{j+1}-h_j) - k_{j-1/2}(h_j-h_{j-1}))/dx^2 + c_j h_j + b_j (h_{j+1}-h_{j-1})/(2dx).
/// k lives on faces 0..Nx (face f joins nodes f and f+1); c, b on nodes.
struct LevelCoefficients {
    std::vector<double> k, c, b;

    LevelCoefficients() = default;
    explicit LevelCoefficients(int Nx)
        : k(static_cast<std::size_t>(Nx + 1), 0.0), c(static_cast<std::size_t>(Nx + 2), 0.0),
          b(static_cast<std::size_t>(Nx + 2), 0.0) {}

    int Nx() const { return static_cast<int>(c.size()) - 2; }

    /// (shift/dt) I + A on the interior unknowns.
    Tridiag matrix(double dx, double diag_shift = 0.0) const {
        const int nx = Nx();
        Tridiag M(static_cast<std::size_t>(nx));
        const double h2 = 1.0 / (dx * dx), h1 = 0.5 / dx;
        for (int j = 1; j <= nx; ++j) {
            const auto i = static_cast<std::size_t>(j - 1);
            const auto J = static_cast<std::size_t>(j);
            M.di[i] = diag_shift + (k[J - 1] + k[J]) * h2 + c[J];
            M.lo[i] = -k[J - 1] * h2 - b[J] * h1;
            M.up[i] = -k[J] * h2 + b[J] * h1;
        }
        return M;
    }

    /// out = A h on interior nodes, zero on the boundary.
    void apply(std::span<const double> h, std::span<double> out, double dx) const {
        const int nx = Nx();
        const double h2 = 1.0 / (dx * dx), h1 = 0.5 / dx;
        out[0] = out[static_cast<std::size_t>(nx + 1)] = 0.0;
        for (int j = 1; j <= nx; ++j) {
            const auto J = static_cast<std::size_t>(j);
            out[J] = -(k[J] * (h[J + 1] - h[J]) - k[J - 1] * (h[J] - h[J - 1])) * h2 + c[J] * h[J] +
                     b[J] * (h[J + 1] - h[J - 1]) * h1;
        }
    }

    /// out = A^T phi. Convection transposes to (b_{j-1} phi_{j-1} - b_{j+1} phi_{j+1})/(2dx).
    void apply_transpose(std::span<const double> phi, std::span<double> out, double dx) const {
        const int nx = Nx();
        const double h2 = 1.0 / (dx * dx), h1 = 0.5 / dx;
        out[0] = out[static_cast<std::size_t>(nx + 1)] = 0.0;
        for (int j = 1; j <= nx; ++j) {
            const auto J = static_cast<std::size_t>(j);
            const double bl = j > 1 ? b[J - 1] * phi[J - 1] : 0.0;
            const double br = j < nx ? b[J + 1] * phi[J + 1] : 0.0;
            out[J] = -(k[J] * (phi[J + 1] - phi[J]) - k[J - 1] * (phi[J] - phi[J - 1])) * h2 + c[J] * phi[J] +
                     (bl - br) * h1;
        }
    }
};

struct StepOptions {
    double tol = 1e-10;         // within-step residual, relative to the step data scale
    int max_iter = 50;          // within-step Picard cap
    double accept_tol = 1e-10;  // stagnation below this counts as converged
};

/// Semilinear spatial operator N(y) = -(a(y_x,t,x) y_x)_x + F(y, y_x) in flux
/// form, optionally shifted by a trajectory ybar: N_z(z) = N(z + ybar) - N(ybar).
class StateModel {
public:
    StateModel(const CoefficientModel& m, const SpaceTimeGrid& g, const Field* shift = nullptr)
        : m_(&m), g_(g), shift_(shift) {}

    const SpaceTimeGrid& grid() const { return g_; }
    const CoefficientModel& model() const { return *m_; }
    const Field* shift() const { return shift_; }

    /// out = N_n(y) on interior nodes (shifted if a trajectory is set).
    void residual(int n, std::span<const double> y, std::span<double> out) const {
        if (!shift_) {
            plain_residual(n, y, out);
            return;
        }
        std::vector<double> w(y.size()), base(y.size());
        auto yb = shift_->level(n);
        for (std::size_t j = 0; j < y.size(); ++j) w[j] = y[j] + yb[j];
        plain_residual(n, w, out);
        plain_residual(n, yb, base);
        for (std::size_t j = 0; j < y.size(); ++j) out[j] -= base[j];
    }

    /// Exact Jacobian of N_n at y.
    LevelCoefficients jacobian(int n, std::span<const double> y) const {
        std::vector<double> w(y.begin(), y.end());
        if (shift_) {
            auto yb = shift_->level(n);
            for (std::size_t j = 0; j < w.size(); ++j) w[j] += yb[j];
        }
        const int nx = g_.Nx;
        const double dx = g_.dx(), t = g_.t(n);
        LevelCoefficients L(nx);
        for (int f = 0; f <= nx; ++f) {
            const auto F = static_cast<std::size_t>(f);
            const double gr = (w[F + 1] - w[F]) / dx;
            const auto s = m_->a_sample(gr, t, g_.xface(f));
            L.k[F] = s.a + s.as * gr;
        }
        for (int j = 1; j <= nx; ++j) {
            const auto J = static_cast<std::size_t>(j);
            const auto fj = m_->F_jet(w[J], (w[J + 1] - w[J - 1]) / (2 * dx));
            L.c[J] = fj.d1[0];
            L.b[J] = fj.d1[1];
        }
        return L;
    }

    /// One implicit Euler step: (y - yprev)/dt + N_n(y) = src, within-step
    /// Picard with a frozen at the previous iterate and F linearized.
    /// Returns the number of Picard iterations used.
    int step(int n, std::span<const double> yprev, std::span<const double> src, std::span<double> y,
             const StepOptions& opt = {}) const {
        const int nx = g_.Nx;
        const double dx = g_.dx(), dt = g_.dt(), t = g_.t(n);
        const std::size_t N = static_cast<std::size_t>(nx + 2);
        std::vector<double> w(N), rhs(static_cast<std::size_t>(nx)), res(N), shift_part(N, 0.0);
        std::copy(yprev.begin(), yprev.end(), y.begin());
        y[0] = y[N - 1] = 0.0;

        double scale = 1.0;
        for (int j = 1; j <= nx; ++j)
            scale = std::max({scale, std::abs(yprev[static_cast<std::size_t>(j)]) / dt,
                              std::abs(src[static_cast<std::size_t>(j)])});

        std::span<const double> yb;
        if (shift_) yb = shift_->level(n);

        double prev_res = kInf;
        LevelCoefficients Lk(nx);
        for (int it = 1; it <= opt.max_iter; ++it) {
            for (std::size_t j = 0; j < N; ++j) w[j] = y[j] + (shift_ ? yb[j] : 0.0);
            for (int f = 0; f <= nx; ++f) {
                const auto F = static_cast<std::size_t>(f);
                Lk.k[F] = m_->a((w[F + 1] - w[F]) / dx, t, g_.xface(f));
            }
            for (int j = 1; j <= nx; ++j) {
                const auto J = static_cast<std::size_t>(j);
                const auto fj = m_->F_jet(w[J], (w[J + 1] - w[J - 1]) / (2 * dx));
                Lk.c[J] = fj.d1[0];
                Lk.b[J] = fj.d1[1];
                rhs[J - 1] = src[J] + yprev[J] / dt - fj.value + fj.d1[0] * y[J] +
                             fj.d1[1] * (y[J + 1] - y[J - 1]) / (2 * dx);
            }
            if (shift_) {
                // N(ybar) minus the frozen diffusion applied to ybar.
                LevelCoefficients Dk = Lk;
                std::fill(Dk.c.begin(), Dk.c.end(), 0.0);
                std::fill(Dk.b.begin(), Dk.b.end(), 0.0);
                plain_residual(n, yb, res);
                Dk.apply(yb, shift_part, dx);
                for (int j = 1; j <= nx; ++j) {
                    const auto J = static_cast<std::size_t>(j);
                    rhs[J - 1] += res[J] - shift_part[J];
                }
            }
            TridiagFactor(Lk.matrix(dx, 1.0 / dt)).solve(rhs);
            for (int j = 1; j <= nx; ++j) y[static_cast<std::size_t>(j)] = rhs[static_cast<std::size_t>(j - 1)];

            residual(n, y, res);
            double r = 0.0;
            for (int j = 1; j <= nx; ++j) {
                const auto J = static_cast<std::size_t>(j);
                r = std::max(r, std::abs((y[J] - yprev[J]) / dt + res[J] - src[J]));
            }
            if (!std::isfinite(r)) break;
            if (r <= opt.tol * scale) return it;
            if (r <= opt.accept_tol * scale && r >= 0.9 * prev_res) return it;
            prev_res = r;
        }
        throw step_divergence("within-step Picard did not converge at time level " + std::to_string(n));
    }

private:
    void plain_residual(int n, std::span<const double> w, std::span<double> out) const {
        const int nx = g_.Nx;
        const double dx = g_.dx(), t = g_.t(n);
        double left = 0.0;
        {
            const double gr = (w[1] - w[0]) / dx;
            left = m_->a(gr, t, g_.xface(0)) * gr;
        }
        out[0] = out[static_cast<std::size_t>(nx + 1)] = 0.0;
        for (int j = 1; j <= nx; ++j) {
            const auto J = static_cast<std::size_t>(j);
            const double gr = (w[J + 1] - w[J]) / dx;
            const double right = m_->a(gr, t, g_.xface(j)) * gr;
            out[J] = -(right - left) / dx + m_->F(w[J], (w[J + 1] - w[J - 1]) / (2 * dx));
            left = right;
        }
    }

    const CoefficientModel* m_;
    SpaceTimeGrid g_;
    const Field* shift_;
};

/// Per-level linear operators A_n (n = 1..Nt) with factored (I/dt + A_n) and
/// (I/dt + A_n^T). The backward solve is the literal transpose of the forward one.
class LinearizedOperator {
public:
    LinearizedOperator() = default;

    /// Linearization of the state model at a trajectory y (levels 1..Nt used).
    LinearizedOperator(const StateModel& sm, const Field& y) : g_(sm.grid()) {
        build([&](int n) { return sm.jacobian(n, y.level(n)); });
    }

    /// Linearization at the zero state.
    static LinearizedOperator at_zero(const StateModel& sm) {
        LinearizedOperator op;
        op.g_ = sm.grid();
        const std::vector<double> zero(static_cast<std::size_t>(sm.grid().nodes()), 0.0);
        op.build([&](int n) { return sm.jacobian(n, zero); });
        return op;
    }

    const SpaceTimeGrid& grid() const { return g_; }
    const LevelCoefficients& level(int n) const { return lv_[static_cast<std::size_t>(n)]; }

    void forward_step(int n, std::span<double> rhs_interior) const { fwd_[static_cast<std::size_t>(n)].solve(rhs_interior); }
    void backward_step(int n, std::span<double> rhs_interior) const { bwd_[static_cast<std::size_t>(n)].solve(rhs_interior); }

private:
    template <class Make>
    void build(Make make) {
        const double dx = g_.dx(), dt = g_.dt();
        lv_.resize(static_cast<std::size_t>(g_.Nt + 1));
        fwd_.resize(lv_.size());
        bwd_.resize(lv_.size());
        for (int n = 1; n <= g_.Nt; ++n) {
            const auto N = static_cast<std::size_t>(n);
            lv_[N] = make(n);
            const Tridiag M = lv_[N].matrix(dx, 1.0 / dt);
            fwd_[N] = TridiagFactor(M);
            bwd_[N] = TridiagFactor(M.transposed());
        }
    }

    SpaceTimeGrid g_;
    std::vector<LevelCoefficients> lv_;
    std::vector<TridiagFactor> fwd_, bwd_;
};

/// Forward semilinear solve with a cell source (already masked controls and
/// any extra source). y(0) = y0.
inline Field solve_forward(const StateModel& sm, std::span<const double> y0, const Field& source,
                           const StepOptions& opt = {}, int* picard_total = nullptr) {
    const auto& g = sm.grid();
    Field y(g, Staging::Forward);
    std::copy(y0.begin(), y0.end(), y.level(0).begin());
    y(0, 0) = y(0, g.Nx + 1) = 0.0;
    int total = 0;
    for (int n = 1; n <= g.Nt; ++n) total += sm.step(n, y.level(n - 1), source.cell(n), y.level(n), opt);
    if (picard_total) *picard_total = total;
    return y;
}

/// Cell source B f + B1 v1 + B2 v2.
inline Field control_source(const Problem& P, const Field* f, const Field* v1, const Field* v2) {
    Field s(P.grid, Staging::Forward);
    const std::array<std::pair<const Field*, const Mask*>, 3> parts{
        {{f, &P.B}, {v1, &P.Bi[0]}, {v2, &P.Bi[1]}}};
    for (const auto& [fld, m] : parts) {
        if (!fld) continue;
        for (int n = 1; n <= P.grid.Nt; ++n) {
            auto dst = s.cell(n);
            auto src = fld->cell(n);
            for (int j = 1; j <= P.grid.Nx; ++j) {
                const auto J = static_cast<std::size_t>(j);
                dst[J] += (*m)[J] * src[J];
            }
        }
    }
    return s;
}

/// solve_forward with y0 and the three controls of the original system.
inline Field solve_forward_semilinear(const Problem& P, const Field* f, const Field* v1, const Field* v2,
                                      const StepOptions& opt = {}) {
    const StateModel sm(P.model, P.grid);
    return solve_forward(sm, P.y0, control_source(P, f, v1, v2), opt);
}

/// (y_n - y_{n-1})/dt + A_n y_n = rhs_n, y(0) = y0.
inline Field solve_linearized_forward(const LinearizedOperator& op, std::span<const double> y0, const Field& rhs) {
    const auto& g = op.grid();
    const double dt = g.dt();
    Field y(g, Staging::Forward);
    std::copy(y0.begin(), y0.end(), y.level(0).begin());
    y(0, 0) = y(0, g.Nx + 1) = 0.0;
    for (int n = 1; n <= g.Nt; ++n) {
        auto prev = y.level(n - 1);
        auto cur = y.level(n);
        auto r = rhs.cell(n);
        for (int j = 1; j <= g.Nx; ++j) {
            const auto J = static_cast<std::size_t>(j);
            cur[J] = prev[J] / dt + r[J];
        }
        op.forward_step(n, cur.subspan(1, static_cast<std::size_t>(g.Nx)));
    }
    return y;
}

/// (phi_{n-1} - phi_n)/dt + A_n^T phi_{n-1} = rhs_n, phi(T) = terminal.
inline Field solve_adjoint_backward(const LinearizedOperator& op, std::span<const double> terminal, const Field& rhs) {
    const auto& g = op.grid();
    const double dt = g.dt();
    Field p(g, Staging::Backward);
    std::copy(terminal.begin(), terminal.end(), p.level(g.Nt).begin());
    p(g.Nt, 0) = p(g.Nt, g.Nx + 1) = 0.0;
    for (int n = g.Nt; n >= 1; --n) {
        auto next = p.level(n);
        auto cur = p.level(n - 1);
        auto r = rhs.cell(n);
        for (int j = 1; j <= g.Nx; ++j) {
            const auto J = static_cast<std::size_t>(j);
            cur[J] = next[J] / dt + r[J];
        }
        op.backward_step(n, cur.subspan(1, static_cast<std::size_t>(g.Nx)));
    }
    return p;
}

/// Component residuals of the coupled optimality system with followers
/// substituted, v_i = -(1/mu_i) p_i on O_i.
struct OptimalityResidual {
    Field G, G1, G2;            // state and adjoint residuals, cell fields
    std::vector<double> y0_out; // y(0)

    double norm(const SpaceTimeGrid& g) const {
        return std::sqrt(dot_q(G, G, g) + dot_q(G1, G1, g) + dot_q(G2, G2, g));
    }
};

namespace detail {

template <class ApplyState, class ApplyAdjoint>
OptimalityResidual optimality_residual(const Problem& P, const Field& y, const Field& p1, const Field& p2,
                                       const Field& f, bool with_targets, ApplyState state_op,
                                       ApplyAdjoint adjoint_op) {
    const auto& g = P.grid;
    const double dt = g.dt();
    OptimalityResidual R{Field(g), Field(g), Field(g), {}};
    std::vector<double> tmp(static_cast<std::size_t>(g.nodes()));
    const std::array<const Field*, 2> p{&p1, &p2};
    std::array<Field*, 2> Gi{&R.G1, &R.G2};
    for (int n = 1; n <= g.Nt; ++n) {
        state_op(n, y.level(n), std::span<double>(tmp));
        auto out = R.G.cell(n);
        auto fn = f.cell(n);
        for (int j = 1; j <= g.Nx; ++j) {
            const auto J = static_cast<std::size_t>(j);
            out[J] = (y(n, j) - y(n - 1, j)) / dt + tmp[J] - P.B[J] * fn[J];
            for (int i = 0; i < 2; ++i) out[J] += P.Bi[i][J] * p[i]->cell(n)[J] / P.followers[i].mu;
        }
        for (int i = 0; i < 2; ++i) {
            adjoint_op(n, y.level(n), p[i]->cell(n), std::span<double>(tmp));
            auto o = Gi[i]->cell(n);
            const auto& fo = P.followers[i];
            auto tgt = fo.target.cell(n);
            for (int j = 1; j <= g.Nx; ++j) {
                const auto J = static_cast<std::size_t>(j);
                const double pc = (*p[i])(n - 1, j), pn = (*p[i])(n, j);
                const double misfit = y(n, j) - (with_targets ? tgt[J] : 0.0);
                o[J] = (pc - pn) / dt + tmp[J] - fo.alpha * P.C[i][J] * misfit;
            }
        }
    }
    R.y0_out.assign(y.level(0).begin(), y.level(0).end());
    return R;
}

}  // namespace detail

/// Residual of the nonlinear optimality system (state with N, adjoints with
/// the Jacobian at y, follower targets included).
inline OptimalityResidual apply_optimality_residual(const Problem& P, const StateModel& sm, const Field& y,
                                                    const Field& p1, const Field& p2, const Field& f) {
    const double dx = P.grid.dx();
    return detail::optimality_residual(
        P, y, p1, p2, f, true, [&](int n, auto yn, std::span<double> out) { sm.residual(n, yn, out); },
        [&](int n, auto yn, auto pc, std::span<double> out) { sm.jacobian(n, yn).apply_transpose(pc, out, dx); });
}

/// Residual of the linear system at a fixed linearization, without targets;
/// sources are whatever this leaves behind.
inline OptimalityResidual apply_linear_optimality_residual(const Problem& P, const LinearizedOperator& op,
                                                           const Field& y, const Field& p1, const Field& p2,
                                                           const Field& f) {
    const double dx = P.grid.dx();
    return detail::optimality_residual(
        P, y, p1, p2, f, false, [&](int n, auto yn, std::span<double> out) { op.level(n).apply(yn, out, dx); },
        [&](int n, auto, auto pc, std::span<double> out) { op.level(n).apply_transpose(pc, out, dx); });
}

}  // namespace hiercontrol
