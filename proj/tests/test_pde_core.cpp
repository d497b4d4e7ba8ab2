#include <random>

#include <gtest/gtest.h>

#include "oracles/dense.hpp"
#include "support.hpp"

using namespace hiercontrol;
using testing_support::make_problem;
using testing_support::ProblemOptions;
using testing_support::random_field;
using testing_support::random_slice;

namespace {

Problem linear_problem(int Nx, int Nt, double c1 = 0.7, double c2 = 0.9) {
    ProblemOptions o;
    o.Nx = Nx;
    o.Nt = Nt;
    o.family = Family::Linear;
    o.coeffs.c1 = c1;
    o.coeffs.c2 = c2;
    if (Nx >= 32) o.geometry = GeometrySpec{};
    return make_problem(o);
}

/// <y(T), phiT> - <y0, phi(0)> + ∬ y g = ∬ f phi for any linear operator.
double duality_gap(const LinearizedOperator& op, std::mt19937_64& rng) {
    const auto& g = op.grid();
    const auto y0 = random_slice(g, rng), phiT = random_slice(g, rng);
    const Field f = random_field(g, rng), src = random_field(g, rng);
    const Field y = solve_linearized_forward(op, y0, f);
    const Field phi = solve_adjoint_backward(op, phiT, src);
    const double lhs = dot_x(y.level(g.Nt), phiT, g.dx()) - dot_x(y0, phi.level(0), g.dx()) + dot_q(y, src, g);
    const double rhs = dot_q(f, phi, g);
    return std::abs(lhs - rhs) / std::max({std::abs(lhs), std::abs(rhs), 1e-300});
}

}  // namespace

TEST(Duality, LinearFamilyHoldsToRoundoff) {
    const Problem P = linear_problem(64, 64);
    const StateModel sm(P.model, P.grid);
    const auto op = LinearizedOperator::at_zero(sm);
    std::mt19937_64 rng(1);
    for (int k = 0; k < 100; ++k) EXPECT_LE(duality_gap(op, rng), 1e-10);
}

TEST(Duality, HoldsForLinearizationAlongANonlinearTrajectory) {
    ProblemOptions o;
    o.Nx = 32;
    o.Nt = 32;
    o.geometry = GeometrySpec{};
    o.family = Family::RationalDiffusion;
    o.coeffs.b = 0.8;
    o.coeffs.k = 3.0;
    o.amplitude = 2.0;
    const Problem P = make_problem(o);
    const StateModel sm(P.model, P.grid);
    const Field y = solve_forward(sm, P.y0, Field(P.grid));
    const LinearizedOperator op(sm, y);
    std::mt19937_64 rng(2);
    for (int k = 0; k < 20; ++k) EXPECT_LE(duality_gap(op, rng), 1e-10);
}

TEST(DenseOracle, SpatialMatrixMatchesMatrixFreeColumns) {
    const Problem P = linear_problem(16, 16);
    const StateModel sm(P.model, P.grid);
    const auto op = LinearizedOperator::at_zero(sm);
    const auto A = oracle::spatial_matrix(P);
    const int nx = P.grid.Nx;
    std::vector<double> e(static_cast<std::size_t>(nx + 2)), out(e.size()), outT(e.size());
    for (int c = 1; c <= nx; ++c) {
        std::fill(e.begin(), e.end(), 0.0);
        e[static_cast<std::size_t>(c)] = 1.0;
        op.level(3).apply(e, out, P.grid.dx());
        op.level(3).apply_transpose(e, outT, P.grid.dx());
        for (int r = 1; r <= nx; ++r) {
            const double scale = std::abs(A(r - 1, r - 1));
            EXPECT_NEAR(out[static_cast<std::size_t>(r)], A(r - 1, c - 1), 1e-12 * scale);
            EXPECT_NEAR(outT[static_cast<std::size_t>(r)], A(c - 1, r - 1), 1e-12 * scale);
        }
    }
}

TEST(DenseOracle, OptimalityMatrixMatchesMatrixFreeResidual) {
    ProblemOptions o;
    o.family = Family::Linear;
    o.coeffs.c1 = 0.3;
    o.coeffs.c2 = -0.4;
    o.amplitude = 0.0;
    const Problem P = make_problem(o);
    const StateModel sm(P.model, P.grid);
    const auto op = LinearizedOperator::at_zero(sm);
    const auto& g = P.grid;
    const Field zero(g);
    const auto S = oracle::assemble_optimality(P, zero);
    ASSERT_EQ(S.rhs.norm(), 0.0);
    const int nx = g.Nx, blk = nx * g.Nt;
    for (int col = 0; col < 3 * blk; ++col) {
        Field y(g), p1(g, Staging::Backward), p2(g, Staging::Backward);
        const int b = col / blk, r = col % blk, n = r / nx + 1, j = r % nx + 1;
        if (b == 0) y(n, j) = 1.0;
        if (b == 1) p1(n - 1, j) = 1.0;
        if (b == 2) p2(n - 1, j) = 1.0;
        const auto R = apply_linear_optimality_residual(P, op, y, p1, p2, zero);
        for (int m = 1; m <= g.Nt; ++m)
            for (int i = 1; i <= nx; ++i) {
                const int row = (m - 1) * nx + i - 1;
                const double scale = 1.0 + std::abs(S.K(row, row));
                ASSERT_NEAR(R.G.cell(m)[static_cast<std::size_t>(i)], S.K(row, col), 1e-12 * scale);
                ASSERT_NEAR(R.G1.cell(m)[static_cast<std::size_t>(i)], S.K(blk + row, col), 1e-12 * scale);
                ASSERT_NEAR(R.G2.cell(m)[static_cast<std::size_t>(i)], S.K(2 * blk + row, col), 1e-12 * scale);
            }
    }
}

TEST(DenseOracle, ForwardAndBackwardSolvesAgree) {
    const Problem P = linear_problem(16, 16);
    const StateModel sm(P.model, P.grid);
    const auto op = LinearizedOperator::at_zero(sm);
    std::mt19937_64 rng(4);
    const auto y0 = random_slice(P.grid, rng);
    const Field f = random_field(P.grid, rng);
    EXPECT_LE(oracle::rel_diff(solve_linearized_forward(op, y0, f), oracle::dense_forward(P, y0, f)), 1e-12);
    EXPECT_LE(oracle::rel_diff(solve_adjoint_backward(op, y0, f), oracle::dense_backward(P, y0, f)), 1e-12);
    // The semilinear solver on the linear family is the same scheme.
    EXPECT_LE(oracle::rel_diff(solve_forward(sm, y0, f, {1e-14, 50, 1e-14}), oracle::dense_forward(P, y0, f)), 1e-11);
}

TEST(Forward, DiscreteEigenmodeDecaysExactly) {
    const Problem P = linear_problem(63, 40, 0.0, 0.0);
    const auto& g = P.grid;
    const StateModel sm(P.model, g);
    const Field y = solve_forward(sm, P.y0, Field(g));
    const double lam = 4.0 / (g.dx() * g.dx()) * std::pow(std::sin(M_PI * g.dx() / 2), 2);
    double err = 0.0, ref = 0.0;
    for (int n = 0; n <= g.Nt; ++n) {
        const double amp = std::pow(1.0 + lam * g.dt(), -n);
        for (int j = 1; j <= g.Nx; ++j) {
            err = std::max(err, std::abs(y(n, j) - amp * P.y0[static_cast<std::size_t>(j)]));
            ref = std::max(ref, std::abs(amp * P.y0[static_cast<std::size_t>(j)]));
        }
    }
    EXPECT_LE(err / ref, 1e-12);
}

TEST(Forward, HeatMatchesSeparationOfVariablesOnShortHorizon) {
    // Implicit Euler carries a relative error of about pi^4 T^2 / (2 Nt) for
    // the first mode, so the 1e-3 comparison uses a short horizon.
    ProblemOptions o;
    o.Nx = 128;
    o.Nt = 128;
    o.T = 1e-3;
    o.geometry = GeometrySpec{};
    const Problem P = make_problem(o);
    const auto& g = P.grid;
    const Field y = solve_forward(StateModel(P.model, g), P.y0, Field(g));
    double num = 0.0, den = 0.0;
    for (int n = 1; n <= g.Nt; ++n)
        for (int j = 1; j <= g.Nx; ++j) {
            const double ex = std::exp(-M_PI * M_PI * g.t(n)) * std::sin(M_PI * g.x(j));
            num += (y(n, j) - ex) * (y(n, j) - ex);
            den += ex * ex;
        }
    EXPECT_LE(std::sqrt(num / den), 1e-3);
}

TEST(Forward, SelfConvergenceIsAtLeastFirstOrder) {
    auto terminal = [](int Nx, int Nt) {
        ProblemOptions o;
        o.Nx = Nx;
        o.Nt = Nt;
        o.family = Family::Linear;
        o.T = 0.1;
        o.coeffs.c1 = 1.0;
        o.coeffs.c2 = 0.5;
        const Problem P = make_problem(o);
        return std::make_pair(solve_forward(StateModel(P.model, P.grid), P.y0, Field(P.grid)), P.grid);
    };
    const auto [ref, gr] = terminal(255, 512);
    std::vector<double> errs;
    for (int k : {16, 32, 64}) {
        const auto [y, g] = terminal(k - 1, k);
        const int stride = 256 / k;
        double e = 0.0;
        for (int j = 1; j <= g.Nx; ++j) e = std::max(e, std::abs(y(g.Nt, j) - ref(gr.Nt, j * stride)));
        errs.push_back(e);
    }
    EXPECT_GE(errs[0] / errs[1], 1.8);
    EXPECT_GE(errs[1] / errs[2], 1.8);
}

TEST(Forward, NonlinearHalfStepDifferenceShrinksLikeDt) {
    auto run = [](int Nt) {
        ProblemOptions o;
        o.Nx = 31;
        o.Nt = Nt;
        o.T = 0.1;
        o.family = Family::SineNonlinearity;
        o.coeffs.gamma = 2.0;
        o.coeffs.c2 = 0.3;
        o.amplitude = 0.05;
        o.geometry = GeometrySpec{};
        const Problem P = make_problem(o);
        const Field y = solve_forward(StateModel(P.model, P.grid), P.y0, Field(P.grid), {1e-14, 50, 1e-14});
        return std::vector<double>(y.level(Nt).begin(), y.level(Nt).end());
    };
    const auto a = run(32), b = run(64), c = run(128);
    double d1 = 0.0, d2 = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        d1 = std::max(d1, std::abs(a[j] - b[j]));
        d2 = std::max(d2, std::abs(b[j] - c[j]));
    }
    EXPECT_GT(d1, 0.0);
    EXPECT_NEAR(d1 / d2, 2.0, 0.3);
}

TEST(Forward, ManufacturedSolutionIsRecovered) {
    for (Family fam : {Family::RationalDiffusion, Family::SineNonlinearity}) {
        ProblemOptions o;
        o.Nx = 31;
        o.Nt = 24;
        o.family = fam;
        o.coeffs.b = 0.6;
        o.coeffs.k = 2.0;
        o.coeffs.gamma = 3.0;
        o.coeffs.c2 = 0.4;
        o.geometry = GeometrySpec{};
        const Problem P = make_problem(o);
        const auto& g = P.grid;
        const StateModel sm(P.model, g);
        Field yms(g), rhs(g);
        for (int n = 0; n <= g.Nt; ++n)
            for (int j = 1; j <= g.Nx; ++j) yms(n, j) = (1 + g.t(n)) * std::sin(M_PI * g.x(j)) + 0.3 * std::sin(2 * M_PI * g.x(j));
        std::vector<double> tmp(static_cast<std::size_t>(g.nodes()));
        for (int n = 1; n <= g.Nt; ++n) {
            sm.residual(n, yms.level(n), tmp);
            for (int j = 1; j <= g.Nx; ++j)
                rhs(n, j) = (yms(n, j) - yms(n - 1, j)) / g.dt() + tmp[static_cast<std::size_t>(j)];
        }
        const Field y = solve_forward(sm, yms.level(0), rhs, {1e-12, 200, 1e-12});
        EXPECT_LE(oracle::rel_diff(y, yms), 1e-10) << family_name(fam);
    }
}

TEST(Forward, HeatSupNormIsNonIncreasing) {
    ProblemOptions o;
    o.Nx = 63;
    o.Nt = 64;
    o.geometry = GeometrySpec{};
    const Problem base = make_problem(o);
    std::mt19937_64 rng(8);
    const auto y0 = random_slice(base.grid, rng);
    const Field y = solve_forward(StateModel(base.model, base.grid), y0, Field(base.grid));
    for (int n = 1; n <= base.grid.Nt; ++n) EXPECT_LE(max_abs(y.level(n)), max_abs(y.level(n - 1)) * (1 + 1e-14));
}

TEST(Forward, ZeroDataGivesZeroBitExactly) {
    for (Family fam : {Family::Constant, Family::Linear, Family::RationalDiffusion, Family::SineNonlinearity}) {
        ProblemOptions o;
        o.family = fam;
        o.coeffs.c1 = 0.5;
        o.coeffs.c2 = 0.5;
        o.amplitude = 0.0;
        const Problem P = make_problem(o);
        const StateModel sm(P.model, P.grid);
        const Field zero(P.grid);
        EXPECT_TRUE(solve_forward(sm, P.y0, zero) == zero);
        const auto op = LinearizedOperator(sm, zero);
        EXPECT_TRUE(solve_linearized_forward(op, P.y0, zero) == zero);
        const Field zb(P.grid, Staging::Backward);
        EXPECT_TRUE(solve_adjoint_backward(op, P.y0, zero) == zb);
    }
}

TEST(Forward, BoundaryRowsStayZero) {
    ProblemOptions o;
    o.family = Family::SineNonlinearity;
    o.coeffs.gamma = 1.0;
    const Problem P = make_problem(o);
    std::mt19937_64 rng(9);
    const Field f = random_field(P.grid, rng);
    const Field y = solve_forward(StateModel(P.model, P.grid), P.y0, f);
    EXPECT_TRUE(y.boundary_zero());
    EXPECT_GE(norm_h1(y.level(3), P.grid.dx()), norm_x(y.level(3), P.grid.dx()));
    EXPECT_EQ(norm_x(Field(P.grid).level(2), P.grid.dx()), 0.0);
}
