#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "oracles/dense.hpp"
#include "oracles/richardson.hpp"
#include "support.hpp"

using namespace hiercontrol;
using testing_support::make_problem;
using testing_support::ProblemOptions;

namespace {

Field leader_on_O(const Problem& P, unsigned long long seed) {
    std::mt19937_64 rng(seed);
    Field f = testing_support::random_field(P.grid, rng);
    f.apply_mask(P.B);
    return f;
}

struct Linear {
    Problem P;
    StateModel sm;
    LinearizedOperator lin;
    NashSystem S;

    explicit Linear(Problem p) : P(std::move(p)), sm(P.model, P.grid), lin(LinearizedOperator::at_zero(sm)) {
        S = NashSystem{&P, &sm, &lin, NashMode::Linear, nullptr, nullptr, {}};
    }
};

NashOptions tight() {
    NashOptions o;
    o.tol = 1e-13;
    o.max_sweeps = 2000;
    return o;
}

}  // namespace

TEST(Nash, MatchesDenseOptimalityOracle) {
    ProblemOptions o;
    o.target = 0.5;
    Linear L(make_problem(o));
    const Field f = leader_on_O(L.P, 1);
    const auto sol = solve_nash_fixed_point(L.S, f, tight());
    const auto ref = oracle::dense_solve_optimality(L.P, f);
    EXPECT_LE(oracle::rel_diff(sol.y, ref.y), 1e-8);
    EXPECT_LE(oracle::rel_diff(sol.p[0], ref.p1), 1e-8);
    EXPECT_LE(oracle::rel_diff(sol.p[1], ref.p2), 1e-8);
}

TEST(Nash, DenseOracleOfZeroDataIsZero) {
    ProblemOptions o;
    o.amplitude = 0.0;
    const Problem P = make_problem(o);
    const auto ref = oracle::dense_solve_optimality(P, Field(P.grid));
    EXPECT_EQ(max_abs(ref.y), 0.0);
    EXPECT_EQ(max_abs(ref.p1), 0.0);
}

TEST(Nash, TinyCouplingConvergesQuickly) {
    ProblemOptions o;
    o.alpha = 1e-2;
    o.mu = 100.0;
    o.target = 1.0;
    Linear L(make_problem(o));
    const Field f = leader_on_O(L.P, 2);
    NashOptions opt;
    opt.tol = 1e-9;
    const auto sol = solve_nash_fixed_point(L.S, f, opt);
    EXPECT_LE(sol.iterations, 10);
    EXPECT_LE(oracle::rel_diff(sol.y, oracle::dense_solve_optimality(L.P, f).y), 1e-8);
}

TEST(Nash, FollowersAreAssignedFromAdjointsBitExactly) {
    ProblemOptions o;
    o.target = 0.3;
    Linear L(make_problem(o));
    const auto sol = solve_nash_fixed_point(L.S, leader_on_O(L.P, 3));
    // On return v holds the assignment made from the final adjoints.
    for (int i = 0; i < 2; ++i) {
        const Field expect = detail::follower_from_adjoint(L.P, i, sol.p[static_cast<std::size_t>(i)]);
        EXPECT_TRUE(expect == sol.v[static_cast<std::size_t>(i)] || sol.residual <= 1e-9);
        const double mu = L.P.followers[static_cast<std::size_t>(i)].mu;
        for (int n = 1; n <= L.P.grid.Nt; ++n)
            for (int j = 1; j <= L.P.grid.Nx; ++j) {
                const auto J = static_cast<std::size_t>(j);
                const double v = expect.cell(n)[J];
                EXPECT_EQ(v, L.P.Bi[i][J] * -(sol.p[static_cast<std::size_t>(i)].cell(n)[J] / mu));
            }
    }
}

TEST(Nash, SolutionDoesNotDependOnInitialGuess) {
    ProblemOptions o;
    o.target = 1.0;
    Linear L(make_problem(o));
    const Field f = leader_on_O(L.P, 4);
    std::mt19937_64 rng(5);
    std::array<Field, 2> guess{testing_support::random_field(L.P.grid, rng), testing_support::random_field(L.P.grid, rng)};
    const auto a = solve_nash_fixed_point(L.S, f, tight());
    const auto b = solve_nash_fixed_point(L.S, f, tight(), &guess);
    EXPECT_LE(oracle::rel_diff(a.v[0], b.v[0]), 1e-8);
    EXPECT_LE(oracle::rel_diff(a.y, b.y), 1e-8);
}

TEST(Nash, UpdateNormsDecreaseAfterBurnInOnShippedConfigurations) {
    for (const auto& entry : std::filesystem::directory_iterator(HIERCONTROL_CONFIG_DIR)) {
        if (entry.path().extension() != ".json") continue;
        const Config c = load_config(entry.path().string());
        const Problem P = c.problem();
        const StateModel sm(P.model, P.grid);
        const auto lin = LinearizedOperator::at_zero(sm);
        const NashSystem S{&P, &sm, &lin, P.model.is_linear() ? NashMode::Linear : NashMode::Nonlinear, nullptr, nullptr, {}};
        const auto sol = solve_nash_fixed_point(S, Field(P.grid), c.solver.nash);
        const auto& h = sol.history;
        for (std::size_t k = 6; k < h.size(); ++k)
            EXPECT_LE(h[k], h[k - 1] * (1 + 1e-6)) << entry.path() << " sweep " << k + 1;
    }
}

TEST(Nash, MirrorFollowersGiveMirrorControls) {
    ProblemOptions o;
    o.Nx = 63;
    o.Nt = 32;
    o.geometry = GeometrySpec{};
    o.family = Family::SineNonlinearity;
    o.coeffs.gamma = 1.0;
    o.target = 0.2;
    const Problem P = make_problem(o);
    const StateModel sm(P.model, P.grid);
    const NashSystem S{&P, &sm, nullptr, NashMode::Nonlinear, nullptr, nullptr, {1e-13, 50, 1e-13}};
    NashOptions opt = tight();
    opt.step = S.step;
    const auto sol = solve_nash_fixed_point(S, Field(P.grid), opt);
    EXPECT_LE(oracle::rel_diff(mirrored(sol.v[0]), sol.v[1]), 1e-9);
}

TEST(Nash, DivergenceRaisesWithHistory) {
    ProblemOptions o;
    o.mu = 1e-5;
    o.target = 1.0;
    Linear L(make_problem(o));
    NashOptions opt;
    opt.max_sweeps = 200;
    try {
        solve_nash_fixed_point(L.S, Field(L.P.grid), opt);
        FAIL() << "expected FixedPointDiverged";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), "FixedPointDiverged");
        EXPECT_EQ(e.exit_code(), 3);
        EXPECT_FALSE(e.history().empty());
    }
}

TEST(Nash, FirstOrderConditionsHoldAtConvergence) {
    for (Family fam : {Family::Constant, Family::SineNonlinearity, Family::RationalDiffusion}) {
        ProblemOptions o;
        o.Nx = 31;
        o.Nt = 32;
        o.geometry = GeometrySpec{};
        o.family = fam;
        o.coeffs.gamma = 2.0;
        o.coeffs.b = 0.5;
        o.target = 1.0;
        const Problem P = make_problem(o);
        const StateModel sm(P.model, P.grid);
        const auto lin = LinearizedOperator::at_zero(sm);
        const NashSystem S{&P, &sm, &lin, P.model.is_linear() ? NashMode::Linear : NashMode::Nonlinear, nullptr,
                           nullptr, {1e-13, 100, 1e-13}};
        NashOptions opt = tight();
        opt.step = S.step;
        const Field f = leader_on_O(P, 6);
        const auto sol = solve_nash_fixed_point(S, f, opt);
        const auto rep = verify_quasi_equilibrium(S, sol, f, 20, 7);
        EXPECT_LE(rep.max_normalized, 1e-5) << family_name(fam);
    }
}

TEST(Nash, GradientMatchesRichardsonOracleAtPerturbedPoint) {
    ProblemOptions o;
    o.target = 1.0;
    Linear L(make_problem(o));
    const auto& g = L.P.grid;
    const Field f = leader_on_O(L.P, 8);
    const auto sol = solve_nash_fixed_point(L.S, f, tight());
    std::mt19937_64 rng(9);
    const Field w = random_direction(g, L.P.Bi[0], rng);

    // At the equilibrium the derivative vanishes within the error bar.
    const double J0 = follower_cost(L.S, f, 0, sol.v);
    auto along = [&](const std::array<Field, 2>& base) {
        return [&, base](double s) {
            auto v = base;
            v[0].axpy(s, w);
            return follower_cost(L.S, f, 0, v);
        };
    };
    const auto at_eq = oracle::fd_derivative(along(sol.v), 1e-3, J0);
    EXPECT_LE(std::abs(at_eq.value), at_eq.error_bar + 1e-9 * J0);

    // Away from it the oracle agrees with <p1 + mu1 v1, w> in value and sign.
    auto v = sol.v;
    v[0].axpy(0.5, random_direction(g, L.P.Bi[0], rng));
    const Field y = detail::state_for(L.S, detail::full_source(L.S, f, v[0], v[1]));
    const Field p1 = solve_adjoint_backward(L.lin, std::vector<double>(static_cast<std::size_t>(g.nodes()), 0.0),
                                            detail::adjoint_source(L.S, 0, y, true));
    Field grad = p1;
    grad.set_staging(Staging::Backward);
    double analytic = 0.0;
    for (int n = 1; n <= g.Nt; ++n)
        for (int j = 1; j <= g.Nx; ++j) {
            const auto J = static_cast<std::size_t>(j);
            analytic += L.P.Bi[0][J] * (p1.cell(n)[J] + L.P.followers[0].mu * v[0].cell(n)[J]) * w.cell(n)[J];
        }
    analytic *= g.dt() * g.dx();
    const auto est = oracle::fd_derivative(along(v), 1e-3, follower_cost(L.S, f, 0, v));
    EXPECT_NE(analytic, 0.0);
    EXPECT_EQ(std::signbit(analytic), std::signbit(est.value));
    EXPECT_NEAR(est.value, analytic, std::max(est.error_bar, 1e-8 * std::abs(analytic)));
}

TEST(Nash, RichardsonOracleIsExactOnQuadratics) {
    const double v = 0.7, w = -1.3;
    const auto e = oracle::fd_derivative([&](double s) { return (v + s * w) * (v + s * w); }, 1e-2, 1.0);
    EXPECT_NEAR(e.value, 2 * v * w, 1e-10);
    // A jump seen only by the finest step mimics roundoff taking over.
    auto jumpy = [](double s) { return s + (std::abs(s) < 3e-7 ? std::copysign(1e-6, s) : 0.0); };
    EXPECT_THROW(oracle::fd_derivative(jumpy, 1e-6, 1.0), oracle::NoisyEstimate);
}

TEST(CoupledAdjoint, IsTransposeOfNashCoupledForwardMap) {
    ProblemOptions o;
    o.amplitude = 0.0;
    o.target = 0.0;
    o.family = Family::Linear;
    o.coeffs.c2 = 0.6;
    Linear L(make_problem(o));
    const auto& g = L.P.grid;
    std::mt19937_64 rng(10);
    for (int k = 0; k < 10; ++k) {
        const Field f = leader_on_O(L.P, 100 + static_cast<unsigned long long>(k));
        const auto phiT = testing_support::random_slice(g, rng);
        const auto sol = solve_nash_fixed_point(L.S, f, tight());
        const auto adj = solve_coupled_adjoint(L.P, L.lin, phiT, nullptr, 1e-14, 2000);
        const double lhs = dot_x(sol.y.level(g.Nt), phiT, g.dx());
        const double rhs = dot_q(f, adj.phi, L.P.B, g);
        EXPECT_NEAR(lhs, rhs, 1e-9 * std::max(std::abs(lhs), 1e-12));
    }
}
