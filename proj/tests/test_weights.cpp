#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace hiercontrol;

namespace {

ControlGeometry geometry(const GeometrySpec& s, const SpaceTimeGrid& g) { return checked_geometry(s, g); }

GeometrySpec disjoint() {
    GeometrySpec s;
    s.O1d = {0.2, 0.5};
    s.O2d = {0.5, 0.8};
    return s;
}

GeometrySpec nested() {
    GeometrySpec s;
    s.O1d = {0.45, 0.55};
    s.O2d = {0.2, 0.8};
    return s;
}

}  // namespace

TEST(Eta, PositiveInsideZeroAtEndsMonotoneOutsideOmega) {
    const SpaceTimeGrid g(1.0, 1.0, 64, 16);
    for (const auto& spec : {GeometrySpec{}, disjoint(), nested()}) {
        const auto geo = geometry(spec, g);
        const auto etas = construct_eta(geo, g);
        ASSERT_EQ(etas.size(), geo.two_eta() ? 2u : 1u);
        for (const auto& e : etas) {
            EXPECT_EQ(e.value.front(), 0.0);
            EXPECT_EQ(e.value.back(), 0.0);
            for (int j = 1; j <= g.Nx; ++j) EXPECT_GT(e.value[static_cast<std::size_t>(j)], 0.0);
            for (int j = 0; j < g.nodes(); ++j)
                if (e.critical_set[static_cast<std::size_t>(j)] == 0.0)
                    EXPECT_GT(std::abs(e.deriv[static_cast<std::size_t>(j)]), 0.0) << "node " << j;
        }
    }
}

TEST(Eta, TwoFunctionsAgreeOutsideOTildeWithEqualSupNorms) {
    const SpaceTimeGrid g(1.0, 1.0, 64, 16);
    for (const auto& spec : {disjoint(), nested()}) {
        const auto geo = geometry(spec, g);
        const auto etas = construct_eta(geo, g);
        ASSERT_EQ(etas.size(), 2u);
        const Mask mt = geo.O_tilde.mask();
        for (int j = 0; j < g.nodes(); ++j)
            if (mt[static_cast<std::size_t>(j)] == 0.0)
                EXPECT_EQ(etas[0].value[static_cast<std::size_t>(j)], etas[1].value[static_cast<std::size_t>(j)]);
        EXPECT_LE(std::abs(etas[0].sup_norm - etas[1].sup_norm), 1e-12);
    }
}

TEST(Weights, SigmaDecreasesInEta) {
    const SpaceTimeGrid g(1.0, 1.0, 64, 32);
    const auto geo = geometry(GeometrySpec{}, g);
    const auto w = build_weights(construct_eta(geo, g), g, geo.case_tag);
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> J(1, g.Nx), N(1, g.Nt);
    const auto& eta = w.eta[0].value;
    for (int k = 0; k < 500; ++k) {
        const int a = J(rng), b = J(rng);
        const double t = g.tmid(N(rng));
        const auto A = static_cast<std::size_t>(a), B = static_cast<std::size_t>(b);
        if (std::abs(eta[A] - eta[B]) < 1e-10) continue;  // mirror nodes
        if (eta[A] < eta[B]) EXPECT_GT(w.sigma(0, a, t), w.sigma(0, b, t));
        if (eta[A] > eta[B]) EXPECT_LT(w.sigma(0, a, t), w.sigma(0, b, t));
    }
}

TEST(Weights, SymmetricGeometryGivesSymmetricWeights) {
    const SpaceTimeGrid g(1.0, 1.0, 63, 16);
    const auto geo = geometry(GeometrySpec{}, g);
    const auto w = build_weights(construct_eta(geo, g), g, geo.case_tag);
    const auto& e = w.eta[0].value;
    for (int j = 0; j < g.nodes(); ++j) {
        const int m = g.Nx + 1 - j;
        EXPECT_NEAR(e[static_cast<std::size_t>(j)], e[static_cast<std::size_t>(m)], 1e-12);
        for (int n = 1; n <= g.Nt; ++n) {
            const double t = g.tmid(n);
            const double a = w.sigma(0, j, t), b = w.sigma(0, m, t);
            EXPECT_LE(std::abs(a - b), 1e-12 * std::abs(a));
        }
    }
}

TEST(Weights, MidtimeValuesAreFinite) {
    const SpaceTimeGrid g(1.0, 1.0, 64, 64);
    for (const auto& spec : {GeometrySpec{}, disjoint(), nested()}) {
        const auto geo = geometry(spec, g);
        const auto w = build_weights(construct_eta(geo, g), g, geo.case_tag);
        for (int k = 0; k < w.eta_count(); ++k)
            for (int n = 1; n <= g.Nt; ++n)
                for (int j = 0; j < g.nodes(); ++j) {
                    const double t = g.tmid(n);
                    ASSERT_TRUE(std::isfinite(w.sigma(k, j, t)));
                    ASSERT_TRUE(std::isfinite(w.xi(k, j, t)));
                    ASSERT_TRUE(std::isfinite(w.sigma_bar(k, j, t)));
                }
        for (int n = 1; n <= g.Nt; ++n)
            for (Rho r : all_rhos) ASSERT_TRUE(std::isfinite(w.log_rho(r, g.tmid(n))));
    }
}

TEST(Weights, ReciprocalsVanishAtFinalTime) {
    const SpaceTimeGrid g(1.0, 1.0, 32, 32);
    const auto geo = geometry(GeometrySpec{}, g);
    const auto w = build_weights(construct_eta(geo, g), g, geo.case_tag);
    const auto lw = leader_weights(w);
    EXPECT_EQ(lw.W0[static_cast<std::size_t>(g.Nt)], 0.0);
    EXPECT_EQ(lw.W1[static_cast<std::size_t>(g.Nt)], 0.0);
    EXPECT_EQ(w.log_rho(Rho::rho0, g.T), kInf);
}

TEST(Weights, SandwichAndChainHoldOnShippedConfigurations) {
    int seen = 0;
    for (const auto& entry : std::filesystem::directory_iterator(HIERCONTROL_CONFIG_DIR)) {
        if (entry.path().extension() != ".json") continue;
        ++seen;
        const Config c = load_config(entry.path().string());
        const Problem P = c.problem();
        const auto w = c.weights(P);
        const auto d = weight_report(w);
        EXPECT_TRUE(d.ok()) << entry.path() << ": " << (d.violations.empty() ? "" : d.violations.front());
        EXPECT_FALSE(w.check_sandwich().has_value()) << entry.path();
        ASSERT_FALSE(d.chain.empty());
        for (const auto& ch : d.chain) EXPECT_TRUE(ch.finite()) << entry.path() << " " << ch.name;
        for (int k = 0; k < w.eta_count(); ++k)
            for (int n = 1; n <= P.grid.Nt; ++n)
                for (int j = 0; j < P.grid.nodes(); ++j) {
                    const double t = P.grid.tmid(n), sb = w.sigma_bar(k, j, t);
                    EXPECT_LE(w.sigma_hat(k, t), sb);
                    EXPECT_LT(sb, 1.25 * w.sigma_hat(k, t));
                    EXPECT_LT(0.8 * w.sigma_star(k, t), sb);
                    EXPECT_LE(sb, w.sigma_star(k, t));
                }
    }
    EXPECT_GE(seen, 5);
}

TEST(Weights, ExplicitLambdaTooSmallIsReported) {
    const SpaceTimeGrid g(1.0, 1.0, 64, 16);
    const auto geo = geometry(GeometrySpec{}, g);
    WeightOptions o;
    o.lambda = 1e-3;
    EXPECT_THROW(build_weights(construct_eta(geo, g), g, geo.case_tag, o), ValidationError);
    WeightOptions bad;
    bad.s = 0.1;
    EXPECT_THROW(build_weights(construct_eta(geo, g), g, geo.case_tag, bad), ConfigError);
}
