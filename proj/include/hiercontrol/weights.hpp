#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "eta.hpp"

namespace hiercontrol {

/// Truncated time factor: T^2/4 on [0, T/2], t(T-t) after.
inline double ell(double t, double T) { return t <= 0.5 * T ? 0.25 * T * T : t * (T - t); }
inline double ell_dot(double t, double T) { return t <= 0.5 * T ? 0.0 : T - 2.0 * t; }

/// Members of the rho family, each of the form exp(a s beta*) (xi*)^p.
enum class Rho { rho, rho0, rho1, rho2, rho3, rho4, rho5 };
inline constexpr std::array<Rho, 7> all_rhos{Rho::rho, Rho::rho0, Rho::rho1, Rho::rho2, Rho::rho3, Rho::rho4, Rho::rho5};

inline const char* rho_name(Rho r) {
    constexpr std::array<const char*, 7> names{"rho", "rho0", "rho1", "rho2", "rho3", "rho4", "rho5"};
    return names[static_cast<std::size_t>(r)];
}

struct RhoExponents {
    double a, p;
};

inline RhoExponents rho_exponents(Rho r) {
    switch (r) {
        case Rho::rho: return {2.5, 1.5};
        case Rho::rho0: return {2.0, 0.0};
        case Rho::rho1: return {2.0, -2.0};
        case Rho::rho2: return {1.5, -3.0};
        case Rho::rho3: return {1.5, -8.0};
        case Rho::rho4: return {1.5, -9.0};
        case Rho::rho5: return {1.5, -10.0};
    }
    return {0.0, 0.0};
}

struct WeightOptions {
    double c_s = 1.0;
    std::optional<double> s;
    std::optional<double> lambda;
};

/// First node/time where the sigma-bar sandwich fails, if any.
struct SandwichFailure {
    int eta = 0, j = 0, n = 0;
    std::string what;
};

/// Carleman weights on the grid. Space and time separate: every weight is a
/// spatial numerator over t(T-t) (untruncated) or ell(t) (truncated), so
/// grids are produced on demand. The rho family overflows doubles at
/// realistic s, so it is kept as natural logarithms.
class CarlemanWeights {
public:
    SpaceTimeGrid grid;
    CaseTag tag = CaseTag::SameObservation;
    double s = 0.0, lambda = 0.0, s_min = 0.0;
    std::vector<EtaFunction> eta;
    std::vector<std::vector<double>> num_sigma, num_xi;
    std::vector<double> num_sigma_max, num_sigma_min, num_xi_max;

    CarlemanWeights() = default;

    CarlemanWeights(std::vector<EtaFunction> etas, const SpaceTimeGrid& g, double s_, double lambda_, CaseTag t,
                    double s_min_ = 0.0)
        : grid(g), tag(t), s(s_), lambda(lambda_), s_min(s_min_), eta(std::move(etas)) {
        for (const auto& e : eta) {
            std::vector<double> ns(e.value.size()), nx(e.value.size());
            const double top = std::exp(4 * lambda * e.sup_norm);
            for (std::size_t j = 0; j < e.value.size(); ++j) {
                nx[j] = std::exp(lambda * (2 * e.sup_norm + e.value[j]));
                ns[j] = top - nx[j];
            }
            num_sigma_max.push_back(*std::max_element(ns.begin(), ns.end()));
            num_sigma_min.push_back(*std::min_element(ns.begin(), ns.end()));
            num_xi_max.push_back(*std::max_element(nx.begin(), nx.end()));
            num_sigma.push_back(std::move(ns));
            num_xi.push_back(std::move(nx));
        }
    }

    int eta_count() const { return static_cast<int>(eta.size()); }

    double sigma(int k, int j, double t) const { return num_sigma[K(k)][J(j)] / (t * (grid.T - t)); }
    double xi(int k, int j, double t) const { return num_xi[K(k)][J(j)] / (t * (grid.T - t)); }
    double sigma_bar(int k, int j, double t) const { return num_sigma[K(k)][J(j)] / ell(t, grid.T); }
    double xi_bar(int k, int j, double t) const { return num_xi[K(k)][J(j)] / ell(t, grid.T); }
    double beta(int k, int j, double t) const { return 0.4 * sigma_bar(k, j, t); }

    double sigma_star(int k, double t) const { return num_sigma_max[K(k)] / ell(t, grid.T); }
    double sigma_hat(int k, double t) const { return num_sigma_min[K(k)] / ell(t, grid.T); }
    double xi_star(int k, double t) const { return num_xi_max[K(k)] / ell(t, grid.T); }
    double beta_star(int k, double t) const { return 0.4 * sigma_star(k, t); }
    double beta_hat(int k, double t) const { return 0.4 * sigma_hat(k, t); }

    /// The pair entering the rho family: (beta*, xi*) or (beta*_1, xi*_1).
    double sel_beta_star(double t) const { return beta_star(0, t); }
    double sel_xi_star(double t) const { return xi_star(0, t); }

    /// log rho_r(t); +inf at t >= T, so every reciprocal is exactly 0 there.
    double log_rho(Rho r, double t) const {
        if (t >= grid.T) return std::numeric_limits<double>::infinity();
        const auto e = rho_exponents(r);
        return e.a * s * sel_beta_star(t) + e.p * std::log(sel_xi_star(t));
    }

    /// d/dt log rho_r = -(ell'/ell) (a s beta* + p).
    double log_rho_dot(Rho r, double t) const {
        const auto e = rho_exponents(r);
        return -ell_dot(t, grid.T) / ell(t, grid.T) * (e.a * s * sel_beta_star(t) + e.p);
    }

    /// Node-wise check of sigma_hat <= sigma_bar < 5/4 sigma_hat and
    /// 4/5 sigma* < sigma_bar <= sigma* at every midtime.
    std::optional<SandwichFailure> check_sandwich() const {
        for (int k = 0; k < eta_count(); ++k)
            for (int n = 1; n <= grid.Nt; ++n) {
                const double t = grid.tmid(n);
                std::vector<double> sb(static_cast<std::size_t>(grid.nodes()));
                for (int j = 0; j < grid.nodes(); ++j) sb[J(j)] = sigma_bar(k, j, t);
                const double hi = *std::max_element(sb.begin(), sb.end());
                const double lo = *std::min_element(sb.begin(), sb.end());
                for (int j = 0; j < grid.nodes(); ++j) {
                    const double v = sb[J(j)];
                    if (!(lo <= v && v < 1.25 * lo)) return SandwichFailure{k, j, n, "sigma_bar >= 5/4 sigma_hat"};
                    if (!(0.8 * hi < v && v <= hi)) return SandwichFailure{k, j, n, "sigma_bar <= 4/5 sigma_star"};
                }
            }
        return std::nullopt;
    }

private:
    static std::size_t K(int k) { return static_cast<std::size_t>(k); }
    static std::size_t J(int j) { return static_cast<std::size_t>(j); }
};

inline std::string describe(const SandwichFailure& f) {
    return "eta " + std::to_string(f.eta) + ", node " + std::to_string(f.j) + ", cell " + std::to_string(f.n) + ": " +
           f.what;
}

/// Build weights; lambda defaults to 2/||eta|| doubled until the sandwich
/// holds, s defaults to c_s (T + T^2).
inline CarlemanWeights build_weights(const std::vector<EtaFunction>& eta, const SpaceTimeGrid& g, CaseTag tag,
                                     const WeightOptions& opt = {}) {
    if (eta.empty()) throw construction_failed("no auxiliary function");
    if (!(opt.c_s > 0.0)) throw ConfigError("solver.c_s", "must be positive");
    const double s_min = opt.c_s * (g.T + g.T * g.T);
    const double s = opt.s.value_or(s_min);
    if (!(s >= s_min) || !std::isfinite(s)) throw ConfigError("solver.s", "must be at least c_s (T + T^2)");
    if (opt.lambda) {
        if (!(*opt.lambda > 0.0)) throw ConfigError("solver.lambda", "must be positive");
        CarlemanWeights w(eta, g, s, *opt.lambda, tag, s_min);
        if (auto f = w.check_sandwich()) throw weight_inequality_violated(describe(*f));
        return w;
    }
    double sup = 0.0;
    for (const auto& e : eta) sup = std::max(sup, e.sup_norm);
    double lambda = 2.0 / sup;
    for (int k = 0; k < 40; ++k, lambda *= 2.0) {
        CarlemanWeights w(eta, g, s, lambda, tag, s_min);
        if (!w.check_sandwich()) return w;
    }
    throw weight_inequality_violated("no lambda up to 2^40 / ||eta|| satisfies the sandwich");
}

/// Reciprocal weights per cell for the leader, sampled at the node time t_n
/// closing cell n (so the last cell sits at T and gets exactly 0). W0 and W1
/// share one normalization exp(2 min log rho0), which keeps W1/W0 exact.
struct LeaderWeights {
    std::vector<double> W0, W1;   // rho0^{-2}, rho1^{-2} up to the common factor; index 1..Nt
    std::vector<double> hum;      // rho1^{-2} normalized by its own minimum; index 1..Nt
    double log_norm = 0.0;        // the common factor, natural log
    double log_norm_hum = 0.0;
    int active_cells = 0;
};

inline LeaderWeights leader_weights(const CarlemanWeights& w) {
    const auto& g = w.grid;
    const auto N = static_cast<std::size_t>(g.Nt + 1);
    LeaderWeights lw;
    lw.W0.assign(N, 0.0);
    lw.W1.assign(N, 0.0);
    lw.hum.assign(N, 0.0);
    double m0 = kInf, m1 = kInf;
    for (int n = 1; n <= g.Nt; ++n) {
        m0 = std::min(m0, w.log_rho(Rho::rho0, g.t(n)));
        m1 = std::min(m1, w.log_rho(Rho::rho1, g.t(n)));
    }
    lw.log_norm = 2 * m0;
    lw.log_norm_hum = 2 * m1;
    auto flush = [](double v) { return v < 1e-300 ? 0.0 : v; };
    for (int n = 1; n <= g.Nt; ++n) {
        const auto I = static_cast<std::size_t>(n);
        const double t = g.t(n);
        lw.W0[I] = flush(std::exp(-2 * (w.log_rho(Rho::rho0, t) - m0)));
        lw.W1[I] = flush(std::exp(-2 * (w.log_rho(Rho::rho1, t) - m0)));
        lw.hum[I] = flush(std::exp(-2 * (w.log_rho(Rho::rho1, t) - m1)));
        if (lw.W0[I] > 0.0) ++lw.active_cells;
    }
    return lw;
}

struct RatioRange {
    double min = kInf, max = -kInf;
    void add(double v) {
        min = std::min(min, v);
        max = std::max(max, v);
    }
};

struct ChainConstant {
    std::string name;
    double log_C = -kInf;  // sup over midtimes of the log ratio
    double C() const { return std::exp(log_C); }
    bool finite() const { return std::isfinite(log_C) || log_C == -kInf; }
};

struct WeightDiagnostics {
    double s = 0.0, lambda = 0.0;
    std::vector<RatioRange> sigma_over_hat, sigma_over_star;  // per eta
    std::vector<ChainConstant> chain;
    std::vector<std::string> violations;
    /// rho0^{-1} at the last midtime, unnormalized.
    double rho0_inv_last = 0.0;
    /// min over midtimes of xi*, for the rho1 <= C rho0 constant.
    double xi_star_min = kInf;

    const ChainConstant* find(const std::string& n) const {
        for (const auto& c : chain)
            if (c.name == n) return &c;
        return nullptr;
    }
    bool ok() const { return violations.empty(); }
};

inline WeightDiagnostics weight_report(const CarlemanWeights& w) {
    const auto& g = w.grid;
    WeightDiagnostics d;
    d.s = w.s;
    d.lambda = w.lambda;
    for (int k = 0; k < w.eta_count(); ++k) {
        RatioRange a, b;
        for (int n = 1; n <= g.Nt; ++n) {
            const double t = g.tmid(n);
            for (int j = 0; j < g.nodes(); ++j) {
                const double sb = w.sigma_bar(k, j, t);
                a.add(sb / w.sigma_hat(k, t));
                b.add(sb / w.sigma_star(k, t));
            }
        }
        if (!(a.min >= 1.0 && a.max < 1.25))
            d.violations.push_back("sigma_bar/sigma_hat outside [1, 5/4) for eta " + std::to_string(k));
        if (!(b.min > 0.8 && b.max <= 1.0))
            d.violations.push_back("sigma_bar/sigma_star outside (4/5, 1] for eta " + std::to_string(k));
        d.sigma_over_hat.push_back(a);
        d.sigma_over_star.push_back(b);
    }

    auto sup_over_midtimes = [&](const std::string& name, auto logratio) {
        ChainConstant c{name};
        for (int n = 1; n <= g.Nt; ++n) c.log_C = std::max(c.log_C, logratio(g.tmid(n)));
        if (!c.finite()) d.violations.push_back("chain constant " + name + " is not finite");
        d.chain.push_back(c);
    };
    auto lr = [&](Rho r, double t) { return w.log_rho(r, t); };
    constexpr std::array<Rho, 6> ladder{Rho::rho0, Rho::rho1, Rho::rho2, Rho::rho3, Rho::rho4, Rho::rho5};
    for (std::size_t i = 1; i < ladder.size(); ++i) {
        const Rho hi = ladder[i], lo = ladder[i - 1];
        sup_over_midtimes(std::string(rho_name(hi)) + " <= C " + rho_name(lo),
                          [&](double t) { return lr(hi, t) - lr(lo, t); });
    }
    sup_over_midtimes("rho0 <= C rho", [&](double t) { return lr(Rho::rho0, t) - lr(Rho::rho, t); });
    sup_over_midtimes("rho <= C rho5^2", [&](double t) { return lr(Rho::rho, t) - 2 * lr(Rho::rho5, t); });
    for (std::size_t i = 2; i < ladder.size(); ++i) {
        const Rho cur = ladder[i], prev = ladder[i - 1];
        sup_over_midtimes(std::string("|") + rho_name(cur) + " d/dt " + rho_name(cur) + "| <= C " + rho_name(prev) + "^2",
                          [&](double t) {
                              const double dl = std::abs(w.log_rho_dot(cur, t));
                              if (dl == 0.0) return -kInf;
                              return 2 * lr(cur, t) + std::log(dl) - 2 * lr(prev, t);
                          });
    }
    for (int n = 1; n <= g.Nt; ++n) d.xi_star_min = std::min(d.xi_star_min, w.sel_xi_star(g.tmid(n)));
    d.rho0_inv_last = std::exp(-lr(Rho::rho0, g.tmid(g.Nt)));
    return d;
}

}  // namespace hiercontrol
