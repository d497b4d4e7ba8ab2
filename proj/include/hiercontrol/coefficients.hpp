#pragma once

#include <array>
#include <cmath>
#include <random>
#include <string>

#include "errors.hpp"

namespace hiercontrol {

enum class Family { Constant, RationalDiffusion, SineNonlinearity, Linear };

inline const char* family_name(Family f) {
    switch (f) {
        case Family::Constant: return "constant";
        case Family::RationalDiffusion: return "bounded-rational-diffusion";
        case Family::SineNonlinearity: return "sine-nonlinearity";
        case Family::Linear: return "linear";
    }
    return "?";
}

inline Family parse_family(const std::string& s) {
    if (s == "constant") return Family::Constant;
    if (s == "bounded-rational-diffusion") return Family::RationalDiffusion;
    if (s == "sine-nonlinearity") return Family::SineNonlinearity;
    if (s == "linear") return Family::Linear;
    throw ConfigError("coefficients.family", "unknown family '" + s + "'");
}

/// Parameters of the built-in families. Unused entries are ignored.
///   constant:                   a = a_base, F = 0
///   linear:                     a = a_base, F = c1 y + c2 q
///   bounded-rational-diffusion: a = a_base + b (k s)^2 / (1 + (k s)^2), F = c1 y + c2 q
///   sine-nonlinearity:          a = a_base, F = gamma sin(y) + c2 q
struct CoefficientParams {
    double a_base = 1.0;
    double b = 0.5;
    double k = 1.0;
    double gamma = 1.0;
    double c1 = 0.0;
    double c2 = 0.0;
};

/// a and its s-derivatives at a point; the hot loops only need these.
struct DiffusionSample {
    double a, as, ass;
};

/// All partials of a(s,t,x) up to third order, index 0 = s, 1 = t, 2 = x.
struct DiffusionJet {
    double value = 0.0;
    std::array<double, 3> d1{};
    std::array<std::array<double, 3>, 3> d2{};
    std::array<std::array<std::array<double, 3>, 3>, 3> d3{};
};

/// F and its partials up to second order, index 0 = y, 1 = q.
struct NonlinearityJet {
    double value = 0.0;
    std::array<double, 2> d1{};
    std::array<std::array<double, 2>, 2> d2{};
};

/// Diffusion a(s,t,x) and nonlinearity F(y,q) from a built-in family.
/// Immutable; construction runs a derivative self-test.
class CoefficientModel {
public:
    CoefficientModel() : CoefficientModel(Family::Constant, CoefficientParams{}) {}

    CoefficientModel(Family fam, const CoefficientParams& p) : family_(fam), p_(p) {
        if (fam == Family::Constant) p_.c1 = p_.c2 = 0.0;
        for (double v : {p_.a_base, p_.b, p_.k, p_.gamma, p_.c1, p_.c2})
            if (!std::isfinite(v)) throw coefficient_rejected("non-finite coefficient parameter");
        if (fam == Family::RationalDiffusion) {
            a0_ = std::min(p_.a_base, p_.a_base + p_.b);
            a1_ = std::max(p_.a_base, p_.a_base + p_.b);
        } else {
            a0_ = a1_ = p_.a_base;
        }
        if (!(a0_ > 0.0)) throw coefficient_rejected("diffusion lower bound a0 must be positive");
        M_ = derivative_bound();
        self_test(1000, 20240607u);
    }

    Family family() const { return family_; }
    const CoefficientParams& params() const { return p_; }
    double a0() const { return a0_; }
    double a1() const { return a1_; }
    /// sup of sum |D a| + |D^2 a| + |D^3 a| over all index tuples.
    double M() const { return M_; }
    /// sup of the F partials used by the optimality system.
    double MF() const {
        double g = family_ == Family::SineNonlinearity ? std::abs(p_.gamma) : 0.0;
        return std::max({std::abs(p_.c1) + g, std::abs(p_.c2), g});
    }
    /// True if F is affine and a is constant: the system is already linear.
    bool is_linear() const { return family_ == Family::Constant || family_ == Family::Linear; }

    DiffusionSample a_sample(double s, double /*t*/, double /*x*/) const {
        if (family_ != Family::RationalDiffusion) return {p_.a_base, 0.0, 0.0};
        const double k = p_.k, r = k * s, u = 1.0 + r * r;
        return {p_.a_base + p_.b * r * r / u, p_.b * 2.0 * r / (u * u) * k,
                p_.b * (2.0 - 6.0 * r * r) / (u * u * u) * k * k};
    }

    double a(double s, double t, double x) const { return a_sample(s, t, x).a; }

    DiffusionJet a_jet(double s, double t, double x) const {
        DiffusionJet j;
        auto smp = a_sample(s, t, x);
        j.value = smp.a;
        j.d1[0] = smp.as;
        j.d2[0][0] = smp.ass;
        if (family_ == Family::RationalDiffusion) {
            const double k = p_.k, r = k * s, u = 1.0 + r * r;
            j.d3[0][0][0] = 24.0 * p_.b * r * (r * r - 1.0) / (u * u * u * u) * k * k * k;
        }
        return j;
    }

    double F(double y, double q) const {
        switch (family_) {
            case Family::SineNonlinearity: return p_.gamma * std::sin(y) + p_.c2 * q;
            default: return p_.c1 * y + p_.c2 * q;
        }
    }

    NonlinearityJet F_jet(double y, double q) const {
        NonlinearityJet j;
        j.value = F(y, q);
        if (family_ == Family::SineNonlinearity) {
            j.d1 = {p_.gamma * std::cos(y), p_.c2};
            j.d2[0][0] = -p_.gamma * std::sin(y);
        } else {
            j.d1 = {p_.c1, p_.c2};
        }
        return j;
    }

    /// Compare every supplied partial with a centered difference of the next
    /// lower order (step 1e-5 * scale), relative 1e-6, on `n` random points.
    void self_test(int n, unsigned seed) const {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> U(-1.0, 1.0);
        auto close = [](double exact, double fd) {
            return std::abs(exact - fd) <= 1e-6 * std::max({std::abs(exact), std::abs(fd), 1e-4});
        };
        // a depends on s through k s, so the s axis is compared in units of 1/k.
        const std::array<double, 3> sc{std::max(1.0, std::abs(p_.k)), 1.0, 1.0};
        for (int i = 0; i < n; ++i) {
            const std::array<double, 3> P{5.0 * U(rng), 0.5 + 0.5 * U(rng), 0.5 + 0.5 * U(rng)};
            const auto J = a_jet(P[0], P[1], P[2]);
            for (int d = 0; d < 3; ++d) {
                const double h = 1e-5 * std::max(1.0, std::abs(P[d]) * sc[d]) / sc[d];
                auto Pp = P, Pm = P;
                Pp[d] += h;
                Pm[d] -= h;
                const auto Jp = a_jet(Pp[0], Pp[1], Pp[2]);
                const auto Jm = a_jet(Pm[0], Pm[1], Pm[2]);
                const double u = sc[d];
                bool ok = close(J.d1[d] / u, (Jp.value - Jm.value) / (2 * h) / u);
                for (int e = 0; e < 3; ++e) {
                    const double ue = u * sc[e];
                    ok = ok && close(J.d2[e][d] / ue, (Jp.d1[e] - Jm.d1[e]) / (2 * h) / ue);
                    for (int f = 0; f < 3; ++f) {
                        const double uf = ue * sc[f];
                        ok = ok && close(J.d3[e][f][d] / uf, (Jp.d2[e][f] - Jm.d2[e][f]) / (2 * h) / uf);
                    }
                }
                if (!ok) throw coefficient_rejected("diffusion partials disagree with finite differences");
            }
            const std::array<double, 2> Y{5.0 * U(rng), 5.0 * U(rng)};
            const auto K = F_jet(Y[0], Y[1]);
            for (int d = 0; d < 2; ++d) {
                const double h = 1e-5 * std::max(1.0, std::abs(Y[d]));
                auto Yp = Y, Ym = Y;
                Yp[d] += h;
                Ym[d] -= h;
                const auto Kp = F_jet(Yp[0], Yp[1]);
                const auto Km = F_jet(Ym[0], Ym[1]);
                bool ok = close(K.d1[d], (Kp.value - Km.value) / (2 * h));
                for (int e = 0; e < 2; ++e) ok = ok && close(K.d2[e][d], (Kp.d1[e] - Km.d1[e]) / (2 * h));
                if (!ok) throw coefficient_rejected("nonlinearity partials disagree with finite differences");
            }
        }
    }

private:
    double derivative_bound() const {
        if (family_ != Family::RationalDiffusion || p_.b == 0.0) return 0.0;
        // Only s-dependence; scan r = k s densely where the derivatives live.
        double m = 0.0;
        const double k = std::abs(p_.k);
        for (int i = -40000; i <= 40000; ++i) {
            const double s = i * 1e-3 / std::max(k, 1e-12);
            const auto J = a_jet(s, 0.0, 0.0);
            m = std::max(m, std::abs(J.d1[0]) + std::abs(J.d2[0][0]) + std::abs(J.d3[0][0][0]));
        }
        return m * (1.0 + 1e-6);
    }

    Family family_;
    CoefficientParams p_;
    double a0_ = 1.0, a1_ = 1.0, M_ = 0.0;
};

}  // namespace hiercontrol
