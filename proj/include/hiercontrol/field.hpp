#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "grid.hpp"

namespace hiercontrol {

/// How the time levels of a field pair with the cells of the scheme.
///   Forward:  cell n (1..Nt) holds level n; level 0 is the initial value.
///             States y, z, h, gamma and all cell data (controls, sources).
///   Backward: cell n holds level n-1; level Nt is the terminal value.
///             Adjoints p, phi, u and the second-order eta.
enum class Staging { Forward, Backward };

/// Grid function on (Nx+2) x (Nt+1) nodes, stored level-major.
class Field {
public:
    Field() = default;
    Field(const SpaceTimeGrid& g, Staging st = Staging::Forward)
        : nx_(g.Nx), nt_(g.Nt), st_(st), v_(static_cast<std::size_t>((g.Nx + 2) * (g.Nt + 1)), 0.0) {}

    int Nx() const { return nx_; }
    int Nt() const { return nt_; }
    int nodes() const { return nx_ + 2; }
    Staging staging() const { return st_; }
    void set_staging(Staging s) { st_ = s; }

    std::span<double> level(int n) {
        return {v_.data() + static_cast<std::size_t>(n) * static_cast<std::size_t>(nodes()), static_cast<std::size_t>(nodes())};
    }
    std::span<const double> level(int n) const {
        return {v_.data() + static_cast<std::size_t>(n) * static_cast<std::size_t>(nodes()), static_cast<std::size_t>(nodes())};
    }
    /// Level paired with cell n under this field's staging.
    std::span<double> cell(int n) { return level(st_ == Staging::Forward ? n : n - 1); }
    std::span<const double> cell(int n) const { return level(st_ == Staging::Forward ? n : n - 1); }

    double& operator()(int n, int j) { return v_[static_cast<std::size_t>(n * nodes() + j)]; }
    double operator()(int n, int j) const { return v_[static_cast<std::size_t>(n * nodes() + j)]; }

    std::vector<double>& data() { return v_; }
    const std::vector<double>& data() const { return v_; }

    void fill(double x) { std::fill(v_.begin(), v_.end(), x); }

    Field& operator+=(const Field& o) {
        for (std::size_t i = 0; i < v_.size(); ++i) v_[i] += o.v_[i];
        return *this;
    }
    Field& operator-=(const Field& o) {
        for (std::size_t i = 0; i < v_.size(); ++i) v_[i] -= o.v_[i];
        return *this;
    }
    Field& operator*=(double a) {
        for (double& x : v_) x *= a;
        return *this;
    }
    /// this += a * o
    void axpy(double a, const Field& o) {
        for (std::size_t i = 0; i < v_.size(); ++i) v_[i] += a * o.v_[i];
    }
    /// Multiply every level by a node mask.
    void apply_mask(const Mask& m) {
        for (int n = 0; n <= nt_; ++n) {
            auto l = level(n);
            for (int j = 0; j < nodes(); ++j) l[static_cast<std::size_t>(j)] *= m[static_cast<std::size_t>(j)];
        }
    }

    bool boundary_zero() const {
        for (int n = 0; n <= nt_; ++n)
            if ((*this)(n, 0) != 0.0 || (*this)(n, nx_ + 1) != 0.0) return false;
        return true;
    }

    bool operator==(const Field& o) const = default;

private:
    int nx_ = 0, nt_ = 0;
    Staging st_ = Staging::Forward;
    std::vector<double> v_;
};

/// Spatial inner product dx * sum over interior nodes (the trapezoid rule
/// with zero boundary values).
inline double dot_x(std::span<const double> a, std::span<const double> b, double dx) {
    double s = 0.0;
    for (std::size_t j = 1; j + 1 < a.size(); ++j) s += a[j] * b[j];
    return s * dx;
}

inline double dot_x(std::span<const double> a, std::span<const double> b, const Mask& m, double dx) {
    double s = 0.0;
    for (std::size_t j = 1; j + 1 < a.size(); ++j) s += m[j] * a[j] * b[j];
    return s * dx;
}

inline double norm_x(std::span<const double> a, double dx) { return std::sqrt(dot_x(a, a, dx)); }

/// Space-time inner product over cells: dt * dx * sum_{n=1..Nt} sum_j,
/// pairing the cell values of both fields (their stagings may differ).
inline double dot_q(const Field& a, const Field& b, const SpaceTimeGrid& g) {
    double s = 0.0;
    for (int n = 1; n <= g.Nt; ++n) s += dot_x(a.cell(n), b.cell(n), g.dx());
    return s * g.dt();
}

inline double dot_q(const Field& a, const Field& b, const Mask& m, const SpaceTimeGrid& g) {
    double s = 0.0;
    for (int n = 1; n <= g.Nt; ++n) s += dot_x(a.cell(n), b.cell(n), m, g.dx());
    return s * g.dt();
}

inline double norm_q(const Field& a, const SpaceTimeGrid& g) { return std::sqrt(dot_q(a, a, g)); }
inline double norm_q(const Field& a, const Mask& m, const SpaceTimeGrid& g) { return std::sqrt(dot_q(a, a, m, g)); }

/// Discrete H1 norm of a slice: L2 part plus forward differences on all faces.
inline double norm_h1(std::span<const double> a, double dx) {
    double s = dot_x(a, a, dx);
    for (std::size_t j = 0; j + 1 < a.size(); ++j) {
        const double d = (a[j + 1] - a[j]) / dx;
        s += dx * d * d;
    }
    return std::sqrt(s);
}

/// Discrete H3 proxy: L2 of the slice and of its first, second and third
/// difference quotients, wherever the stencil fits inside the nodes.
inline double norm_h3_proxy(std::span<const double> a, double dx) {
    const std::size_t n = a.size();
    double s = dot_x(a, a, dx);
    for (std::size_t j = 0; j + 1 < n; ++j) {
        const double d = (a[j + 1] - a[j]) / dx;
        s += dx * d * d;
    }
    for (std::size_t j = 1; j + 1 < n; ++j) {
        const double d = (a[j + 1] - 2 * a[j] + a[j - 1]) / (dx * dx);
        s += dx * d * d;
    }
    for (std::size_t j = 1; j + 2 < n; ++j) {
        const double d = (a[j + 2] - 3 * a[j + 1] + 3 * a[j] - a[j - 1]) / (dx * dx * dx);
        s += dx * d * d;
    }
    return std::sqrt(s);
}

inline double max_abs(std::span<const double> a) {
    double m = 0.0;
    for (double x : a) m = std::max(m, std::abs(x));
    return m;
}

inline double max_abs(const Field& f) { return max_abs(std::span<const double>(f.data())); }

/// Mirror j -> Nx+1-j of every level.
inline Field mirrored(const Field& f) {
    Field r = f;
    for (int n = 0; n <= f.Nt(); ++n)
        for (int j = 0; j < f.nodes(); ++j) r(n, j) = f(n, f.nodes() - 1 - j);
    return r;
}

}  // namespace hiercontrol
