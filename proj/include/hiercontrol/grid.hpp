#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "errors.hpp"

namespace hiercontrol {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Uniform space-time grid on (0,L) x (0,T). Spatial nodes j = 0..Nx+1
/// (0 and Nx+1 are the Dirichlet boundary), time levels n = 0..Nt.
/// Cell n (n = 1..Nt) is the slab (t_{n-1}, t_n).
struct SpaceTimeGrid {
    double L = 1.0;
    double T = 1.0;
    int Nx = 64;
    int Nt = 64;

    SpaceTimeGrid() = default;
    SpaceTimeGrid(double L_, double T_, int Nx_, int Nt_) : L(L_), T(T_), Nx(Nx_), Nt(Nt_) { check(); }

    void check() const {
        if (!(L > 0.0) || !std::isfinite(L)) throw ConfigError("grid.L", "must be positive and finite");
        if (!(T > 0.0) || !std::isfinite(T)) throw ConfigError("grid.T", "must be positive and finite");
        if (Nx < 8) throw ConfigError("grid.Nx", "must be at least 8");
        if (Nt < 8) throw ConfigError("grid.Nt", "must be at least 8");
    }

    double dx() const { return L / (Nx + 1); }
    double dt() const { return T / Nt; }
    int nodes() const { return Nx + 2; }
    double x(int j) const { return j == Nx + 1 ? L : j * dx(); }
    double t(int n) const { return n == Nt ? T : n * dt(); }
    /// Midtime of cell n, i.e. t_{n-1/2}.
    double tmid(int n) const { return (n - 0.5) * dt(); }
    /// Face x_{j+1/2} between nodes j and j+1.
    double xface(int j) const { return (j + 0.5) * dx(); }
};

/// Node mask: 1.0 on selected nodes, 0.0 elsewhere. Stored as doubles so it
/// multiplies straight into fields.
using Mask = std::vector<double>;

inline bool mask_empty(const Mask& m) {
    return std::none_of(m.begin(), m.end(), [](double v) { return v != 0.0; });
}

inline int mask_count(const Mask& m) {
    return static_cast<int>(std::count_if(m.begin(), m.end(), [](double v) { return v != 0.0; }));
}

inline Mask mask_and(const Mask& a, const Mask& b) {
    Mask r(a.size());
    for (std::size_t j = 0; j < a.size(); ++j) r[j] = (a[j] != 0.0 && b[j] != 0.0) ? 1.0 : 0.0;
    return r;
}

inline Mask mask_andnot(const Mask& a, const Mask& b) {
    Mask r(a.size());
    for (std::size_t j = 0; j < a.size(); ++j) r[j] = (a[j] != 0.0 && b[j] == 0.0) ? 1.0 : 0.0;
    return r;
}

/// a subset of b, node-wise.
inline bool mask_subset(const Mask& a, const Mask& b) {
    for (std::size_t j = 0; j < a.size(); ++j)
        if (a[j] != 0.0 && b[j] == 0.0) return false;
    return true;
}

inline bool mask_disjoint(const Mask& a, const Mask& b) { return mask_empty(mask_and(a, b)); }

/// Open interval snapped to grid nodes. The indicator is sharp: nodes
/// strictly between the snapped endpoints.
class Interval {
public:
    Interval() = default;

    Interval(double lo, double hi, const SpaceTimeGrid& g, const std::string& name = "interval") {
        if (!(lo >= 0.0 && hi <= g.L && lo < hi))
            throw ConfigError(name, "need 0 <= lo < hi <= L");
        jlo_ = snap(lo, g);
        jhi_ = snap(hi, g);
        if (jlo_ >= jhi_) throw ConfigError(name, "interval collapses to a single node on this grid");
        dx_ = g.dx();
        L_ = g.L;
        n_ = g.nodes();
    }

    /// Directly from node indices (used for derived sets).
    static Interval from_nodes(int jlo, int jhi, const SpaceTimeGrid& g) {
        Interval r;
        r.jlo_ = std::max(0, jlo);
        r.jhi_ = std::min(g.Nx + 1, jhi);
        r.dx_ = g.dx();
        r.L_ = g.L;
        r.n_ = g.nodes();
        return r;
    }

    int jlo() const { return jlo_; }
    int jhi() const { return jhi_; }
    double lo() const { return jlo_ == n_ - 1 ? L_ : jlo_ * dx_; }
    double hi() const { return jhi_ == n_ - 1 ? L_ : jhi_ * dx_; }
    double length() const { return hi() - lo(); }
    double mid() const { return 0.5 * (lo() + hi()); }
    bool valid() const { return n_ > 0 && jlo_ < jhi_; }
    bool contains(int j) const { return jlo_ < j && j < jhi_; }

    Mask mask() const {
        Mask m(static_cast<std::size_t>(n_), 0.0);
        for (int j = jlo_ + 1; j < jhi_; ++j) m[static_cast<std::size_t>(j)] = 1.0;
        return m;
    }

    bool operator==(const Interval& o) const { return jlo_ == o.jlo_ && jhi_ == o.jhi_; }

    static int snap(double pos, const SpaceTimeGrid& g) {
        return static_cast<int>(std::floor(pos * (g.Nx + 1) / g.L + 0.5));
    }

private:
    int jlo_ = 0;
    int jhi_ = 0;
    double dx_ = 0.0;
    double L_ = 0.0;
    int n_ = 0;
};

}  // namespace hiercontrol
