#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "errors.hpp"

namespace hiercontrol {

/// Tridiagonal matrix on m unknowns: row i is lo[i] x[i-1] + di[i] x[i] + up[i] x[i+1].
struct Tridiag {
    std::vector<double> lo, di, up;

    Tridiag() = default;
    explicit Tridiag(std::size_t m) : lo(m, 0.0), di(m, 0.0), up(m, 0.0) {}
    std::size_t size() const { return di.size(); }

    Tridiag transposed() const {
        Tridiag t(size());
        const std::size_t m = size();
        for (std::size_t i = 0; i < m; ++i) {
            t.di[i] = di[i];
            if (i > 0) t.lo[i] = up[i - 1];
            if (i + 1 < m) t.up[i] = lo[i + 1];
        }
        return t;
    }

    /// y = A x
    void apply(std::span<const double> x, std::span<double> y) const {
        const std::size_t m = size();
        for (std::size_t i = 0; i < m; ++i) {
            double s = di[i] * x[i];
            if (i > 0) s += lo[i] * x[i - 1];
            if (i + 1 < m) s += up[i] * x[i + 1];
            y[i] = s;
        }
    }
};

/// Thomas elimination, stored so repeated solves cost two sweeps.
class TridiagFactor {
public:
    TridiagFactor() = default;
    explicit TridiagFactor(const Tridiag& A) : lo_(A.lo), cp_(A.size()), inv_(A.size()) {
        const std::size_t m = A.size();
        double scale = 0.0;
        for (std::size_t i = 0; i < m; ++i) scale = std::max(scale, std::abs(A.di[i]));
        for (std::size_t i = 0; i < m; ++i) {
            const double piv = A.di[i] - (i > 0 ? A.lo[i] * cp_[i - 1] : 0.0);
            if (!(std::abs(piv) > 1e-14 * scale) || !std::isfinite(piv))
                throw singular_step("tridiagonal pivot underflow at row " + std::to_string(i));
            inv_[i] = 1.0 / piv;
            cp_[i] = (i + 1 < m ? A.up[i] : 0.0) * inv_[i];
        }
    }

    /// Solve in place: x holds the right-hand side on entry.
    void solve(std::span<double> x) const {
        const std::size_t m = inv_.size();
        if (m == 0) return;
        x[0] *= inv_[0];
        for (std::size_t i = 1; i < m; ++i) x[i] = (x[i] - lo_[i] * x[i - 1]) * inv_[i];
        for (std::size_t i = m - 1; i-- > 0;) x[i] -= cp_[i] * x[i + 1];
    }

private:
    std::vector<double> lo_, cp_, inv_;
};

}  // namespace hiercontrol
