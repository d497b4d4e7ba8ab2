#pragma once

// Finite-difference derivative references with a Richardson error bar.

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>

namespace oracle {

class NoisyEstimate : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct FdEstimate {
    double value = 0.0;      // Richardson extrapolation of D(h/2), D(h/4)
    double error_bar = 0.0;  // |D(h/2) - D(h/4)| / 3 plus a roundoff floor
    double coarse = 0.0, mid = 0.0, fine = 0.0;
};

/// Derivative of phi at 0 from central differences at h, h/2, h/4.
/// Central differences converge like h^2, so successive gaps should shrink
/// by 4; a fine-level gap more than 10x what that predicts means roundoff
/// dominates and NoisyEstimate is thrown. `scale` is the magnitude of phi
/// used for the roundoff floor.
inline FdEstimate fd_derivative(const std::function<double(double)>& phi, double h, double scale) {
    auto central = [&](double s) { return (phi(s) - phi(-s)) / (2 * s); };
    FdEstimate e;
    e.coarse = central(h);
    e.mid = central(h / 2);
    e.fine = central(h / 4);
    const double floor = 64 * std::numeric_limits<double>::epsilon() * std::max(scale, 1e-300) / (h / 4);
    const double gap1 = std::abs(e.coarse - e.mid), gap2 = std::abs(e.mid - e.fine);
    if (gap2 > floor && gap2 > 10 * (gap1 / 4) + floor) throw NoisyEstimate("finite differences dominated by roundoff");
    e.value = (4 * e.fine - e.mid) / 3;
    e.error_bar = gap2 / 3 + floor;
    return e;
}

/// Second derivative of phi at 0 from (phi(s) - 2 phi(0) + phi(-s)) / s^2 at
/// s = h, h/2 with the same Richardson step.
inline FdEstimate fd_second_derivative(const std::function<double(double)>& phi, double h, double scale) {
    const double p0 = phi(0.0);
    auto second = [&](double s) { return (phi(s) - 2 * p0 + phi(-s)) / (s * s); };
    FdEstimate e;
    e.coarse = second(h);
    e.mid = second(h / 2);
    e.fine = e.mid;
    const double floor = 64 * std::numeric_limits<double>::epsilon() * std::max(scale, 1e-300) / (h * h / 4);
    e.value = (4 * e.mid - e.coarse) / 3;
    e.error_bar = std::abs(e.coarse - e.mid) / 3 + floor;
    return e;
}

}  // namespace oracle
