#pragma once

// Central finite-difference gradient checks shared by the unit tests and the acceptance suite.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

namespace matlift::test {

struct GradCheck {
    std::size_t checked = 0;
    std::size_t kinks = 0;       // entries skipped because the loss is not smooth within ±eps
    double worst = 0.0;          // largest relative error among checked entries
    std::string worst_label;

    bool ok(double tol, double max_kink_fraction = 0.05) const {
        return checked > 0 && worst <= tol && kinks <= max_kink_fraction * static_cast<double>(checked + kinks);
    }
};

/// Compares `analytic` with (f(x+eps) - f(x-eps)) / 2eps for one scalar parameter.
/// A kink (ReLU or clamp boundary inside the stencil) shows up as disagreement between
/// the eps and eps/2 stencils; such entries are counted but not compared.
inline void check_entry(GradCheck &gc, double &param, double analytic, const std::function<double()> &f, double eps,
                        double floor, const std::string &label) {
    const double x0 = param;
    auto stencil = [&](double h) {
        param = x0 + h;
        const double up = f();
        param = x0 - h;
        const double down = f();
        param = x0;
        return (up - down) / (2.0 * h);
    };
    const double fd = stencil(eps);
    const double fd_half = stencil(0.5 * eps);
    f(); // restore any cached state at x0
    const double scale = std::max({std::abs(fd), std::abs(analytic), floor});
    if (std::abs(fd - fd_half) / std::max({std::abs(fd), std::abs(fd_half), floor}) > 1e-4) {
        ++gc.kinks;
        return;
    }
    const double err = std::abs(fd - analytic) / scale;
    ++gc.checked;
    if (err > gc.worst) {
        gc.worst = err;
        gc.worst_label = label;
    }
}

} // namespace matlift::test
