#pragma once

#include <cmath>
#include <functional>
#include <vector>

namespace dwnas {

// Central-difference gradient harness, f64 only. `f` maps a flat parameter
// vector to a scalar; `analytic` is the gradient under test at `x`.
// Returns the max relative error with denominator max(|a|, |n|, 1).
inline double grad_check(const std::function<double(const std::vector<double>&)>& f,
                         std::vector<double> x, const std::vector<double>& analytic,
                         double h = 1e-6) {
    double worst = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        const double step = h * std::max(1.0, std::abs(orig));
        x[i] = orig + step;
        const double fp = f(x);
        x[i] = orig - step;
        const double fm = f(x);
        x[i] = orig;
        const double num = (fp - fm) / (2.0 * step);
        const double a = analytic[i];
        const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1.0});
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace dwnas
