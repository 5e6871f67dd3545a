#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <vector>

#include "blowup/errors.hpp"

namespace blowup {

/// Right-hand side signature for the adaptive integrator: f(t, y, dydt).
using OdeRhs = std::function<void(double, const std::vector<double>&, std::vector<double>&)>;

/// Options for the embedded Dormand-Prince 5(4) integrator.
struct OdeOptions {
    double rtol = 1e-10;
    double atol = 1e-12;
    double h_init = 0.0;      ///< 0 = pick automatically
    double h_min_factor = 1e-14; ///< minimum step as a fraction of |t1 - t0|
    std::size_t max_steps = 2'000'000;
};

namespace detail {

// Dormand-Prince RK5(4) tableau.
constexpr double dp_c[7] = {0.0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0};
constexpr double dp_a[7][6] = {
    {},
    {1.0 / 5},
    {3.0 / 40, 9.0 / 40},
    {44.0 / 45, -56.0 / 15, 32.0 / 9},
    {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729},
    {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656},
    {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84},
};
constexpr double dp_b5[7] = {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84, 0.0};
constexpr double dp_b4[7] = {5179.0 / 57600,  0.0,           7571.0 / 16695, 393.0 / 640,
                             -92097.0 / 339200, 187.0 / 2100, 1.0 / 40};

} // namespace detail

/// Advance y from t0 to exactly t1 with adaptive Dormand-Prince 5(4).
/// Modifies y in place.  An optional observer is called after every
/// accepted step as observer(t, y); returning false aborts integration
/// early (the state then holds the last accepted step).
/// Returns the time actually reached.
inline double ode_integrate(const OdeRhs& f, double t0, double t1, std::vector<double>& y,
                            const OdeOptions& opt = {},
                            const std::function<bool(double, const std::vector<double>&)>& observer = nullptr) {
    if (t1 == t0)
        return t0;
    const double dir = (t1 > t0) ? 1.0 : -1.0;
    const double span = std::abs(t1 - t0);
    const std::size_t n = y.size();

    std::vector<double> k[7];
    for (auto& ki : k)
        ki.assign(n, 0.0);
    std::vector<double> ytmp(n), y5(n), y4(n);

    double t = t0;
    double h = opt.h_init != 0.0 ? std::abs(opt.h_init) : span / 100.0;
    const double h_min = span * opt.h_min_factor;

    f(t, y, k[0]);
    bool fsal_valid = true;

    for (std::size_t step = 0; step < opt.max_steps; ++step) {
        if (dir * (t1 - t) <= 0.0)
            return t;
        h = std::min(h, std::abs(t1 - t));
        if (!fsal_valid)
            f(t, y, k[0]);

        for (int stage = 1; stage < 7; ++stage) {
            for (std::size_t i = 0; i < n; ++i) {
                double acc = 0.0;
                for (int j = 0; j < stage; ++j)
                    acc += detail::dp_a[stage][j] * k[j][i];
                ytmp[i] = y[i] + dir * h * acc;
            }
            f(t + dir * h * detail::dp_c[stage], ytmp, k[stage]);
        }
        double err = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double acc5 = 0.0, acc4 = 0.0;
            for (int j = 0; j < 7; ++j) {
                acc5 += detail::dp_b5[j] * k[j][i];
                acc4 += detail::dp_b4[j] * k[j][i];
            }
            y5[i] = y[i] + dir * h * acc5;
            y4[i] = y[i] + dir * h * acc4;
            const double sc = opt.atol + opt.rtol * std::max(std::abs(y[i]), std::abs(y5[i]));
            const double e = (y5[i] - y4[i]) / sc;
            err += e * e;
        }
        err = std::sqrt(err / static_cast<double>(n));
        // A trial step that overflowed the state produces a NaN estimate;
        // treat it as infinitely bad so the controller shrinks instead of
        // mistaking it for "no error" and growing the step.
        if (std::isnan(err))
            err = std::numeric_limits<double>::infinity();

        if (err <= 1.0 || (h <= h_min && std::isfinite(err))) {
            t += dir * h;
            y = y5;
            k[0] = k[6]; // FSAL: stage 7 was evaluated at (t_new, y_new)
            fsal_valid = true;
            if (observer && !observer(t, y))
                return t;
        } else {
            fsal_valid = true; // k[0] still matches (t, y); only h changed
        }
        const double fac = (err > 0.0) ? 0.9 * std::pow(err, -0.2) : 5.0;
        h *= std::clamp(fac, 0.2, 5.0);
        if (h < h_min)
            h = h_min;
    }
    throw numerical_error("ode_integrate: exceeded max_steps before reaching end time");
}

} // namespace blowup
