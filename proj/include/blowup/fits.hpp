#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "blowup/errors.hpp"

namespace blowup {

/// Result of an ordinary least-squares line fit y = slope*x + intercept.
/// `rms` is the root-mean-square residual in y.
struct LineFit {
    double slope = 0.0;
    double intercept = 0.0;
    double rms = 0.0;
    std::size_t count = 0;
};

/// Least-squares straight line through (xs, ys).  Needs at least two
/// distinct abscissae.
inline LineFit fit_line(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size())
        throw parameter_error("fit_line: xs and ys have different lengths");
    if (xs.size() < 2)
        throw parameter_error("fit_line: need at least two points");
    const double n = static_cast<double>(xs.size());
    double sx = 0, sy = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sx += xs[i];
        sy += ys[i];
    }
    const double mx = sx / n, my = sy / n;
    double sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxx += (xs[i] - mx) * (xs[i] - mx);
        sxy += (xs[i] - mx) * (ys[i] - my);
    }
    if (sxx == 0.0)
        throw parameter_error("fit_line: abscissae are all equal");
    LineFit f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    f.count = xs.size();
    double ss = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double r = ys[i] - (f.slope * xs[i] + f.intercept);
        ss += r * r;
    }
    f.rms = std::sqrt(ss / n);
    return f;
}

/// Log-log power-law fit |y| ~ amp * x^slope, restricted to entries with
/// x in [xlo, xhi] and |y| > floor.  Used for tail/origin exponent
/// measurements, so it silently drops non-positive x and tiny |y|.
inline LineFit fit_powerlaw(const std::vector<double>& xs, const std::vector<double>& ys,
                            double xlo, double xhi, double floor = 0.0) {
    std::vector<double> lx, ly;
    lx.reserve(xs.size());
    ly.reserve(xs.size());
    for (std::size_t i = 0; i < xs.size() && i < ys.size(); ++i) {
        if (xs[i] < xlo || xs[i] > xhi || xs[i] <= 0.0)
            continue;
        const double a = std::abs(ys[i]);
        if (!(a > floor))
            continue;
        lx.push_back(std::log(xs[i]));
        ly.push_back(std::log(a));
    }
    if (lx.size() < 4)
        throw numerical_error("fit_powerlaw: fewer than 4 usable samples in window");
    return fit_line(lx, ly);
}

/// Convergence-order estimate from (h, err) pairs: slope of log err vs log h.
inline double fit_order(const std::vector<double>& hs, const std::vector<double>& errs) {
    std::vector<double> lx, ly;
    for (std::size_t i = 0; i < hs.size() && i < errs.size(); ++i) {
        if (hs[i] <= 0.0 || errs[i] <= 0.0)
            continue;
        lx.push_back(std::log(hs[i]));
        ly.push_back(std::log(errs[i]));
    }
    if (lx.size() < 2)
        throw numerical_error("fit_order: need at least two positive (h, err) pairs");
    return fit_line(lx, ly).slope;
}

} // namespace blowup
