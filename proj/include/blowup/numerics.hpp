#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "blowup/errors.hpp"
#include "blowup/fits.hpp"

namespace blowup {

// ---------------------------------------------------------------------------
// Smoothstep cutoffs
// ---------------------------------------------------------------------------

namespace detail {
inline double binom(int a, int b) {
    double r = 1.0;
    for (int i = 1; i <= b; ++i)
        r *= static_cast<double>(a - b + i) / static_cast<double>(i);
    return r;
}
} // namespace detail

/// C^N smoothstep polynomial S_N on [0,1]: S_N(0)=0, S_N(1)=1, with N
/// vanishing derivatives at both ends.  S_1 is the classic 3u^2 - 2u^3.
/// Evaluated in Bernstein form (a partial binomial sum with all-positive
/// terms), which is stable where the textbook alternating sum is not:
///   S_N(u) = sum_{k=N+1}^{2N+1} C(2N+1,k) u^k (1-u)^{2N+1-k}.
inline double smoothstep(double u, int N = 7) {
    if (u <= 0.0)
        return 0.0;
    if (u >= 1.0)
        return 1.0;
    const double v = 1.0 - u;
    double acc = 0.0;
    for (int k = N + 1; k <= 2 * N + 1; ++k)
        acc += detail::binom(2 * N + 1, k) * std::pow(u, k) * std::pow(v, 2 * N + 1 - k);
    return acc;
}

/// Derivative dS_N/du: a single positive term,
///   S_N'(u) = (2N+1) C(2N,N) (u(1-u))^N.
inline double smoothstep_prime(double u, int N = 7) {
    if (u <= 0.0 || u >= 1.0)
        return 0.0;
    return (2.0 * N + 1.0) * detail::binom(2 * N, N) * std::pow(u * (1.0 - u), N);
}

/// Radial cutoff profile chi(t): 1 for t <= 1, 0 for t >= 2, C^N in between.
/// Callers evaluate it at t = y / M to cut off at scale M.
inline double cutoff_value(double t, int N = 7) {
    if (t <= 1.0)
        return 1.0;
    if (t >= 2.0)
        return 0.0;
    return 1.0 - smoothstep(t - 1.0, N);
}

/// d/dt of cutoff_value.
inline double cutoff_derivative(double t, int N = 7) {
    if (t <= 1.0 || t >= 2.0)
        return 0.0;
    return -smoothstep_prime(t - 1.0, N);
}

// ---------------------------------------------------------------------------
// RadialGrid
// ---------------------------------------------------------------------------

/// Log-uniform radial grid on [y_min, y_max] for a fixed ambient dimension d.
/// Nodes are y_i = y_min * rho^i, i.e. uniform in x = log y with spacing h.
/// Quadrature weights w_i realise  ∫ f y^{d-1} dy = ∫ f y^d dx  with
/// Gregory-corrected trapezoid ends (order 4 by default, 6 on request).
struct RadialGrid {
    int d = 7;
    std::size_t n = 0;
    double y_min = 0.0;
    double y_max = 0.0;
    double h = 0.0;            ///< spacing in x = log y
    int stencil_order = 4;     ///< finite-difference order (2 or 4)
    int quad_order = 4;        ///< Gregory correction order (4 or 6)
    std::vector<double> y;     ///< node positions
    std::vector<double> w;     ///< quadrature weights for measure y^{d-1} dy

    double x0() const { return std::log(y_min); }
};

using GridPtr = std::shared_ptr<const RadialGrid>;

/// Build a log-uniform radial grid.  Throws parameter_error on out-of-range
/// inputs (d < 7, y_min not in (0,1), y_max <= 1, n too small).
inline GridPtr make_grid(int d, double y_min, double y_max, std::size_t n,
                         int stencil_order = 4, int quad_order = 4) {
    if (d < 7)
        throw parameter_error("make_grid: dimension must be >= 7, got " + std::to_string(d));
    if (!(y_min > 0.0) || !(y_min < 1.0))
        throw parameter_error("make_grid: y_min must lie in (0, 1)");
    if (!(y_max > 1.0) || !(y_max > y_min))
        throw parameter_error("make_grid: y_max must exceed 1 and y_min");
    if (n < 16)
        throw parameter_error("make_grid: need at least 16 nodes");
    if (stencil_order != 2 && stencil_order != 4)
        throw parameter_error("make_grid: stencil_order must be 2 or 4");
    if (quad_order != 4 && quad_order != 6)
        throw parameter_error("make_grid: quad_order must be 4 or 6");

    auto g = std::make_shared<RadialGrid>();
    g->d = d;
    g->n = n;
    g->y_min = y_min;
    g->y_max = y_max;
    g->stencil_order = stencil_order;
    g->quad_order = quad_order;
    g->h = std::log(y_max / y_min) / static_cast<double>(n - 1);
    g->y.resize(n);
    const double x0 = std::log(y_min);
    for (std::size_t i = 0; i < n; ++i)
        g->y[i] = std::exp(x0 + g->h * static_cast<double>(i));
    g->y.front() = y_min;
    g->y.back() = y_max;

    // Gregory end-corrected trapezoid weights in x.
    std::vector<double> gg(n, 1.0);
    if (quad_order == 4) {
        const double e[3] = {3.0 / 8.0, 7.0 / 6.0, 23.0 / 24.0};
        for (int j = 0; j < 3; ++j) {
            gg[j] = e[j];
            gg[n - 1 - j] = e[j];
        }
    } else {
        const double e[5] = {95.0 / 288.0, 317.0 / 240.0, 23.0 / 30.0, 793.0 / 720.0, 157.0 / 160.0};
        for (int j = 0; j < 5; ++j) {
            gg[j] = e[j];
            gg[n - 1 - j] = e[j];
        }
    }
    g->w.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        g->w[i] = g->h * gg[i] * std::pow(g->y[i], d);
    return g;
}

// ---------------------------------------------------------------------------
// GridFunction
// ---------------------------------------------------------------------------

/// A scalar field sampled on a RadialGrid, together with the metadata the
/// stencils and quadratures need to close the ends:
///   * origin_exponent p:  f ~ c y^p as y -> 0 (leading power, integer);
///   * tail_exponent q:    f ~ c y^q as y -> infinity, when known.
/// The metadata drives ghost-node extrapolation and the sub-y_min quadrature
/// cell; it never changes the stored values.
struct GridFunction {
    GridPtr grid;
    std::vector<double> v;
    int origin_exponent = 1;
    std::optional<double> tail_exponent;

    GridFunction() = default;
    explicit GridFunction(GridPtr g, double fill = 0.0, int p = 1,
                          std::optional<double> q = std::nullopt)
        : grid(std::move(g)), v(grid->n, fill), origin_exponent(p), tail_exponent(q) {}

    std::size_t size() const { return v.size(); }
    double operator[](std::size_t i) const { return v[i]; }
    double& operator[](std::size_t i) { return v[i]; }
};

inline void require_same_grid(const GridFunction& f, const GridFunction& g, const char* who) {
    if (!f.grid || !g.grid || f.grid.get() != g.grid.get())
        throw parameter_error(std::string(who) + ": operands live on different grids");
}

/// Sample a callable on the grid.
inline GridFunction sample(GridPtr grid, const std::function<double(double)>& f, int p = 1,
                           std::optional<double> q = std::nullopt) {
    GridFunction out(std::move(grid), 0.0, p, q);
    for (std::size_t i = 0; i < out.size(); ++i)
        out.v[i] = f(out.grid->y[i]);
    return out;
}

// -- arithmetic (value semantics; metadata combined conservatively) ---------

inline GridFunction operator+(const GridFunction& f, const GridFunction& g) {
    require_same_grid(f, g, "operator+");
    GridFunction out = f;
    for (std::size_t i = 0; i < out.size(); ++i)
        out.v[i] += g.v[i];
    out.origin_exponent = std::min(f.origin_exponent, g.origin_exponent);
    if (f.tail_exponent && g.tail_exponent)
        out.tail_exponent = std::max(*f.tail_exponent, *g.tail_exponent);
    else
        out.tail_exponent.reset();
    return out;
}

inline GridFunction operator-(const GridFunction& f, const GridFunction& g) {
    require_same_grid(f, g, "operator-");
    GridFunction out = f;
    for (std::size_t i = 0; i < out.size(); ++i)
        out.v[i] -= g.v[i];
    out.origin_exponent = std::min(f.origin_exponent, g.origin_exponent);
    if (f.tail_exponent && g.tail_exponent)
        out.tail_exponent = std::max(*f.tail_exponent, *g.tail_exponent);
    else
        out.tail_exponent.reset();
    return out;
}

inline GridFunction operator*(const GridFunction& f, const GridFunction& g) {
    require_same_grid(f, g, "operator*");
    GridFunction out = f;
    for (std::size_t i = 0; i < out.size(); ++i)
        out.v[i] *= g.v[i];
    out.origin_exponent = f.origin_exponent + g.origin_exponent;
    if (f.tail_exponent && g.tail_exponent)
        out.tail_exponent = *f.tail_exponent + *g.tail_exponent;
    else
        out.tail_exponent.reset();
    return out;
}

inline GridFunction operator*(double a, const GridFunction& f) {
    GridFunction out = f;
    for (double& x : out.v)
        x *= a;
    return out;
}

inline GridFunction operator*(const GridFunction& f, double a) { return a * f; }

inline GridFunction operator-(const GridFunction& f) { return -1.0 * f; }

inline double norm_inf(const GridFunction& f) {
    double m = 0.0;
    for (double x : f.v)
        m = std::max(m, std::abs(x));
    return m;
}

// ---------------------------------------------------------------------------
// Quadrature
// ---------------------------------------------------------------------------

namespace detail {

/// Closure of ∫_0^{y_min} f y^{d-1} dy assuming f ~ f(y_min) (y/y_min)^p.
inline double origin_cell(const RadialGrid& g, double f0, int p) {
    const double denom = static_cast<double>(p + g.d);
    if (denom <= 0.0)
        throw numerical_error("origin_cell: non-integrable origin exponent p + d <= 0");
    return f0 * std::pow(g.y_min, g.d) / denom;
}

} // namespace detail

/// ∫_0^{y_max} f y^{d-1} dy.  The sub-y_min cell is closed with the field's
/// origin exponent.  Accumulation runs in extended precision: several
/// downstream functionals (orthogonality residuals against localized
/// directions) are tiny survivors of much larger positive and negative
/// contributions, and a plain double sum floors them three digits too high.
inline double integral(const GridFunction& f) {
    const RadialGrid& g = *f.grid;
    long double acc = 0.0L;
    for (std::size_t i = 0; i < g.n; ++i)
        acc += static_cast<long double>(g.w[i]) * static_cast<long double>(f.v[i]);
    return static_cast<double>(acc) + detail::origin_cell(g, f.v[0], f.origin_exponent);
}

/// L^2(y^{d-1} dy) pairing <f, g> over [0, y_max].
inline double inner_product(const GridFunction& f, const GridFunction& g) {
    require_same_grid(f, g, "inner_product");
    const RadialGrid& gr = *f.grid;
    long double acc = 0.0L;
    for (std::size_t i = 0; i < gr.n; ++i)
        acc += static_cast<long double>(gr.w[i]) * static_cast<long double>(f.v[i]) *
               static_cast<long double>(g.v[i]);
    return static_cast<double>(acc) + detail::origin_cell(gr, f.v[0] * g.v[0],
                                                          f.origin_exponent + g.origin_exponent);
}

/// ∫ f y^{d-1} dy restricted to y in [ylo, yhi]: trapezoid in x on interior
/// nodes plus linearly interpolated slivers to the exact window edges.
/// When ylo <= y_min the sub-y_min cell is closed with the origin exponent.
inline double window_integral(const GridFunction& f, double ylo, double yhi) {
    const RadialGrid& g = *f.grid;
    ylo = std::max(ylo, 0.0);
    yhi = std::min(yhi, g.y_max);
    if (!(yhi > ylo))
        return 0.0;
    std::size_t i0 = g.n, i1 = 0;
    for (std::size_t i = 0; i < g.n; ++i) {
        if (g.y[i] >= ylo && g.y[i] <= yhi) {
            i0 = std::min(i0, i);
            i1 = std::max(i1, i);
        }
    }
    if (i0 >= g.n || i1 < i0)
        return (ylo <= g.y_min) ? detail::origin_cell(g, f.v[0], f.origin_exponent) : 0.0;
    // integrand in x:  F(x) = f(y) y^d
    auto F = [&](std::size_t i) { return f.v[i] * std::pow(g.y[i], g.d); };
    double acc = 0.0;
    for (std::size_t i = i0; i <= i1; ++i) {
        const double wgt = (i == i0 || i == i1) ? 0.5 : 1.0;
        acc += wgt * g.h * F(i);
    }
    if (i0 == i1)
        acc = 0.0; // single interior node: the two slivers below cover everything
    // sliver from ylo up to the first node inside the window
    if (ylo <= g.y_min) {
        acc += detail::origin_cell(g, f.v[0], f.origin_exponent);
    } else if (i0 > 0) {
        const double dx = std::log(g.y[i0] / ylo);
        const double t = dx / g.h; // in [0,1]
        const double Flo = F(i0) * (1.0 - t) + F(i0 - 1) * t;
        acc += 0.5 * dx * (Flo + F(i0));
    }
    // sliver from the last node inside the window up to yhi
    if (i1 + 1 < g.n && yhi > g.y[i1]) {
        const double dx = std::log(yhi / g.y[i1]);
        const double t = dx / g.h;
        const double Fhi = F(i1) * (1.0 - t) + F(i1 + 1) * t;
        acc += 0.5 * dx * (F(i1) + Fhi);
    }
    return acc;
}

// ---------------------------------------------------------------------------
// Cumulative integrals (measure dy; callers fold in any y^{d-1} factor)
// ---------------------------------------------------------------------------

namespace detail {

/// 4th-order local-cubic panel integrals of ∫ f dy = ∫ (f y) dx.
/// panels[i] = ∫_{y_i}^{y_{i+1}} f dy  (size n-1).
inline std::vector<double> panel_integrals(const GridFunction& f) {
    const RadialGrid& gr = *f.grid;
    const std::size_t n = gr.n;
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i)
        g[i] = f.v[i] * gr.y[i];
    std::vector<double> panels(n - 1);
    const double h = gr.h;
    for (std::size_t i = 0; i + 1 < n; ++i) {
        if (i == 0)
            panels[i] = h * (9.0 * g[0] + 19.0 * g[1] - 5.0 * g[2] + g[3]) / 24.0;
        else if (i + 2 >= n)
            panels[i] = h * (9.0 * g[n - 1] + 19.0 * g[n - 2] - 5.0 * g[n - 3] + g[n - 4]) / 24.0;
        else
            panels[i] = h * (-g[i - 1] + 13.0 * g[i] + 13.0 * g[i + 1] - g[i + 2]) / 24.0;
    }
    return panels;
}

} // namespace detail

/// G(y_i) = ∫_0^{y_i} f dy.  The cell below y_min is closed with the origin
/// exponent (requires p > -1).  Result metadata: origin exponent p+1.
inline GridFunction cumulative_from_zero(const GridFunction& f) {
    const RadialGrid& gr = *f.grid;
    if (f.origin_exponent <= -1)
        throw numerical_error("cumulative_from_zero: non-integrable origin exponent");
    const double cell = f.v[0] * gr.y_min / static_cast<double>(f.origin_exponent + 1);
    auto panels = detail::panel_integrals(f);
    GridFunction out(f.grid, 0.0, f.origin_exponent + 1);
    out.v[0] = cell;
    for (std::size_t i = 0; i + 1 < gr.n; ++i)
        out.v[i + 1] = out.v[i] + panels[i];
    if (f.tail_exponent)
        out.tail_exponent = (*f.tail_exponent < -1.0) ? 0.0 : *f.tail_exponent + 1.0;
    return out;
}

/// J(y_i) = ∫_{infinity}^{y_i} f dy  (so J <= 0 for positive f).  Requires a
/// known tail exponent q < -1; the beyond-y_max remainder is closed with the
/// power law f ~ f(y_max) (y/y_max)^q.
inline GridFunction cumulative_from_infinity(const GridFunction& f) {
    const RadialGrid& gr = *f.grid;
    if (!f.tail_exponent)
        throw parameter_error("cumulative_from_infinity: field has no tail exponent");
    const double q = *f.tail_exponent;
    if (!(q < -1.0))
        throw numerical_error("cumulative_from_infinity: tail exponent must be < -1");
    // ∫_{y_max}^inf f dy with f = f_N (y/y_max)^q.
    const double remainder = -f.v[gr.n - 1] * gr.y_max / (q + 1.0);
    // Accumulate from the top so small tail values are not formed as tiny
    // differences of a huge bottom-heavy prefix sum.
    auto panels = detail::panel_integrals(f);
    GridFunction out(f.grid, 0.0, f.origin_exponent + 1, q + 1.0);
    out.v[gr.n - 1] = -remainder;
    for (std::size_t i = gr.n - 1; i-- > 0;)
        out.v[i] = out.v[i + 1] - panels[i];
    return out;
}

// ---------------------------------------------------------------------------
// Differentiation
// ---------------------------------------------------------------------------

namespace detail {

/// First and second x-derivatives: centered stencils in the interior,
/// one-sided stencils of the same order at the edge nodes.  (Power-law
/// ghost extrapolation was tried first, but its bias in the subleading
/// series term enters second derivatives at O(h^{-1}) and dominates near
/// singular weights; one-sided closures keep the full stencil order.)
inline void x_derivatives(const GridFunction& f, std::vector<double>* fx, std::vector<double>* fxx) {
    const RadialGrid& g = *f.grid;
    const std::size_t n = g.n;
    const double h = g.h;
    const std::vector<double>& p = f.v;
    if (fx)
        fx->resize(n);
    if (fxx)
        fxx->resize(n);
    auto dot = [&](std::size_t base, std::initializer_list<double> c) {
        double acc = 0.0;
        std::size_t j = base;
        for (double w : c)
            acc += w * p[j++];
        return acc;
    };
    if (g.stencil_order == 4) {
        const double c1 = 1.0 / (12.0 * h), c2 = 1.0 / (12.0 * h * h);
        for (std::size_t i = 2; i + 2 < n; ++i) {
            if (fx)
                (*fx)[i] = c1 * (p[i - 2] - 8.0 * p[i - 1] + 8.0 * p[i + 1] - p[i + 2]);
            if (fxx)
                (*fxx)[i] = c2 * (-p[i - 2] + 16.0 * p[i - 1] - 30.0 * p[i] + 16.0 * p[i + 1] - p[i + 2]);
        }
        if (fx) {
            (*fx)[0] = dot(0, {-25.0 / 12, 4.0, -3.0, 4.0 / 3, -1.0 / 4}) / h;
            (*fx)[1] = dot(0, {-1.0 / 4, -5.0 / 6, 3.0 / 2, -1.0 / 2, 1.0 / 12}) / h;
            (*fx)[n - 2] = -dot(n - 5, {1.0 / 12, -1.0 / 2, 3.0 / 2, -5.0 / 6, -1.0 / 4}) / h;
            (*fx)[n - 1] = -dot(n - 5, {-1.0 / 4, 4.0 / 3, -3.0, 4.0, -25.0 / 12}) / h;
        }
        if (fxx) {
            (*fxx)[0] = dot(0, {15.0 / 4, -77.0 / 6, 107.0 / 6, -13.0, 61.0 / 12, -5.0 / 6}) /
                        (h * h);
            (*fxx)[1] = dot(0, {5.0 / 6, -5.0 / 4, -1.0 / 3, 7.0 / 6, -1.0 / 2, 1.0 / 12}) /
                        (h * h);
            (*fxx)[n - 2] = dot(n - 6, {1.0 / 12, -1.0 / 2, 7.0 / 6, -1.0 / 3, -5.0 / 4, 5.0 / 6}) /
                            (h * h);
            (*fxx)[n - 1] = dot(n - 6, {-5.0 / 6, 61.0 / 12, -13.0, 107.0 / 6, -77.0 / 6, 15.0 / 4}) /
                            (h * h);
        }
    } else {
        const double c1 = 1.0 / (2.0 * h), c2 = 1.0 / (h * h);
        for (std::size_t i = 1; i + 1 < n; ++i) {
            if (fx)
                (*fx)[i] = c1 * (p[i + 1] - p[i - 1]);
            if (fxx)
                (*fxx)[i] = c2 * (p[i - 1] - 2.0 * p[i] + p[i + 1]);
        }
        if (fx) {
            (*fx)[0] = dot(0, {-3.0 / 2, 2.0, -1.0 / 2}) / h;
            (*fx)[n - 1] = -dot(n - 3, {-1.0 / 2, 2.0, -3.0 / 2}) / h;
        }
        if (fxx) {
            (*fxx)[0] = dot(0, {2.0, -5.0, 4.0, -1.0}) / (h * h);
            (*fxx)[n - 1] = dot(n - 4, {-1.0, 4.0, -5.0, 2.0}) / (h * h);
        }
    }
}

} // namespace detail

/// d/dy (order 1) or d^2/dy^2 (order 2) via log-grid stencils:
/// f' = f_x / y,  f'' = (f_xx - f_x) / y^2.
inline GridFunction differentiate(const GridFunction& f, int order) {
    if (order != 1 && order != 2)
        throw parameter_error("differentiate: order must be 1 or 2");
    const RadialGrid& g = *f.grid;
    std::vector<double> fx, fxx;
    detail::x_derivatives(f, &fx, order == 2 ? &fxx : nullptr);
    const int p = f.origin_exponent;
    GridFunction out(f.grid);
    if (order == 1) {
        for (std::size_t i = 0; i < g.n; ++i)
            out.v[i] = fx[i] / g.y[i];
        out.origin_exponent = (p == 0) ? 1 : p - 1;
        if (f.tail_exponent && *f.tail_exponent != 0.0)
            out.tail_exponent = *f.tail_exponent - 1.0;
    } else {
        for (std::size_t i = 0; i < g.n; ++i)
            out.v[i] = (fxx[i] - fx[i]) / (g.y[i] * g.y[i]);
        out.origin_exponent = (p >= 2 || p < 0) ? p - 2 : (p == 1 ? 1 : 0);
        if (f.tail_exponent && *f.tail_exponent != 0.0)
            out.tail_exponent = *f.tail_exponent - 2.0;
    }
    return out;
}

/// Scaling generator Lambda f = y f' — a plain x-derivative on this grid.
inline GridFunction lambda_op(const GridFunction& f) {
    std::vector<double> fx;
    detail::x_derivatives(f, &fx, nullptr);
    GridFunction out(f.grid);
    out.v = std::move(fx);
    const int p = f.origin_exponent;
    out.origin_exponent = (p == 0) ? 2 : p;
    if (f.tail_exponent && *f.tail_exponent != 0.0)
        out.tail_exponent = f.tail_exponent;
    return out;
}

// ---------------------------------------------------------------------------
// Resampling and exponent measurement
// ---------------------------------------------------------------------------

/// W(y) = f(mu * y) by quintic Lagrange interpolation in log-index space.
/// Out-of-range positions fall back to the origin / tail power laws (the
/// tail defaults to a constant extension when no exponent is known).
inline GridFunction resample_logshift(const GridFunction& f, double mu) {
    if (!(mu > 0.0))
        throw parameter_error("resample_logshift: mu must be positive");
    const RadialGrid& g = *f.grid;
    const std::size_t n = g.n;
    const double shift = std::log(mu) / g.h;
    GridFunction out(f.grid, 0.0, f.origin_exponent, f.tail_exponent);
    for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) + shift;
        if (t < 0.0) {
            out.v[i] = f.v[0] * std::pow(mu * g.y[i] / g.y_min, f.origin_exponent);
            continue;
        }
        if (t > static_cast<double>(n - 1)) {
            const double q = f.tail_exponent.value_or(0.0);
            out.v[i] = f.v[n - 1] * std::pow(mu * g.y[i] / g.y_max, q);
            continue;
        }
        long j0 = static_cast<long>(std::floor(t)) - 2;
        j0 = std::clamp<long>(j0, 0, static_cast<long>(n) - 6);
        double val = 0.0;
        for (int a = 0; a < 6; ++a) {
            double lag = 1.0;
            for (int b = 0; b < 6; ++b) {
                if (a == b)
                    continue;
                lag *= (t - static_cast<double>(j0 + b)) / static_cast<double>(a - b);
            }
            val += lag * f.v[static_cast<std::size_t>(j0 + a)];
        }
        out.v[i] = val;
    }
    return out;
}

/// Fitted leading power of f near the origin (log-log slope over
/// [y_min, y_min*10^decades]).
inline LineFit measure_origin_exponent(const GridFunction& f, double decades = 1.0) {
    const RadialGrid& g = *f.grid;
    return fit_powerlaw(g.y, f.v, g.y_min, g.y_min * std::pow(10.0, decades),
                        1e-305);
}

/// Fitted tail power of f (log-log slope over [y_max/10^decades, y_max]).
inline LineFit measure_tail_exponent(const GridFunction& f, double decades = 1.0) {
    const RadialGrid& g = *f.grid;
    return fit_powerlaw(g.y, f.v, g.y_max / std::pow(10.0, decades), g.y_max,
                        1e-305);
}

/// Cutoff field chi_M(y) = chi(y/M) on the grid (compactly supported in
/// [0, 2M]); degree parameter N as in cutoff_value.
inline GridFunction cutoff_field(GridPtr grid, double M, int N = 7) {
    if (!(M > 0.0))
        throw parameter_error("cutoff_field: scale M must be positive");
    GridFunction out(std::move(grid), 0.0, 0);
    for (std::size_t i = 0; i < out.size(); ++i)
        out.v[i] = cutoff_value(out.grid->y[i] / M, N);
    return out;
}

// ---------------------------------------------------------------------------
// Tridiagonal solve (Thomas algorithm)
// ---------------------------------------------------------------------------

/// Solve the tridiagonal system with diagonals (lo, di, up) in place:
/// lo[i] x[i-1] + di[i] x[i] + up[i] x[i+1] = rhs[i].  lo[0] and up[n-1]
/// are ignored.  rhs is overwritten with the solution.
inline void solve_tridiagonal(const std::vector<double>& lo, const std::vector<double>& di,
                              const std::vector<double>& up, std::vector<double>& rhs) {
    const std::size_t n = di.size();
    if (lo.size() != n || up.size() != n || rhs.size() != n)
        throw parameter_error("solve_tridiagonal: band size mismatch");
    std::vector<double> c(n);
    double piv = di[0];
    if (piv == 0.0)
        throw numerical_error("solve_tridiagonal: zero pivot at row 0");
    c[0] = up[0] / piv;
    rhs[0] /= piv;
    for (std::size_t i = 1; i < n; ++i) {
        piv = di[i] - lo[i] * c[i - 1];
        if (piv == 0.0)
            throw numerical_error("solve_tridiagonal: zero pivot at row " + std::to_string(i));
        c[i] = up[i] / piv;
        rhs[i] = (rhs[i] - lo[i] * rhs[i - 1]) / piv;
    }
    for (std::size_t i = n - 1; i-- > 0;)
        rhs[i] -= c[i] * rhs[i + 1];
}

} // namespace blowup
