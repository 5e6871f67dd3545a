#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "blowup/errors.hpp"
#include "blowup/fits.hpp"
#include "blowup/numerics.hpp"
#include "blowup/ode.hpp"

namespace blowup {

inline constexpr double HALF_PI = 1.57079632679489661923;

/// Decay rate of the soliton tail: Q(y) = pi/2 - a0 y^{-gamma} (1 + o(1)),
/// the smaller root of gamma (d - 2 - gamma) = d - 1.  Real and in (1, 2]
/// exactly when d >= 7.
inline double gamma_exponent(int d) {
    if (d < 7)
        throw parameter_error("gamma_exponent: defined for d >= 7, got " + std::to_string(d));
    const double disc = static_cast<double>(d) * d - 8.0 * d + 8.0;
    return 0.5 * (d - 2.0 - std::sqrt(disc));
}

/// Splitting of (d/2 - gamma)/2 into integer part hbar and fractional
/// part delta; both recur throughout the weighted-norm bookkeeping.
struct SpectralParams {
    double gamma = 0.0;
    int hbar = 0;
    double delta = 0.0;
};

inline SpectralParams spectral_params(int d) {
    SpectralParams sp;
    sp.gamma = gamma_exponent(d);
    const double s = 0.5 * (0.5 * d - sp.gamma);
    sp.hbar = static_cast<int>(std::floor(s));
    sp.delta = s - sp.hbar;
    return sp;
}

/// The stationary profile and every derived field the rest of the code
/// needs: the soliton Q, its scaling derivative Lambda Q, the logarithmic
/// potential V, the Schroedinger potentials Z and Z~, and the second
/// element Gamma of the kernel of the linearized operator.
struct ProfilePack {
    GridPtr grid;
    int d = 0;
    double gamma = 0.0;
    int hbar = 0;
    double delta = 0.0;
    double a0 = 0.0;             ///< fitted tail amplitude in pi/2 - a0 y^{-gamma}
    double measured_gamma = 0.0; ///< fitted tail exponent (diagnostic)
    double tail_fit_rms = 0.0;
    GridFunction Q;      ///< soliton, Q(0)=0, Q'(0)=1, Q -> pi/2
    GridFunction Qprime; ///< dQ/dy straight from the integrator
    GridFunction LamQ;   ///< y Q'
    GridFunction V;      ///< Lambda(LamQ)/LamQ; 1 at the origin, -gamma at infinity
    GridFunction Z;      ///< (d-1) cos(2Q)
    GridFunction Ztilde; ///< (V+1)^2 + (d-2)(V+1) - Lambda V
    GridFunction Gamma;  ///< second kernel element, negative, singular at 0
};

/// Fit the tail law pi/2 - Q ~ a0 y^{-gamma} over the last decade of the
/// grid and record (a0, measured exponent, rms) in the pack.
inline void fit_tail(ProfilePack& pack) {
    const RadialGrid& g = *pack.grid;
    std::vector<double> defect(g.n);
    for (std::size_t i = 0; i < g.n; ++i) {
        defect[i] = HALF_PI - pack.Q.v[i];
        if (defect[i] <= 0.0 && g.y[i] > g.y_max / 10.0)
            throw numerical_error("fit_tail: Q overshoots pi/2 inside the fit window");
    }
    const LineFit fit = fit_powerlaw(g.y, defect, g.y_max / 10.0, g.y_max);
    pack.measured_gamma = -fit.slope;
    pack.a0 = std::exp(fit.intercept);
    pack.tail_fit_rms = fit.rms;
    if (fit.rms > 0.05)
        throw numerical_error("fit_tail: tail is not a clean power law (rms " +
                              std::to_string(fit.rms) + ")");
}

/// Integrate the profile ODE
///   Q'' + (d-1)/y Q' = (d-1) sin(2Q) / (2 y^2),   Q(0)=0, Q'(0)=1,
/// from a two-term odd series start at y_min, then build all derived
/// fields.  Requires y_max >= 1e3 so the tail fit has room.
inline ProfilePack solve_Q(GridPtr grid) {
    const RadialGrid& g = *grid;
    if (g.y_max < 1e3)
        throw parameter_error("solve_Q: tail diagnostics need y_max >= 1e3");
    const int d = g.d;

    ProfilePack pack;
    pack.grid = grid;
    pack.d = d;
    const SpectralParams sp = spectral_params(d);
    pack.gamma = sp.gamma;
    pack.hbar = sp.hbar;
    pack.delta = sp.delta;

    // series start: Q = y + c1 y^3 + O(y^5) with c1 = -(d-1)/(3(d+2))
    const double c1 = -(d - 1.0) / (3.0 * (d + 2.0));
    const double y0 = g.y_min;
    std::vector<double> state = {y0 + c1 * y0 * y0 * y0, 1.0 + 3.0 * c1 * y0 * y0};

    OdeRhs rhs = [d](double y, const std::vector<double>& s, std::vector<double>& ds) {
        ds[0] = s[1];
        ds[1] = -(d - 1.0) / y * s[1] + (d - 1.0) / (2.0 * y * y) * std::sin(2.0 * s[0]);
    };

    pack.Q = GridFunction(grid, 0.0, 1, 0.0);
    pack.Qprime = GridFunction(grid, 0.0, 0, -sp.gamma - 1.0);
    pack.Q.v[0] = state[0];
    pack.Qprime.v[0] = state[1];

    OdeOptions opt;
    opt.rtol = 1e-12;
    opt.atol = 1e-14;
    for (std::size_t i = 1; i < g.n; ++i) {
        ode_integrate(rhs, g.y[i - 1], g.y[i], state, opt);
        if (!(std::abs(state[0]) < 3.2))
            throw numerical_error("solve_Q: profile left (-pi, pi) near y = " +
                                  std::to_string(g.y[i]));
        pack.Q.v[i] = state[0];
        pack.Qprime.v[i] = state[1];
    }
    if (std::abs(pack.Q.v[g.n - 1] - HALF_PI) > 1e-2)
        throw numerical_error("solve_Q: Q(y_max) is not close to pi/2; enlarge the grid");

    // Lambda Q = y Q' > 0: the profile is strictly monotone.
    pack.LamQ = GridFunction(grid, 0.0, 1, -sp.gamma);
    for (std::size_t i = 0; i < g.n; ++i) {
        pack.LamQ.v[i] = g.y[i] * pack.Qprime.v[i];
        if (!(pack.LamQ.v[i] > 0.0))
            throw numerical_error("solve_Q: Lambda Q lost positivity at y = " +
                                  std::to_string(g.y[i]));
    }

    // V = Lambda(Lambda Q)/Lambda Q reduces through the profile ODE to the
    // pointwise expression V = (2-d) + (d-1) sin(2Q) / (2 Lambda Q), and
    // Lambda V has a closed form as well — no stencil noise in either.
    pack.V = GridFunction(grid, 0.0, 0, 0.0);
    GridFunction LamV(grid, 0.0, 2, 0.0);
    for (std::size_t i = 0; i < g.n; ++i) {
        const double s2q = std::sin(2.0 * pack.Q.v[i]);
        const double c2q = std::cos(2.0 * pack.Q.v[i]);
        const double lq = pack.LamQ.v[i];
        pack.V.v[i] = (2.0 - d) + (d - 1.0) * s2q / (2.0 * lq);
        // y (Lambda Q)' = (2-d) Lambda Q + (d-1) sin(2Q)/2
        const double ylqp = (2.0 - d) * lq + (d - 1.0) * s2q / 2.0;
        LamV.v[i] = 0.5 * (d - 1.0) * (2.0 * c2q * lq * lq - s2q * ylqp) / (lq * lq);
    }

    pack.Z = GridFunction(grid, 0.0, 0, 0.0);
    for (std::size_t i = 0; i < g.n; ++i)
        pack.Z.v[i] = (d - 1.0) * std::cos(2.0 * pack.Q.v[i]);

    pack.Ztilde = GridFunction(grid, 0.0, 0, 0.0);
    for (std::size_t i = 0; i < g.n; ++i) {
        const double vp1 = pack.V.v[i] + 1.0;
        pack.Ztilde.v[i] = vp1 * vp1 + (d - 2.0) * vp1 - LamV.v[i];
    }

    // Gamma = Lambda Q * ∫_inf^y dxi / (xi^{d-1} (Lambda Q)^2): the Wronskian
    // relation Gamma' LamQ - Gamma LamQ' = y^{1-d} holds by construction.
    GridFunction integrand(grid, 0.0, -(d + 1), -(d - 1.0) + 2.0 * sp.gamma);
    for (std::size_t i = 0; i < g.n; ++i)
        integrand.v[i] = 1.0 / (std::pow(g.y[i], d - 1) * pack.LamQ.v[i] * pack.LamQ.v[i]);
    auto J = cumulative_from_infinity(integrand);
    pack.Gamma = GridFunction(grid, 0.0, -(d - 1), -(d - 2.0 - sp.gamma));
    for (std::size_t i = 0; i < g.n; ++i)
        pack.Gamma.v[i] = pack.LamQ.v[i] * J.v[i];

    fit_tail(pack);
    return pack;
}

} // namespace blowup
