#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "blowup/errors.hpp"
#include "blowup/fits.hpp"
#include "blowup/ode.hpp"
#include "blowup/profile.hpp"

namespace blowup {

/// Thrown by the shooting driver when the initial bracket fails to
/// straddle the stable manifold.  Derives from numerical_error so the CLI
/// maps it to the numerical-check exit code.
struct shooting_error : numerical_error {
    using numerical_error::numerical_error;
};

/// The closed ODE system obeyed by the profile amplitudes b = (b_1..b_L):
///
///     (b_k)' + (2k - gamma) b_1 b_k - b_{k+1} = 0,   b_{L+1} = 0,
///
/// together with the coefficients c_k of its exact power-law solution
/// b_k(s) = c_k / s^k.  The c_k vanish for k > ell, so the excitation
/// index ell selects which finite branch the flow rides.
struct ModeSystem {
    int d = 0;          ///< ambient dimension; fixes gamma and delta
    int ell = 0;        ///< excitation index, requires 2*ell > gamma
    int L = 0;          ///< number of amplitudes carried, L >= ell
    double gamma = 0.0;
    double delta = 0.0; ///< fractional spectral shift (shrinking-set exponent)
    double eta = 0.05;  ///< localization width exponent, same role as in the profile
    std::vector<double> c; ///< c[k-1] = c_k; identically zero beyond k = ell
};

/// Coefficients of the power-law branch: c_1 = ell/(2 ell - gamma) and
/// c_{k+1} = -gamma (ell - k)/(2 ell - gamma) c_k, cut off at k = ell.
inline ModeSystem make_mode_system(int d, int ell, int L) {
    ModeSystem sys;
    sys.d = d;
    const SpectralParams sp = spectral_params(d); // throws for d < 7
    sys.gamma = sp.gamma;
    sys.delta = sp.delta;
    if (ell < 1 || 2.0 * ell <= sys.gamma)
        throw parameter_error("make_mode_system: need 2*ell > gamma, got ell = " +
                              std::to_string(ell) + " at d = " + std::to_string(d));
    if (L < ell)
        throw parameter_error("make_mode_system: need L >= ell, got L = " + std::to_string(L));
    sys.ell = ell;
    sys.L = L;
    sys.c.assign(L, 0.0);
    sys.c[0] = ell / (2.0 * ell - sys.gamma);
    for (int k = 1; k < ell && k < L; ++k)
        sys.c[k] = -sys.gamma * (ell - k) / (2.0 * ell - sys.gamma) * sys.c[k - 1];
    return sys;
}

/// The exact solution b_k(s) = c_k / s^k sampled at one time.
inline std::vector<double> explicit_solution(const ModeSystem& sys, double s) {
    if (!(s > 0.0))
        throw parameter_error("explicit_solution: need s > 0");
    std::vector<double> b(sys.L);
    double sk = s;
    for (int k = 0; k < sys.L; ++k, sk *= s)
        b[k] = sys.c[k] / sk;
    return b;
}

/// Right-hand side of the amplitude system, db_k/ds = b_{k+1} - (2k - gamma) b_1 b_k.
inline std::vector<double> system_rhs(const ModeSystem& sys, const std::vector<double>& b) {
    if (static_cast<int>(b.size()) != sys.L)
        throw parameter_error("system_rhs: expected " + std::to_string(sys.L) + " amplitudes");
    std::vector<double> db(sys.L);
    for (int k = 1; k <= sys.L; ++k) {
        const double next = (k < sys.L) ? b[k] : 0.0;
        db[k - 1] = next - (2.0 * k - sys.gamma) * b[0] * b[k - 1];
    }
    return db;
}

/// Residual of the system on the power-law branch at time s, using the
/// analytic derivative d/ds (c_k/s^k) = -k c_k/s^{k+1}.  Identically zero
/// in exact arithmetic; the float result is pure rounding noise.
inline std::vector<double> explicit_residual(const ModeSystem& sys, double s) {
    const std::vector<double> b = explicit_solution(sys, s);
    const std::vector<double> db = system_rhs(sys, b);
    std::vector<double> r(sys.L);
    double sk1 = s * s;
    for (int k = 1; k <= sys.L; ++k, sk1 *= s)
        r[k - 1] = -k * sys.c[k - 1] / sk1 - db[k - 1];
    return r;
}

/// Linearization of the amplitude system around the power-law branch in
/// the rescaled frame U_k = s^k b_k - c_k:
///
///     s dU/ds = A U + O(|U|^2),   U = (U_1..U_ell).
///
/// P diagonalizes A from the left (P A P^{-1} = diag(eigenvalues)), so the
/// diagonal coordinates V = P U evolve independently, V_k ~ s^{mu_k}.
struct LinearizationMatrix {
    int ell = 0;
    Eigen::MatrixXd A;
    std::vector<double> eigenvalues; ///< real, sorted ascending: -1 first, the rest positive
    Eigen::MatrixXd P;               ///< V = P U
    Eigen::MatrixXd Pinv;            ///< columns = right eigenvectors, largest entry scaled to 1
};

/// Closed-form spectrum of the linearization: {-1} followed by
/// k*gamma/(2*ell - gamma) for k = 2..ell (all positive, ascending).
inline std::vector<double> diagonal_spectrum(double gamma, int ell) {
    std::vector<double> mu(static_cast<std::size_t>(ell));
    mu[0] = -1.0;
    for (int k = 2; k <= ell; ++k)
        mu[k - 1] = k * gamma / (2.0 * ell - gamma);
    return mu;
}

/// Assemble and diagonalize the linearization matrix.  Superdiagonal
/// entries are 1 (each equation sees the next amplitude), the diagonal
/// carries gamma (ell - k)/(2 ell - gamma), and the first column collects
/// the couplings through b_1: every equation has a (2k - gamma) b_1 b_k
/// term, and perturbing b_1 perturbs them all.
inline LinearizationMatrix build_Al(double gamma, int ell) {
    if (ell < 1 || 2.0 * ell <= gamma)
        throw parameter_error("build_Al: need 2*ell > gamma, got ell = " + std::to_string(ell));
    std::vector<double> c(static_cast<std::size_t>(ell), 0.0);
    c[0] = ell / (2.0 * ell - gamma);
    for (int k = 1; k < ell; ++k)
        c[k] = -gamma * (ell - k) / (2.0 * ell - gamma) * c[k - 1];

    LinearizationMatrix lin;
    lin.ell = ell;
    lin.A = Eigen::MatrixXd::Zero(ell, ell);
    for (int k = 1; k <= ell; ++k) {
        lin.A(k - 1, k - 1) = gamma * (ell - k) / (2.0 * ell - gamma);
        if (k < ell)
            lin.A(k - 1, k) = 1.0;
        lin.A(k - 1, 0) -= (2.0 * k - gamma) * c[k - 1];
    }

    Eigen::EigenSolver<Eigen::MatrixXd> es(lin.A);
    if (es.info() != Eigen::Success)
        throw numerical_error("build_Al: dense eigensolver failed");

    // The spectrum is real and simple; anything else means the assembly is wrong.
    std::vector<int> order(static_cast<std::size_t>(ell));
    for (int i = 0; i < ell; ++i) {
        if (std::abs(es.eigenvalues()(i).imag()) > 1e-12 * (1.0 + std::abs(es.eigenvalues()(i).real())))
            throw numerical_error("build_Al: complex eigenvalue encountered");
        order[i] = i;
    }
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        return es.eigenvalues()(a).real() < es.eigenvalues()(b).real();
    });

    lin.eigenvalues.resize(order.size());
    lin.Pinv = Eigen::MatrixXd(ell, ell);
    for (int j = 0; j < ell; ++j) {
        lin.eigenvalues[j] = es.eigenvalues()(order[j]).real();
        Eigen::VectorXd v(ell);
        int imax = 0;
        for (int i = 0; i < ell; ++i) {
            const auto z = es.eigenvectors()(i, order[j]);
            if (std::abs(z.imag()) > 1e-12)
                throw numerical_error("build_Al: complex eigenvector encountered");
            v(i) = z.real();
            if (std::abs(v(i)) > std::abs(v(imax)))
                imax = i;
        }
        // Deterministic normalization: the largest entry becomes exactly 1.
        lin.Pinv.col(j) = v / v(imax);
    }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(lin.Pinv);
    if (!lu.isInvertible())
        throw numerical_error("build_Al: eigenvector basis is singular");
    lin.P = lu.inverse();
    return lin;
}

/// Shrinking-set ceiling for the diagonal coordinates: |V_k(s)| stays
/// below 10 s^{-(eta/2)(1 - delta)} along admissible trajectories.
inline double shrinking_bound(const ModeSystem& sys, double s) {
    return 10.0 * std::pow(s, -0.5 * sys.eta * (1.0 - sys.delta));
}

/// One integrated trajectory of the amplitude system together with the
/// reconstructed scales.  Samples are recorded at accepted integrator
/// steps; recording stops once t saturates at double precision (the tail
/// of t lives many orders below one ulp), which keeps every stored column
/// strictly monotone.
struct ModeTrajectory {
    std::vector<double> s;
    std::vector<double> t;
    std::vector<double> lambda;
    std::vector<std::vector<double>> b; ///< b[i] = amplitudes at sample i
    double s_end = 0.0;                 ///< last s actually reached by the integrator
    double T = 0.0;                     ///< extrapolated blowup time (NaN when the regime was left)
    bool left_blowup_regime = false;    ///< b_1 dropped to zero or below
    LineFit s_fit;                      ///< log lambda vs log s
    LineFit t_fit;                      ///< log lambda vs log(T - t)
    double prefactor = 0.0;             ///< lambda ~ prefactor * (T - t)^{t_fit.slope}
};

namespace detail {

/// Cubic Hermite read-off of t at s_q from trajectory samples, using the
/// known derivative dt/ds = lambda^2 at the sample points.
inline double interp_t(const ModeTrajectory& tr, double s_q) {
    const auto& s = tr.s;
    auto it = std::lower_bound(s.begin(), s.end(), s_q);
    if (it == s.begin())
        return tr.t.front();
    if (it == s.end())
        return tr.t.back();
    const std::size_t i1 = static_cast<std::size_t>(it - s.begin());
    const std::size_t i0 = i1 - 1;
    const double h = s[i1] - s[i0];
    const double th = (s_q - s[i0]) / h;
    const double m0 = tr.lambda[i0] * tr.lambda[i0];
    const double m1 = tr.lambda[i1] * tr.lambda[i1];
    const double th2 = th * th, th3 = th2 * th;
    return (2 * th3 - 3 * th2 + 1) * tr.t[i0] + (th3 - 2 * th2 + th) * h * m0 +
           (-2 * th3 + 3 * th2) * tr.t[i1] + (th3 - th2) * h * m1;
}

} // namespace detail

/// Integrate the amplitude system from b0 at s0, carrying log(lambda) and
/// t alongside (lambda' = -b_1 lambda, t' = lambda^2, lambda(s0) = 1).
/// Stops at s1, or when lambda drops below 1e-12, or when b_1 leaves the
/// blowup regime (reported through the flag, not an error).  The blowup
/// time T is then extrapolated from the convergent tail of t, and the two
/// scaling exponents of lambda are fitted on a window that skips the first
/// 20% of the time interval (transient) and the final decade before T
/// (where the extrapolation and double rounding dominate).
///
/// The extrapolation weights assume the trajectory rides the power-law
/// branch, lambda^2 ~ s^{-2 ell/(2 ell - gamma)}; the exponent exceeds 1
/// whenever gamma > 0, so t is always Cauchy.
inline ModeTrajectory integrate_system(const ModeSystem& sys, const std::vector<double>& b0,
                                       double s0, double s1) {
    if (static_cast<int>(b0.size()) != sys.L)
        throw parameter_error("integrate_system: expected " + std::to_string(sys.L) +
                              " initial amplitudes, got " + std::to_string(b0.size()));
    if (!(s0 > 0.0) || !(s1 >= 2.0 * s0))
        throw parameter_error("integrate_system: need s0 > 0 and s1 >= 2*s0");
    double sk = s0;
    for (int k = 0; k < sys.L; ++k, sk *= s0) {
        if (!(std::abs(b0[k] * sk - sys.c[k]) <= 10.0 * (1.0 + std::abs(sys.c[k]))))
            throw parameter_error("integrate_system: initial amplitudes too far from the "
                                  "power-law branch at index " + std::to_string(k + 1));
    }
    if (!(b0[0] > 0.0))
        throw parameter_error("integrate_system: need b_1 > 0 to start in the blowup regime");

    constexpr double LOG_LAMBDA_MIN = -27.631021115928547; // log(1e-12)
    const int L = sys.L;

    ModeTrajectory tr;
    std::vector<double> y(static_cast<std::size_t>(L) + 2);
    for (int k = 0; k < L; ++k)
        y[k] = b0[k];
    y[L] = 0.0;     // log lambda
    y[L + 1] = 0.0; // t

    const auto rhs = [&](double, const std::vector<double>& yv, std::vector<double>& dy) {
        for (int k = 1; k <= L; ++k) {
            const double next = (k < L) ? yv[k] : 0.0;
            dy[k - 1] = next - (2.0 * k - sys.gamma) * yv[0] * yv[k - 1];
        }
        dy[L] = -yv[0];
        dy[L + 1] = std::exp(2.0 * yv[L]);
    };

    const auto record = [&](double s, const std::vector<double>& yv) {
        tr.s.push_back(s);
        tr.t.push_back(yv[L + 1]);
        tr.lambda.push_back(std::exp(yv[L]));
        tr.b.emplace_back(yv.begin(), yv.begin() + L);
    };
    record(s0, y);

    const auto observer = [&](double s, const std::vector<double>& yv) {
        if (yv[0] <= 0.0) {
            tr.left_blowup_regime = true;
            return false; // discard this state; the samples end at the previous step
        }
        if (yv[L + 1] > tr.t.back() && yv[L] < std::log(tr.lambda.back()))
            record(s, yv);
        return yv[L] >= LOG_LAMBDA_MIN;
    };

    OdeOptions opt;
    opt.h_init = 0.01 * s0; // the dynamics vary on scale s, not on the span to s1
    tr.s_end = ode_integrate(rhs, s0, s1, y, opt, observer);

    if (tr.left_blowup_regime) {
        tr.T = std::numeric_limits<double>::quiet_NaN();
        return tr;
    }

    // Two-point extrapolation of T from t at s_end and (roughly) s_end/2,
    // exact for a pure power-law tail.
    const double sb = tr.s.back();
    const double sa = std::max(0.5 * sb, tr.s.front());
    if (!(sa < sb))
        throw numerical_error("integrate_system: range too short to extrapolate T");
    const double beta = 2.0 * sys.ell / (2.0 * sys.ell - sys.gamma);
    const double ta = detail::interp_t(tr, sa);
    const double tb = tr.t.back();
    tr.T = tb + (tb - ta) / (std::pow(sb / sa, beta - 1.0) - 1.0);

    // Fit window in t, with a relative floor on T - t: below ~1e-11 * T the
    // subtraction itself has lost every significant digit.
    const double t0 = tr.t.front();
    const double gap_hi = 0.8 * (tr.T - t0);
    const double gap_min = tr.T - tr.t.back();
    const double gap_lo = std::max(10.0 * gap_min, 1e-11 * std::max(tr.T, 1.0));
    std::vector<double> fs, fgap, flam;
    for (std::size_t i = 0; i < tr.s.size(); ++i) {
        const double gap = tr.T - tr.t[i];
        if (gap > gap_hi || gap < gap_lo)
            continue;
        fs.push_back(tr.s[i]);
        fgap.push_back(gap);
        flam.push_back(tr.lambda[i]);
    }
    const double inf = std::numeric_limits<double>::infinity();
    tr.s_fit = fit_powerlaw(fs, flam, 0.0, inf);
    tr.t_fit = fit_powerlaw(fgap, flam, 0.0, inf);
    tr.prefactor = std::exp(tr.t_fit.intercept);
    return tr;
}

/// Trajectory of the diagonal coordinates V = P U, U_k = s^k b_k - c_k.
struct DiagonalTrace {
    std::vector<double> s;
    std::vector<std::vector<double>> V; ///< V[i] has ell entries
    bool left_regime = false;           ///< b_1 dropped to zero or below
    bool exited = false;                ///< some |V_k| crossed the shrinking bound
};

/// Integrate the amplitude system from diagonal-frame data V0 at s0 and
/// return the diagonal-frame samples.  Amplitudes beyond index ell start
/// at zero and stay there exactly, so only ell components are carried.
/// With stop_at_bound set, integration aborts as soon as either some
/// |V_k| crosses the shrinking-set ceiling or b_1 turns non-positive; the
/// offending sample is kept so the caller can read off the exit side.
inline DiagonalTrace trace_diagonal(const ModeSystem& sys, const LinearizationMatrix& lin,
                                    const std::vector<double>& V0, double s0, double s1,
                                    bool stop_at_bound = false) {
    const int ell = sys.ell;
    if (lin.ell != ell)
        throw parameter_error("trace_diagonal: linearization built for a different ell");
    if (static_cast<int>(V0.size()) != ell)
        throw parameter_error("trace_diagonal: expected " + std::to_string(ell) + " components");
    if (!(s0 > 0.0) || !(s1 > s0))
        throw parameter_error("trace_diagonal: need 0 < s0 < s1");

    Eigen::VectorXd V = Eigen::Map<const Eigen::VectorXd>(V0.data(), ell);
    Eigen::VectorXd U = lin.Pinv * V;

    DiagonalTrace out;
    std::vector<double> y(static_cast<std::size_t>(ell));
    double sk = s0;
    for (int k = 0; k < ell; ++k, sk *= s0)
        y[k] = (sys.c[k] + U(k)) / sk;

    const auto rhs = [&](double, const std::vector<double>& yv, std::vector<double>& dy) {
        for (int k = 1; k <= ell; ++k) {
            const double next = (k < ell) ? yv[k] : 0.0;
            dy[k - 1] = next - (2.0 * k - sys.gamma) * yv[0] * yv[k - 1];
        }
    };

    const auto push = [&](double s, const std::vector<double>& yv) {
        Eigen::VectorXd Us(ell);
        double p = s;
        for (int k = 0; k < ell; ++k, p *= s)
            Us(k) = yv[k] * p - sys.c[k];
        const Eigen::VectorXd Vs = lin.P * Us;
        out.s.push_back(s);
        out.V.emplace_back(Vs.data(), Vs.data() + ell);
        if (yv[0] <= 0.0)
            out.left_regime = true;
        if (stop_at_bound) {
            const double cap = shrinking_bound(sys, s);
            for (int k = 0; k < ell; ++k)
                if (std::abs(Vs(k)) > cap)
                    out.exited = true;
        }
        return !(out.left_regime || out.exited);
    };

    if (!push(s0, y))
        return out;
    OdeOptions opt;
    opt.h_init = 0.01 * s0;
    ode_integrate(rhs, s0, s1, y, opt, push);
    return out;
}

/// Growth / decay measurement for one diagonal mode.
struct ModeProbe {
    int mode = 0;            ///< 1-based index into the ascending spectrum
    double eigenvalue = 0.0; ///< predicted exponent of |V_mode|(s)
    int sign = 0;            ///< perturbation direction (+1/-1; 0 for the random probe)
    LineFit fit;             ///< measured power law of |V_mode|(s)
    double max_V = 0.0;
};

struct InstabilityReport {
    double eps = 0.0;
    double s0 = 0.0;
    std::vector<double> eigenvalues;
    std::vector<ModeProbe> probes;        ///< two per mode (signs +/-), empty when eps = 0
    std::vector<ModeProbe> random_probes; ///< one per mode, from a seeded random direction
    double reference_drift = 0.0;         ///< unperturbed run: max |s^k b_k - c_k|
};

namespace detail {

/// Fit |V_j| ~ s^mu on a trace.  A sample enters the fit only while the
/// measured component dominates the second-order cross-talk from the
/// other modes (quadratic in the largest coordinate): past that point a
/// decaying mode is buried under the square of a growing one and the
/// slope bends away from the eigenvalue.  The 1e-13 floor drops samples
/// at the rounding noise of the frame change.
inline ModeProbe probe_from_trace(const DiagonalTrace& trace, int mode_idx, double mu, int sign) {
    ModeProbe p;
    p.mode = mode_idx + 1;
    p.eigenvalue = mu;
    p.sign = sign;
    std::vector<double> ss, av;
    ss.reserve(trace.s.size());
    av.reserve(trace.s.size());
    for (std::size_t i = 0; i < trace.s.size(); ++i) {
        double vmax = 0.0;
        for (double v : trace.V[i])
            vmax = std::max(vmax, std::abs(v));
        const double a = std::abs(trace.V[i][static_cast<std::size_t>(mode_idx)]);
        p.max_V = std::max(p.max_V, a);
        if (a >= 10.0 * vmax * vmax) {
            ss.push_back(trace.s[i]);
            av.push_back(a);
        }
    }
    const double inf = std::numeric_limits<double>::infinity();
    p.fit = fit_powerlaw(ss, av, 0.0, inf, 1e-13);
    return p;
}

/// Horizon for one probe: long enough to fit, short enough that the
/// excited mode stays in the linear regime (|V| below ~1e-2).
inline double probe_horizon(double s0, double eps, double mu) {
    double factor = 30.0;
    if (mu > 0.05 && eps > 0.0)
        factor = std::min(factor, std::pow(1e-2 / eps, 1.0 / mu));
    return s0 * std::max(4.0, factor);
}

} // namespace detail

/// Perturb the power-law branch along each eigenvector of the
/// linearization by +/- eps and measure the growth or decay exponent of
/// the excited diagonal coordinate; the spectrum predicts decay s^{-1}
/// for the first mode and growth s^{k gamma/(2 ell - gamma)} for the
/// rest.  A further probe kicks along a seeded random direction, where
/// every diagonal coordinate should run at its own eigenvalue at once.
/// With eps = 0 only the unperturbed reference run is made and its drift
/// off the branch reported.
inline InstabilityReport instability_experiment(const ModeSystem& sys, double eps,
                                                std::uint64_t seed, double s0 = 10.0) {
    if (sys.ell < 2)
        throw parameter_error("instability_experiment: need ell >= 2 (no unstable mode otherwise)");
    if (!(eps >= 0.0) || eps > 1e-3)
        throw parameter_error("instability_experiment: need 0 <= eps <= 1e-3");
    if (!(s0 > 0.0))
        throw parameter_error("instability_experiment: need s0 > 0");

    const LinearizationMatrix lin = build_Al(sys.gamma, sys.ell);
    const int ell = sys.ell;

    InstabilityReport rep;
    rep.eps = eps;
    rep.s0 = s0;
    rep.eigenvalues = lin.eigenvalues;

    // Unperturbed reference: how far does the integrator itself drift?
    {
        const DiagonalTrace ref =
            trace_diagonal(sys, lin, std::vector<double>(ell, 0.0), s0, 30.0 * s0);
        const Eigen::FullPivLU<Eigen::MatrixXd> lu(lin.P);
        for (const auto& Vs : ref.V) {
            const Eigen::VectorXd U =
                lu.solve(Eigen::Map<const Eigen::VectorXd>(Vs.data(), ell));
            rep.reference_drift = std::max(rep.reference_drift, U.lpNorm<Eigen::Infinity>());
        }
    }
    if (eps == 0.0)
        return rep;

    for (int j = 0; j < ell; ++j) {
        const double mu = lin.eigenvalues[j];
        const double s1 = detail::probe_horizon(s0, eps, mu);
        for (const int sign : {+1, -1}) {
            std::vector<double> V0(ell, 0.0);
            V0[j] = sign * eps;
            const DiagonalTrace trace = trace_diagonal(sys, lin, V0, s0, s1);
            rep.probes.push_back(detail::probe_from_trace(trace, j, mu, sign));
        }
    }

    // Random direction: every mode carries weight, so all exponents show up.
    {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> gauss;
        Eigen::VectorXd u(ell);
        for (int k = 0; k < ell; ++k)
            u(k) = gauss(rng);
        const Eigen::VectorXd V = lin.P * (u / u.lpNorm<Eigen::Infinity>());
        std::vector<double> V0(V.data(), V.data() + ell);
        const double vmax = V.lpNorm<Eigen::Infinity>();
        for (auto& v : V0)
            v *= eps / vmax;
        const double mu_max = lin.eigenvalues.back();
        const DiagonalTrace trace =
            trace_diagonal(sys, lin, V0, s0, detail::probe_horizon(s0, eps, mu_max));
        for (int j = 0; j < ell; ++j)
            rep.random_probes.push_back(detail::probe_from_trace(trace, j, lin.eigenvalues[j], 0));
    }
    return rep;
}

/// Scalar shooting for ell = 2: find the value of the unstable diagonal
/// coordinate V_2(s0) whose trajectory stays inside the shrinking set up
/// to target_s.  The stable coordinate is seeded at s0^{-1/2}, so the
/// answer is a nontrivial function of s0 that decays to zero (the exact
/// branch sits at V = 0).  Bisection on the sign of V_2 at exit or
/// arrival; returns the midpoint of the final bracket of width tol.
inline double shoot_unstable(const ModeSystem& sys, double s0, double target_s, double tol) {
    if (sys.ell != 2)
        throw parameter_error("shoot_unstable: scalar bisection handles ell = 2 only");
    if (!(s0 > 1.0) || !(target_s > s0))
        throw parameter_error("shoot_unstable: need 1 < s0 < target_s");
    if (!(tol > 0.0))
        throw parameter_error("shoot_unstable: need tol > 0");

    const LinearizationMatrix lin = build_Al(sys.gamma, sys.ell);
    const double seed_V1 = 1.0 / std::sqrt(s0);

    const auto exit_side = [&](double x) {
        const DiagonalTrace trace =
            trace_diagonal(sys, lin, {seed_V1, x}, s0, target_s, /*stop_at_bound=*/true);
        return trace.V.back()[1] >= 0.0 ? +1 : -1;
    };

    double lo = -0.9 * shrinking_bound(sys, s0);
    double hi = -lo;
    int side_lo = exit_side(lo);
    int side_hi = exit_side(hi);
    if (side_lo == side_hi)
        throw shooting_error("shoot_unstable: bracket does not straddle the stable manifold");
    if (side_lo > side_hi) {
        std::swap(lo, hi);
        std::swap(side_lo, side_hi);
    }
    while (std::abs(hi - lo) > tol) {
        const double mid = 0.5 * (lo + hi);
        if (exit_side(mid) > 0)
            hi = mid;
        else
            lo = mid;
    }
    return 0.5 * (lo + hi);
}

} // namespace blowup
