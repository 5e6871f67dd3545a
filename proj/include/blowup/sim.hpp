#pragma once

// Time integration of the corotational flow in renormalized variables.
//
// The solution is carried as w(y, s) with u(r, t) = w(r/lambda(t), s(t)),
// ds/dt = 1/lambda^2, on the same log-uniform grid the profile machinery
// uses.  The renormalized equation
//
//     dw/ds = w'' + (d-1)/y w' + (lambda_s/lambda) y w' - (d-1) sin(2w)/(2y^2)
//
// is advanced by a linearly implicit scheme: the radial Laplacian is solved
// implicitly (a constant tridiagonal system in x = log y, factored once per
// step size), while the sine term and the scale drift y w' are explicit.
// Explicit treatment of the sine term costs a stability ceiling on the step,
// ds <= ~2 y_min^2/(d-1), which is why the grid does not reach far below
// y ~ 0.1: the origin only needs the odd-parity closure w(y_0) ~ slope * y_0,
// not resolution.
//
// After every accepted step the state is re-decomposed: Newton iteration on
// (mu, b_1..b_L) drives the projections <L^i (w(mu .) - Q_b), Phi_M> to zero,
// which keeps q = w - Q_b orthogonal to the kernel directions and hands the
// scale bookkeeping to the amplitude b_1 (gauge lambda_s/lambda = -b_1).
// The operator iterates always act on the smooth argument, never on Phi_M
// itself: Phi_M is only finitely smooth across its localization ramp, and
// stencils stacked on it there amplify grid noise without bound.
// Two alternative gauges exist for cross-checking the measured collapse
// rate: a pointwise slope normalization that never touches the decomposition
// (posthoc_fit), and no rescaling at all (fixed_frame).

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "blowup/errors.hpp"
#include "blowup/fits.hpp"
#include "blowup/linop.hpp"
#include "blowup/modes.hpp"
#include "blowup/numerics.hpp"
#include "blowup/profile.hpp"
#include "blowup/qb.hpp"

namespace blowup {

/// Thrown when the Newton decomposition fails to converge: the solution has
/// left the neighbourhood of the profile manifold where (mu, b) is a valid
/// chart.  The message carries the state diagnostics at the point of failure.
struct decomposition_error : numerical_error {
    using numerical_error::numerical_error;
};

/// How the scale lambda is driven during the evolution.
enum class Gauge {
    full_modulation, ///< lambda_s/lambda = -b_1, re-anchored by each decomposition
    posthoc_fit,     ///< lambda pins the near-origin slope; decomposition is diagnostic only
    fixed_frame      ///< no rescaling (lambda = lambda0 throughout); cross-validation at moderate scales
};

inline const char* gauge_name(Gauge g) {
    switch (g) {
    case Gauge::full_modulation: return "full_modulation";
    case Gauge::posthoc_fit: return "posthoc_fit";
    case Gauge::fixed_frame: return "fixed_frame";
    }
    return "?";
}

inline Gauge parse_gauge(const std::string& name) {
    if (name == "full_modulation")
        return Gauge::full_modulation;
    if (name == "posthoc_fit")
        return Gauge::posthoc_fit;
    if (name == "fixed_frame")
        return Gauge::fixed_frame;
    throw parameter_error("parse_gauge: unknown gauge '" + name +
                          "' (expected full_modulation, posthoc_fit or fixed_frame)");
}

/// Everything a run needs, in plain serializable fields.  The defaults are
/// sized for the d = 8 collapse measurement at n = 2048; tests shrink the
/// grid and the stop criteria.
struct SimConfig {
    int d = 8;   ///< ambient dimension (>= 7; the d = 7 first branch needs ell >= 2)
    int ell = 1; ///< branch index used for data admissibility and the target rate
    int L = 2;   ///< number of profile amplitudes carried (1..4)

    /// Support radius of the orthogonality directions.  The projections only
    /// bite where the profile corrections are still localized, which requires
    /// b_1 <= M^{-2/(1+eta)} throughout the run; keep M small enough for the
    /// *initial* b_1 (the amplitude only shrinks from there).
    double M = 3.0;

    std::size_t n = 2048; ///< grid nodes
    double y_min = 0.2;   ///< inner edge; also sets the explicit-sine stability ceiling
    double y_max = 1e5;   ///< outer edge (Dirichlet to the free profile's own value)

    std::vector<double> b0 = {0.08, 0.0}; ///< initial amplitudes, size L; b0[0] sets s0 = c_1/b_1
    double lambda0 = 1.0;                ///< initial frame scale (not 1 only in covariance checks)
    Gauge gauge = Gauge::full_modulation;
    double eta = 0.05; ///< localization width exponent of the approximate profile

    double ds_init = 1e-3;   ///< first trial step in s
    double ds_max = 0.05;    ///< hard ceiling on the step
    double step_rtol = 1e-6; ///< local error control, relative part
    double step_atol = 1e-10;
    double stab_safety = 0.8; ///< fraction of the explicit stability ceiling actually used
    int max_rejects = 25;     ///< consecutive rejections before giving up as stiff

    double newton_tol = 1e-10; ///< orthogonality residual bound, relative to <Phi_M, Lambda Q>
    int newton_max_iter = 12;

    double energy_tol = 1e-8; ///< allowed relative energy increase per accepted step

    double lambda_min = 1e-6; ///< success criterion: collapse scale reached
    double s_max = 1e7;       ///< renormalized-time budget (absolute s)
    std::size_t max_steps = 4'000'000;
    double max_seconds = 0.0; ///< wall-clock budget; 0 disables (keeps runs deterministic)

    double record_lambda_ratio = 0.99; ///< record a sample whenever the scale drops by this factor
    double record_ds_max = 5.0;        ///< ... or s advances this far without one
    std::size_t frames_every = 0;      ///< keep a w snapshot every k-th recorded sample (0 = off)
};

inline void validate_config(const SimConfig& cfg) {
    const auto bad = [](const std::string& what) { throw parameter_error("SimConfig: " + what); };
    if (cfg.L < 1 || cfg.L > 4)
        bad("the correction ladder supports 1 to 4 amplitudes, got L = " + std::to_string(cfg.L));
    if (static_cast<int>(cfg.b0.size()) != cfg.L)
        bad("b0 must carry exactly L = " + std::to_string(cfg.L) + " amplitudes");
    if (cfg.n < 64)
        bad("need at least 64 grid nodes");
    if (!(cfg.M > 0.0))
        bad("M must be positive");
    if (!(cfg.eta > 0.0 && cfg.eta < 1.0))
        bad("eta must lie in (0, 1)");
    if (!(cfg.lambda0 > 0.0))
        bad("lambda0 must be positive");
    if (!(cfg.ds_init > 0.0) || !(cfg.ds_max >= cfg.ds_init))
        bad("need 0 < ds_init <= ds_max");
    if (!(cfg.step_rtol > 0.0) || !(cfg.step_atol > 0.0))
        bad("step tolerances must be positive");
    if (!(cfg.stab_safety > 0.0 && cfg.stab_safety <= 1.0))
        bad("stab_safety must lie in (0, 1]");
    if (cfg.max_rejects < 4)
        bad("max_rejects must be at least 4");
    if (!(cfg.newton_tol > 0.0) || cfg.newton_max_iter < 2)
        bad("need newton_tol > 0 and newton_max_iter >= 2");
    if (!(cfg.energy_tol > 0.0))
        bad("energy_tol must be positive");
    if (!(cfg.lambda_min > 0.0) || !(cfg.lambda_min < cfg.lambda0))
        bad("lambda_min must lie in (0, lambda0)");
    if (!(cfg.s_max > 0.0) || cfg.max_steps == 0)
        bad("need positive s and step budgets");
    if (!(cfg.max_seconds >= 0.0))
        bad("max_seconds must be >= 0");
    if (!(cfg.record_lambda_ratio > 0.0 && cfg.record_lambda_ratio < 1.0))
        bad("record_lambda_ratio must lie in (0, 1)");
    if (!(cfg.record_ds_max > 0.0))
        bad("record_ds_max must be positive");
}

// ---------------------------------------------------------------------------
// Immutable per-run machinery
// ---------------------------------------------------------------------------

/// The expensive, immutable part of a run: profile, operator context,
/// generator/correction ladders, orthogonality directions, and the
/// second-order tridiagonal bands of the radial Laplacian in x = log y
/// used by the implicit solver.  Shared by every state of the run.
struct SimSetup {
    SimConfig cfg;
    std::shared_ptr<const ProfilePack> pack;
    OperatorContext ctx;
    TkFamily tks;
    std::vector<MonomialExpansion> Sks;
    PhiMDirection phi;
    ModeSystem msys;         ///< branch coefficients c_k and spectral constants
    LinearizationMatrix lin; ///< diagonalizing frame for the data admissibility check

    // discrete evolution operator (interior rows 1..n-2 only)
    std::vector<double> lap_lo, lap_di, lap_up; ///< (w_xx + (d-2) w_x)/y^2, centered 2nd order
    std::vector<double> sine_coef;              ///< -(d-1)/(2 y^2): multiplies sin(2w)
    double h = 0.0;
    double inv2h = 0.0;
    double r01 = 0.0;     ///< y_0/y_1, the odd-parity closure ratio at the inner edge
    double wb = 0.0;      ///< Dirichlet value at y_max: the free profile's own value
    double ds_stab = 0.0; ///< explicit-sine stability ceiling (with the safety factor)

    /// b-derivatives of the correction ladder: dS[j-1] holds the nonempty
    /// partials d S_k/d b_j, assembled once and evaluated per Newton iterate.
    std::vector<std::vector<MonomialExpansion>> dS;

    const RadialGrid& grid() const { return *pack->grid; }
};

inline std::shared_ptr<const SimSetup> make_sim_setup(const SimConfig& cfg) {
    validate_config(cfg);
    auto setup = std::make_shared<SimSetup>();
    SimSetup& S = *setup;
    S.cfg = cfg;
    S.msys = make_mode_system(cfg.d, cfg.ell, cfg.L); // enforces 2 ell > gamma and L >= ell
    S.lin = build_Al(S.msys.gamma, cfg.ell);

    auto grid = make_grid(cfg.d, cfg.y_min, cfg.y_max, cfg.n);
    S.pack = std::make_shared<const ProfilePack>(solve_Q(grid));
    S.ctx = make_operator_context(S.pack);
    S.tks = generate_Tk(S.ctx, cfg.L + 1);
    S.Sks = build_Sk(S.ctx, S.tks, cfg.L);
    S.phi = build_PhiM(S.ctx, S.tks, cfg.M, cfg.L);

    const RadialGrid& g = *grid;
    S.dS.resize(static_cast<std::size_t>(cfg.L));
    for (int j = 1; j <= cfg.L; ++j)
        for (int k = 2; k <= cfg.L + 2; ++k) {
            MonomialExpansion p = expansion_partial(S.Sks[static_cast<std::size_t>(k)], j);
            if (!p.terms.empty())
                S.dS[static_cast<std::size_t>(j - 1)].push_back(std::move(p));
        }

    S.h = g.h;
    S.inv2h = 0.5 / g.h;
    S.r01 = g.y[0] / g.y[1];
    S.wb = S.pack->Q.v[g.n - 1];
    S.ds_stab = cfg.stab_safety * 2.0 * g.y_min * g.y_min / (cfg.d - 1.0);

    S.lap_lo.assign(g.n, 0.0);
    S.lap_di.assign(g.n, 0.0);
    S.lap_up.assign(g.n, 0.0);
    S.sine_coef.assign(g.n, 0.0);
    const double ih2 = 1.0 / (g.h * g.h);
    const double adv = (cfg.d - 2.0) * S.inv2h;
    for (std::size_t i = 1; i + 1 < g.n; ++i) {
        const double iy2 = 1.0 / (g.y[i] * g.y[i]);
        S.lap_lo[i] = (ih2 - adv) * iy2;
        S.lap_di[i] = -2.0 * ih2 * iy2;
        S.lap_up[i] = (ih2 + adv) * iy2;
        S.sine_coef[i] = -0.5 * (cfg.d - 1.0) * iy2;
    }
    return setup;
}

// ---------------------------------------------------------------------------
// State
// ---------------------------------------------------------------------------

/// A point of the evolution.  w is the renormalized solution on the grid,
/// q = w(mu .) - Q_b the decomposed remainder, (lambda, b) the chart
/// coordinates.  mu is the leftover scale offset of the last decomposition:
/// identically 1 under full_modulation (it is folded into lambda and w),
/// diagnostic in the other gauges.
struct SimState {
    std::shared_ptr<const SimSetup> setup;
    GridFunction w, q;
    double lambda = 1.0;
    double mu = 1.0;
    std::vector<double> b;
    double s = 0.0; ///< renormalized time
    double t = 0.0; ///< physical time, dt = lambda^2 ds

    // step diagnostics
    double g = 0.0;                ///< gauge rate lambda_s/lambda frozen over the last step
    double ds = 1e-3;              ///< next trial step size
    double dt = 0.0;               ///< physical duration of the last accepted step
    double E = 0.0;                ///< energy of u on the truncated domain
    double maxgrad = 0.0;          ///< max_r |du/dr| = max_y |w_y|/lambda
    std::vector<double> residuals; ///< |<L^i q, Phi_M>| / <Phi_M, Lambda Q> after the last decomposition
    int newton_iters = 0;          ///< iterations the last decomposition needed
    std::size_t steps = 0;
    std::size_t rejected = 0;

    // internal caches: trigonometry at the current w (shared by the explicit
    // stage and the energy quadrature) and the two tridiagonal factorizations
    std::vector<double> sin2w, cos2w;
    struct Factor {
        double ds = -1.0;
        std::vector<double> lo, cp, inv;
    } fac_full, fac_half;
};

/// The scale a run is judged by: the gauge lambda, except in fixed_frame
/// where the motion lives entirely in the decomposition offset mu.
inline double collapse_scale(const SimState& st) {
    return st.setup->cfg.gauge == Gauge::fixed_frame ? st.lambda * st.mu : st.lambda;
}

namespace detail {

constexpr double kAmplitudeFloor = 1e-12; // below this b_1 the correction is dropped entirely

/// Localized profile at amplitudes b, without the bookkeeping copies of the
/// full assembly (this runs inside every Newton iteration).  Below the
/// amplitude floor the localization radius exceeds any practical grid and
/// the profile collapses to Q exactly.
struct LocalProfile {
    double B1 = std::numeric_limits<double>::infinity();
    GridFunction chi; ///< localization values (identically 1 when unlocalized)
    GridFunction Qb;  ///< Q + chi * (sum b_k T_k + sum S_k(b))
};

inline LocalProfile assemble_localized(const SimSetup& S, const std::vector<double>& b) {
    const RadialGrid& g = S.grid();
    LocalProfile prof{std::numeric_limits<double>::infinity(),
                      GridFunction(S.pack->grid, 1.0, 0, 0.0),
                      S.pack->Q};
    if (b[0] < kAmplitudeFloor)
        return prof;

    const double B0 = 1.0 / std::sqrt(b[0]);
    prof.B1 = std::pow(B0, 1.0 + S.cfg.eta);
    if (2.0 * prof.B1 > g.y_max)
        throw parameter_error("assemble_localized: localization radius 2 B1 = " +
                              std::to_string(2.0 * prof.B1) + " leaves the grid (b_1 = " +
                              std::to_string(b[0]) + ")");
    prof.chi = cutoff_field(S.pack->grid, prof.B1);

    std::vector<double> theta(g.n, 0.0);
    for (int k = 1; k <= S.cfg.L; ++k)
        if (b[static_cast<std::size_t>(k - 1)] != 0.0)
            for (std::size_t i = 0; i < g.n; ++i)
                theta[i] += b[static_cast<std::size_t>(k - 1)] * S.tks.T[static_cast<std::size_t>(k)].v[i];
    for (int k = 2; k <= S.cfg.L + 2; ++k) {
        const GridFunction sk = evaluate_expansion(S.pack->grid, S.Sks[static_cast<std::size_t>(k)], b);
        for (std::size_t i = 0; i < g.n; ++i)
            theta[i] += sk.v[i];
    }
    prof.Qb = GridFunction(S.pack->grid, 0.0, 1, 0.0);
    for (std::size_t i = 0; i < g.n; ++i)
        prof.Qb.v[i] = S.pack->Q.v[i] + prof.chi.v[i] * theta[i];
    return prof;
}

/// chi * (T_j + sum_k dS_k/db_j), the profile's b_j-derivative.  The
/// b_1-dependence of the localization radius itself is dropped: its
/// derivative lives on the ramp [B1, 2B1] and only perturbs the Jacobian,
/// never the residual, so the iteration stays a quasi-Newton method with
/// the same fixed point.
inline GridFunction profile_direction(const SimSetup& S, const LocalProfile& prof,
                                      const std::vector<double>& b, int j) {
    const RadialGrid& g = S.grid();
    GridFunction dir = S.tks.T[static_cast<std::size_t>(j)];
    for (const MonomialExpansion& e : S.dS[static_cast<std::size_t>(j - 1)]) {
        const GridFunction part = evaluate_expansion(S.pack->grid, e, b);
        for (std::size_t i = 0; i < g.n; ++i)
            dir.v[i] += part.v[i];
    }
    for (std::size_t i = 0; i < g.n; ++i)
        dir.v[i] *= prof.chi.v[i];
    dir.origin_exponent = 3;
    dir.tail_exponent.reset();
    return dir;
}

inline void refresh_trig(SimState& st) {
    const std::vector<double>& w = st.w.v;
    st.sin2w.resize(w.size());
    st.cos2w.resize(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
        st.sin2w[i] = std::sin(2.0 * w[i]);
        st.cos2w[i] = std::cos(2.0 * w[i]);
    }
}

/// Factor I - ds * Lap with the parity closure w_0 = (y_0/y_1) w_1 as row 0
/// and the Dirichlet row at the top.  Plain Thomas elimination; the matrix
/// is strictly diagonally dominant for any ds > 0 (h < 2/(d-2) always holds
/// on these grids), so no pivoting is needed.
inline void factor_implicit(const SimSetup& S, double ds, SimState::Factor& f) {
    const std::size_t n = S.grid().n;
    f.lo.assign(n, 0.0);
    f.cp.assign(n, 0.0);
    f.inv.assign(n, 0.0);
    f.inv[0] = 1.0;
    f.cp[0] = -S.r01;
    for (std::size_t i = 1; i + 1 < n; ++i) {
        f.lo[i] = -ds * S.lap_lo[i];
        const double den = (1.0 - ds * S.lap_di[i]) - f.lo[i] * f.cp[i - 1];
        f.inv[i] = 1.0 / den;
        f.cp[i] = -ds * S.lap_up[i] * f.inv[i];
    }
    f.inv[n - 1] = 1.0; // Dirichlet row: lo = 0, diagonal 1
    f.ds = ds;
}

/// One linearly implicit substep: explicit sine + scale drift, implicit
/// Laplacian through the prepared factorization.
inline void imex_substep(const SimSetup& S, const std::vector<double>& w,
                         const std::vector<double>& sin2w, double g, double ds,
                         const SimState::Factor& f, std::vector<double>& out,
                         std::vector<double>& rhs) {
    const std::size_t n = S.grid().n;
    rhs.resize(n);
    out.resize(n);
    rhs[0] = 0.0;
    for (std::size_t i = 1; i + 1 < n; ++i)
        rhs[i] = w[i] + ds * (S.sine_coef[i] * sin2w[i] + g * (w[i + 1] - w[i - 1]) * S.inv2h);
    rhs[n - 1] = S.wb;

    out[0] = rhs[0] * f.inv[0];
    for (std::size_t i = 1; i < n; ++i)
        out[i] = (rhs[i] - f.lo[i] * out[i - 1]) * f.inv[i];
    for (std::size_t i = n - 1; i-- > 0;)
        out[i] -= f.cp[i] * out[i + 1];
}

struct EnergyProbe {
    double total = 0.0;    ///< integral of |w_y|^2 + (d-1) sin^2(w)/y^2 against y^{d-1} dy
    double max_grad = 0.0; ///< max_y |w_y|
};

inline EnergyProbe energy_probe(const SimSetup& S, const GridFunction& w,
                                const std::vector<double>& cos2w) {
    const RadialGrid& g = S.grid();
    const GridFunction wy = differentiate(w, 1);
    GridFunction e(S.pack->grid, 0.0, 0, std::nullopt);
    EnergyProbe probe;
    for (std::size_t i = 0; i < g.n; ++i) {
        probe.max_grad = std::max(probe.max_grad, std::abs(wy.v[i]));
        // sin^2(w) = (1 - cos 2w)/2, reusing the cached cosine
        e.v[i] = wy.v[i] * wy.v[i] - S.sine_coef[i] * (1.0 - cos2w[i]);
    }
    probe.total = integral(e);
    return probe;
}

/// Gauge rate of the slope normalization: choose g so the anchor node value
/// is stationary under the discrete right-hand side, g = -F(y_a)/(y w')(y_a).
/// Uses exactly the stepper's own stencils, which makes the pin exact for
/// the discrete dynamics rather than the continuum ones.
inline double slope_gauge_rate(const SimSetup& S, const std::vector<double>& w,
                               const std::vector<double>& sin2w) {
    constexpr std::size_t a = 2; // third node: first row with an untouched stencil
    const double F = S.lap_lo[a] * w[a - 1] + S.lap_di[a] * w[a] + S.lap_up[a] * w[a + 1] +
                     S.sine_coef[a] * sin2w[a];
    const double lam_w = (w[a + 1] - w[a - 1]) * S.inv2h;
    if (!(std::abs(lam_w) > 1e-10))
        throw numerical_error("slope_gauge_rate: the anchor slope vanished; the solution left "
                              "the corotational regularity class");
    return -F / lam_w;
}

/// Projections <L^i f, Phi_M> for i = 0..L.  The operator iterates act on f
/// (assumed smooth); see the header note on Phi_M's limited smoothness.
inline void project_ladder(const SimSetup& S, const GridFunction& f, std::vector<double>& out) {
    out.resize(static_cast<std::size_t>(S.cfg.L) + 1);
    out[0] = inner_product(f, S.phi.Phi);
    GridFunction g = f;
    for (int i = 1; i <= S.cfg.L; ++i) {
        g = apply_L(S.ctx, g);
        out[static_cast<std::size_t>(i)] = inner_product(g, S.phi.Phi);
    }
}

inline std::string state_digest(double s, double mu, const std::vector<double>& b, double res) {
    std::string msg = "s = " + std::to_string(s) + ", mu = " + std::to_string(mu) + ", b = (";
    for (std::size_t i = 0; i < b.size(); ++i)
        msg += (i ? ", " : "") + std::to_string(b[i]);
    return msg + "), residual = " + std::to_string(res);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Decomposition
// ---------------------------------------------------------------------------

/// Jacobian of the projections R_i(mu, b) = <L^i (w(mu .) - Q_b), Phi_M>
/// with respect to (mu, b_1..b_L).  Column 0 is <L^i Lambda[w(mu .)], Phi>/mu
/// (the mu-derivative of the pullback), column j is minus the profile
/// direction projected the same way.  At w = Q, mu = 1, b = 0 the diagonal
/// identities of the direction family make this diag(D, -D, D, ...) with
/// D = <chi_M Lambda Q, Lambda Q>, so |det| = D^{L+1}.
inline Eigen::MatrixXd decompose_jacobian(const SimSetup& S, const GridFunction& w, double mu,
                                          const std::vector<double>& b) {
    const int L = S.cfg.L;
    const GridFunction wres = (mu == 1.0) ? w : resample_logshift(w, mu);
    const GridFunction dmu = lambda_op(wres);
    const detail::LocalProfile prof = detail::assemble_localized(S, b);
    Eigen::MatrixXd J(L + 1, L + 1);
    std::vector<double> col;
    detail::project_ladder(S, dmu, col);
    for (int i = 0; i <= L; ++i)
        J(i, 0) = col[static_cast<std::size_t>(i)] / mu;
    for (int j = 1; j <= L; ++j) {
        const GridFunction dir = detail::profile_direction(S, prof, b, j);
        detail::project_ladder(S, dir, col);
        for (int i = 0; i <= L; ++i)
            J(i, j) = -col[static_cast<std::size_t>(i)];
    }
    return J;
}

/// Newton solve for the chart coordinates: drives every <L^i q, Phi_M> to
/// zero in (mu, b), with q = w(mu .) - Q_b.  Under full_modulation the
/// converged offset is folded into the state (lambda *= mu, w <- w(mu .)),
/// so the stored w is always the decomposed frame; the other gauges keep mu
/// as a diagnostic.  Warm-started from the state's current (mu, b): one or
/// two iterations per step in practice.
inline void decompose(SimState& st) {
    const SimSetup& S = *st.setup;
    const SimConfig& cfg = S.cfg;
    const RadialGrid& g = S.grid();
    const int L = cfg.L;
    const double scale = std::abs(S.phi.pairing);

    double mu = st.mu;
    std::vector<double> b = st.b;
    GridFunction wres = st.w, q = st.w;
    std::vector<double> R(static_cast<std::size_t>(L) + 1, 0.0);
    double res = std::numeric_limits<double>::infinity();
    double best = res;
    int it = 0;

    for (;; ++it) {
        wres = (mu == 1.0) ? st.w : resample_logshift(st.w, mu);
        detail::LocalProfile prof;
        try {
            prof = detail::assemble_localized(S, b);
        } catch (const parameter_error& e) {
            throw decomposition_error(std::string("decompose: ") + e.what() + " at " +
                                      detail::state_digest(st.s, mu, b, res));
        }
        q = GridFunction(S.pack->grid, 0.0, 1, std::nullopt);
        for (std::size_t i = 0; i < g.n; ++i)
            q.v[i] = wres.v[i] - prof.Qb.v[i];
        detail::project_ladder(S, q, R);
        res = 0.0;
        for (int i = 0; i <= L; ++i)
            res = std::max(res, std::abs(R[static_cast<std::size_t>(i)]) / scale);
        if (!std::isfinite(res))
            throw decomposition_error("decompose: projections are not finite at " +
                                      detail::state_digest(st.s, mu, b, res));
        if (res <= cfg.newton_tol)
            break;
        if (it >= cfg.newton_max_iter)
            throw decomposition_error("decompose: no convergence after " +
                                      std::to_string(it) + " iterations at " +
                                      detail::state_digest(st.s, mu, b, res));
        if (it >= 3 && res > 4.0 * best)
            throw decomposition_error("decompose: residual diverging at " +
                                      detail::state_digest(st.s, mu, b, res));
        best = std::min(best, res);

        const Eigen::MatrixXd J = decompose_jacobian(S, st.w, mu, b);
        Eigen::FullPivLU<Eigen::MatrixXd> lu(J);
        if (!lu.isInvertible())
            throw decomposition_error("decompose: singular chart Jacobian at " +
                                      detail::state_digest(st.s, mu, b, res));
        Eigen::VectorXd rhs(L + 1);
        for (int i = 0; i <= L; ++i)
            rhs(i) = -R[static_cast<std::size_t>(i)];
        const Eigen::VectorXd delta = lu.solve(rhs);

        // leash the update: the chart is only trustworthy near the manifold
        double damp = 1.0;
        if (std::abs(delta(0)) > 0.25 * mu)
            damp = std::min(damp, 0.25 * mu / std::abs(delta(0)));
        for (int j = 1; j <= L; ++j) {
            const double cap = std::max(0.5 * std::abs(b[static_cast<std::size_t>(j - 1)]), 0.05);
            if (std::abs(delta(j)) > cap)
                damp = std::min(damp, cap / std::abs(delta(j)));
        }
        mu += damp * delta(0);
        for (int j = 1; j <= L; ++j)
            b[static_cast<std::size_t>(j - 1)] += damp * delta(j);
        b[0] = std::max(b[0], 0.0);
        if (!(mu > 1.0 / 32.0 && mu < 32.0))
            throw decomposition_error("decompose: scale offset left its chart at " +
                                      detail::state_digest(st.s, mu, b, res));
    }

    st.residuals.resize(static_cast<std::size_t>(L) + 1);
    for (int i = 0; i <= L; ++i)
        st.residuals[static_cast<std::size_t>(i)] = std::abs(R[static_cast<std::size_t>(i)]) / scale;
    st.newton_iters = it;
    st.b = std::move(b);
    if (cfg.gauge == Gauge::full_modulation) {
        if (mu != 1.0) {
            st.w = std::move(wres);
            st.lambda *= mu;
        }
        st.mu = 1.0;
    } else {
        st.mu = mu;
    }
    st.q = std::move(q);
}

// ---------------------------------------------------------------------------
// Initial data
// ---------------------------------------------------------------------------

/// Build the state w = Q_b0 + q0 at lambda = lambda0, with the branch clock
/// set by the first amplitude: s0 = c_1/b_1(s0) (so the leading offset
/// vanishes identically).  The amplitudes must lie in the attracting set of
/// the branch: the diagonalized offsets V_k of the first ell amplitudes
/// within 10 s0^{-(eta/2)(1-delta)}, and |b_k| <= s0^{-k} beyond ell.  A raw
/// perturbation q0 (on the setup's own grid, sup-norm at most 0.05) is
/// re-split by one decomposition so the state starts orthogonal.
inline SimState init_data(std::shared_ptr<const SimSetup> setup, const std::vector<double>& b0,
                          const GridFunction* q0 = nullptr) {
    const SimSetup& S = *setup;
    const SimConfig& cfg = S.cfg;
    const int L = cfg.L, ell = cfg.ell;
    if (static_cast<int>(b0.size()) != L)
        throw parameter_error("init_data: expected " + std::to_string(L) + " amplitudes, got " +
                              std::to_string(b0.size()));
    for (double v : b0)
        if (!std::isfinite(v))
            throw parameter_error("init_data: non-finite amplitude");

    double s0 = 1.0; // arbitrary for steady data: nothing sets a branch clock at b = 0
    if (b0[0] == 0.0) {
        for (double v : b0)
            if (v != 0.0)
                throw parameter_error("init_data: b_1 = 0 requires a fully zero amplitude vector");
    } else {
        if (!(b0[0] > 0.0))
            throw parameter_error("init_data: b_1 must be nonnegative");
        // The chart is only invertible while the localization radius of the
        // profile corrections covers the support of the projection direction:
        // B1 = b_1^{-(1+eta)/2} >= M.  Larger amplitudes leave the projections
        // blind to b and the decomposition Jacobian degenerates.
        const double b1_cap = std::pow(cfg.M, -2.0 / (1.0 + cfg.eta));
        if (b0[0] > b1_cap)
            throw parameter_error("init_data: b_1 = " + std::to_string(b0[0]) +
                                  " exceeds the chart bound M^(-2/(1+eta)) = " +
                                  std::to_string(b1_cap) + "; lower b_1 or the direction radius M");
        s0 = S.msys.c[0] / b0[0];
        Eigen::VectorXd U(ell);
        double sk = s0;
        for (int k = 1; k <= ell; ++k, sk *= s0)
            U(k - 1) = sk * b0[static_cast<std::size_t>(k - 1)] - S.msys.c[static_cast<std::size_t>(k - 1)];
        const Eigen::VectorXd V = S.lin.P * U;
        const double bound = shrinking_bound(S.msys, s0);
        for (int k = 1; k <= ell; ++k)
            if (!(std::abs(V(k - 1)) <= bound))
                throw parameter_error("init_data: diagonalized offset V_" + std::to_string(k) +
                                      " = " + std::to_string(V(k - 1)) +
                                      " leaves the attracting set (bound " + std::to_string(bound) +
                                      " at s0 = " + std::to_string(s0) + ")");
        for (int k = ell + 1; k <= L; ++k)
            if (!(std::abs(b0[static_cast<std::size_t>(k - 1)]) <= std::pow(s0, -k)))
                throw parameter_error("init_data: |b_" + std::to_string(k) +
                                      "| exceeds the attracting-set ceiling s0^-" +
                                      std::to_string(k));
    }
    if (q0) {
        if (q0->grid.get() != S.pack->grid.get())
            throw parameter_error("init_data: q0 must live on the setup's own grid");
        if (!(norm_inf(*q0) <= 0.05))
            throw parameter_error("init_data: initial perturbation exceeds the smallness gate "
                                  "(sup |q0| <= 0.05)");
    }

    const detail::LocalProfile prof = detail::assemble_localized(S, b0);
    SimState st;
    st.setup = setup;
    st.w = prof.Qb;
    if (q0)
        for (std::size_t i = 0; i < st.w.size(); ++i)
            st.w.v[i] += q0->v[i];
    st.w.origin_exponent = 1;
    st.w.tail_exponent = 0.0;
    st.q = q0 ? *q0 : GridFunction(S.pack->grid, 0.0, 1, std::nullopt);
    st.lambda = cfg.lambda0;
    st.mu = 1.0;
    st.b = b0;
    st.s = s0;
    st.t = 0.0;
    st.ds = cfg.ds_init;

    const double scale = std::abs(S.phi.pairing);
    detail::project_ladder(S, st.q, st.residuals);
    double worst = 0.0;
    for (int i = 0; i <= L; ++i) {
        st.residuals[static_cast<std::size_t>(i)] =
            std::abs(st.residuals[static_cast<std::size_t>(i)]) / scale;
        worst = std::max(worst, st.residuals[static_cast<std::size_t>(i)]);
    }
    if (worst > cfg.newton_tol)
        decompose(st); // re-split a raw perturbation into (mu, b) + orthogonal remainder

    detail::refresh_trig(st);
    const detail::EnergyProbe probe = detail::energy_probe(S, st.w, st.cos2w);
    st.E = std::pow(st.lambda, cfg.d - 2) * probe.total;
    st.maxgrad = probe.max_grad / st.lambda;
    return st;
}

inline SimState init_data(const SimConfig& cfg) { return init_data(make_sim_setup(cfg), cfg.b0); }

// ---------------------------------------------------------------------------
// Time stepping
// ---------------------------------------------------------------------------

/// Advance one accepted step.  The trial step runs once at ds and twice at
/// ds/2 (sharing the factored systems), the difference drives acceptance and
/// the step controller, and the accepted update is the extrapolated
/// combination 2 w_{h/2} - w_h (second order).  The gauge rate is frozen
/// across the step; afterwards the state is re-decomposed, the energy is
/// recomputed, and any increase beyond energy_tol is a solver fault.
inline void step(SimState& st) {
    const SimSetup& S = *st.setup;
    const SimConfig& cfg = S.cfg;
    const std::size_t n = S.grid().n;
    if (st.sin2w.size() != n)
        detail::refresh_trig(st);

    switch (cfg.gauge) {
    case Gauge::full_modulation:
        st.g = -st.b[0];
        break;
    case Gauge::posthoc_fit:
        st.g = detail::slope_gauge_rate(S, st.w.v, st.sin2w);
        break;
    case Gauge::fixed_frame:
        st.g = 0.0;
        break;
    }

    // stability ceilings: explicit sine (binding) and the explicit drift CFL
    double cap = std::min(S.ds_stab, cfg.ds_max);
    if (st.g != 0.0)
        cap = std::min(cap, 0.25 * S.h / std::abs(st.g));

    std::vector<double> wf, wh, whh, rhs, sin_mid(n);
    double ds = std::min(st.ds, cap);
    double err = 0.0;
    for (int rejects = 0;; ) {
        if (!(ds > 1e-13 * std::max(st.s, 1.0)))
            throw numerical_error("step: step size collapsed at s = " + std::to_string(st.s) +
                                  "; the explicit stage cannot resolve the state (stiffness)");
        if (st.fac_full.ds != ds)
            detail::factor_implicit(S, ds, st.fac_full);
        if (st.fac_half.ds != 0.5 * ds)
            detail::factor_implicit(S, 0.5 * ds, st.fac_half);
        detail::imex_substep(S, st.w.v, st.sin2w, st.g, ds, st.fac_full, wf, rhs);
        detail::imex_substep(S, st.w.v, st.sin2w, st.g, 0.5 * ds, st.fac_half, wh, rhs);
        for (std::size_t i = 0; i < n; ++i)
            sin_mid[i] = std::sin(2.0 * wh[i]);
        detail::imex_substep(S, wh, sin_mid, st.g, 0.5 * ds, st.fac_half, whh, rhs);

        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double sc = cfg.step_atol +
                              cfg.step_rtol * std::max(std::abs(st.w.v[i]), std::abs(whh[i]));
            const double r = (whh[i] - wf[i]) / sc;
            acc += r * r;
        }
        err = std::sqrt(acc / static_cast<double>(n));
        if (std::isfinite(err) && err <= 1.0)
            break;
        ++st.rejected;
        if (++rejects > cfg.max_rejects)
            throw numerical_error("step: " + std::to_string(rejects) +
                                  " consecutive rejections at s = " + std::to_string(st.s) +
                                  " (stiffness)");
        ds *= std::isfinite(err) ? std::clamp(0.9 / std::sqrt(err), 0.1, 0.5) : 0.1;
    }

    const double E_prev = st.E;
    for (std::size_t i = 0; i < n; ++i)
        st.w.v[i] = 2.0 * whh[i] - wf[i];
    ++st.steps;

    const double lam0 = st.lambda;
    st.lambda *= std::exp(st.g * ds);
    st.dt = (st.g == 0.0) ? lam0 * lam0 * ds
                          : lam0 * lam0 * std::expm1(2.0 * st.g * ds) / (2.0 * st.g);
    st.t += st.dt;
    st.s += ds;
    st.ds = std::min(ds * std::clamp(0.9 / std::sqrt(std::max(err, 1e-16)), 0.3, 5.0),
                     cfg.ds_max);

    decompose(st);

    detail::refresh_trig(st);
    const detail::EnergyProbe probe = detail::energy_probe(S, st.w, st.cos2w);
    st.E = std::pow(st.lambda, cfg.d - 2) * probe.total;
    st.maxgrad = probe.max_grad / st.lambda;
    if (st.E > E_prev + cfg.energy_tol * std::max({std::abs(E_prev), std::abs(st.E), 1.0}))
        throw numerical_error("step: energy increased across an accepted step (E " +
                              std::to_string(E_prev) + " -> " + std::to_string(st.E) +
                              " at s = " + std::to_string(st.s) + "); solver fault");
}

/// Iterated-operator norms of the remainder: returns the integrals of
/// |L^m q|^2 for m = 0..m_max.  Capped at m_max = 2; further iterates of
/// the fourth-order stencils amplify grid noise beyond usefulness.
inline std::vector<double> sobolev_diagnostics(const SimState& st, int m_max = 2) {
    if (m_max < 0 || m_max > 2)
        throw parameter_error("sobolev_diagnostics: m_max must lie in [0, 2]");
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(m_max) + 1);
    GridFunction f = st.q;
    out.push_back(inner_product(f, f));
    for (int m = 1; m <= m_max; ++m) {
        f = apply_L(st.setup->ctx, f);
        out.push_back(inner_product(f, f));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Rate extraction
// ---------------------------------------------------------------------------

/// Power-law fit lambda ~ prefactor * (T - t)^exponent near collapse.
struct RateFit {
    double T = 0.0;
    double exponent = 0.0;
    double exponent_sigma = 0.0; ///< OLS standard error of the exponent
    double prefactor = 0.0;
    double rms = 0.0;          ///< log-residual of the straight line at the chosen T
    double window_decades = 0; ///< decades of lambda actually inside the fit window
    std::size_t used = 0;
};

/// Fit the collapse time and rate from trajectory samples: scan T on a log
/// ladder above the last sample (coarse grid, then golden-section), scoring
/// each candidate by the residual of the log lambda vs log(T - t) line, and
/// report the best line.  Restricted to the final `decades` decades of
/// lambda.  Everything is scale-covariant: rescaling t by mu^2 and lambda
/// by mu shifts the fit exactly.
inline RateFit fit_blowup_rate(const std::vector<double>& ts, const std::vector<double>& lams,
                               double decades = 2.0) {
    if (ts.size() != lams.size())
        throw parameter_error("fit_blowup_rate: t and lambda lengths differ");
    std::vector<double> t, l;
    t.reserve(ts.size());
    l.reserve(ts.size());
    for (std::size_t i = 0; i < ts.size(); ++i) {
        if (!(lams[i] > 0.0) || !std::isfinite(ts[i]))
            continue;
        if (!t.empty() && !(ts[i] > t.back()))
            continue;
        t.push_back(ts[i]);
        l.push_back(lams[i]);
    }
    if (t.size() < 8)
        throw numerical_error("fit_blowup_rate: need at least 8 usable samples");

    const double l_hi = l.back() * std::pow(10.0, decades);
    std::size_t first = 0;
    while (first < l.size() && l[first] > l_hi)
        ++first;
    if (t.size() - first < 8)
        first = t.size() - 8;
    const std::vector<double> tw(t.begin() + static_cast<std::ptrdiff_t>(first), t.end());
    std::vector<double> lw(l.begin() + static_cast<std::ptrdiff_t>(first), l.end());
    for (double& v : lw)
        v = std::log(v);
    const double span = tw.back() - tw.front();
    if (!(span > 0.0))
        throw numerical_error("fit_blowup_rate: degenerate time window");

    std::vector<double> x(tw.size());
    const auto objective = [&](double u) {
        const double T = tw.back() + std::exp(u);
        for (std::size_t i = 0; i < tw.size(); ++i)
            x[i] = std::log(T - tw[i]);
        return fit_line(x, lw).rms;
    };

    // coarse scan of u = log(T - t_end) over 10 orders, then golden-section
    const double ulo = std::log(span) - 18.42; // gap down to 1e-8 of the window
    const double uhi = std::log(span) + 2.31;  // up to 10x the window
    constexpr int kCoarse = 48;
    double best_u = ulo, best_f = std::numeric_limits<double>::infinity();
    for (int i = 0; i < kCoarse; ++i) {
        const double u = ulo + (uhi - ulo) * i / (kCoarse - 1);
        const double f = objective(u);
        if (f < best_f) {
            best_f = f;
            best_u = u;
        }
    }
    const double du = (uhi - ulo) / (kCoarse - 1);
    double a = best_u - du, bb = best_u + du;
    const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
    double u1 = bb - gr * (bb - a), u2 = a + gr * (bb - a);
    double f1 = objective(u1), f2 = objective(u2);
    for (int i = 0; i < 72; ++i) {
        if (f1 < f2) {
            bb = u2;
            u2 = u1;
            f2 = f1;
            u1 = bb - gr * (bb - a);
            f1 = objective(u1);
        } else {
            a = u1;
            u1 = u2;
            f1 = f2;
            u2 = a + gr * (bb - a);
            f2 = objective(u2);
        }
    }
    const double u_star = 0.5 * (a + bb);

    RateFit out;
    out.T = tw.back() + std::exp(u_star);
    for (std::size_t i = 0; i < tw.size(); ++i)
        x[i] = std::log(out.T - tw[i]);
    const LineFit line = fit_line(x, lw);
    out.exponent = line.slope;
    out.prefactor = std::exp(line.intercept);
    out.rms = line.rms;
    out.used = tw.size();
    out.window_decades = (lw.front() - lw.back()) / std::log(10.0);
    double mx = 0.0, sxx = 0.0;
    for (double v : x)
        mx += v;
    mx /= static_cast<double>(x.size());
    for (double v : x)
        sxx += (v - mx) * (v - mx);
    const double nn = static_cast<double>(x.size());
    out.exponent_sigma =
        (nn > 2.0 && sxx > 0.0) ? line.rms * std::sqrt(nn / ((nn - 2.0) * sxx)) : 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// Full collapse runs
// ---------------------------------------------------------------------------

/// Recorded samples of a run, column per quantity (b[j] is the column of
/// amplitude j+1).  `lambda` is the collapse scale of the run's gauge.
struct SimTrajectory {
    std::vector<double> t, s, lambda, E, E2, maxgrad;
    std::vector<std::vector<double>> b;

    std::size_t rows() const { return t.size(); }
};

/// Outcome summary of a collapse run.
struct RateReport {
    bool blew_up = false;
    std::string stop_reason;
    std::string gauge;
    double T = std::numeric_limits<double>::quiet_NaN();
    double exponent = std::numeric_limits<double>::quiet_NaN();
    double exponent_sigma = std::numeric_limits<double>::quiet_NaN();
    double prefactor = std::numeric_limits<double>::quiet_NaN();
    double fit_rms = std::numeric_limits<double>::quiet_NaN();
    double fit_decades = 0.0;
    double target_exponent = 0.0; ///< ell/gamma, the branch's t-exponent of lambda
    double b1s_over_c1 = std::numeric_limits<double>::quiet_NaN();
    double indicator_growth = std::numeric_limits<double>::quiet_NaN();
    double lambda_end = 0.0, s_end = 0.0, t_end = 0.0;
    std::size_t steps = 0, rejected = 0, samples = 0;
};

struct RunResult {
    SimTrajectory traj;
    RateReport rate;
    SimState state; ///< final state (shares the setup)
    std::vector<std::pair<double, GridFunction>> frames; ///< (s, w) snapshots when requested
};

/// Integrate until the collapse scale reaches lambda_min (blowup) or a
/// budget runs out (reported, not thrown).  On success the blowup time T
/// and the t-exponent of lambda are fitted on the final two decades of the
/// scale, the branch law is cross-checked through b_1(s) s / c_1, and the
/// type-II indicator sqrt(T - t) max|du/dr| is summarized by its overall
/// growth factor.
inline RunResult run_blowup(std::shared_ptr<const SimSetup> setup, const std::vector<double>& b0,
                            const GridFunction* q0 = nullptr) {
    const SimSetup& S = *setup;
    const SimConfig& cfg = S.cfg;
    RunResult out;
    SimState st = init_data(setup, b0, q0);
    const auto t_begin = std::chrono::steady_clock::now();

    SimTrajectory& traj = out.traj;
    traj.b.resize(static_cast<std::size_t>(cfg.L));
    double rec_scale = std::numeric_limits<double>::infinity();
    double rec_s = -std::numeric_limits<double>::infinity();
    const auto record = [&](bool force) {
        const double sc = collapse_scale(st);
        if (!force && sc > rec_scale * cfg.record_lambda_ratio && st.s - rec_s < cfg.record_ds_max)
            return;
        if (st.s == rec_s)
            return; // the final forced record can coincide with the last trigger
        traj.t.push_back(st.t);
        traj.s.push_back(st.s);
        traj.lambda.push_back(sc);
        traj.E.push_back(st.E);
        traj.E2.push_back(sobolev_diagnostics(st, 1)[1]);
        traj.maxgrad.push_back(st.maxgrad);
        for (int j = 0; j < cfg.L; ++j)
            traj.b[static_cast<std::size_t>(j)].push_back(st.b[static_cast<std::size_t>(j)]);
        if (cfg.frames_every > 0 && (traj.rows() - 1) % cfg.frames_every == 0)
            out.frames.emplace_back(st.s, st.w);
        rec_scale = sc;
        rec_s = st.s;
    };
    record(true);

    bool blew_up = false;
    std::string reason;
    for (;;) {
        if (collapse_scale(st) <= cfg.lambda_min) {
            blew_up = true;
            reason = "reached lambda_min";
            break;
        }
        if (st.s >= cfg.s_max) {
            reason = "s budget exhausted without collapse";
            break;
        }
        if (st.steps >= cfg.max_steps) {
            reason = "step budget exhausted without collapse";
            break;
        }
        if (cfg.max_seconds > 0.0) {
            const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - t_begin;
            if (elapsed.count() > cfg.max_seconds) {
                reason = "wall-clock budget exhausted without collapse";
                break;
            }
        }
        step(st);
        record(false);
    }
    record(true);

    RateReport& r = out.rate;
    r.blew_up = blew_up;
    r.stop_reason = reason;
    r.gauge = gauge_name(cfg.gauge);
    r.target_exponent = cfg.ell / S.msys.gamma;
    r.lambda_end = collapse_scale(st);
    r.s_end = st.s;
    r.t_end = st.t;
    r.steps = st.steps;
    r.rejected = st.rejected;
    r.samples = traj.rows();
    r.b1s_over_c1 = st.b[0] * st.s / S.msys.c[0];
    if (blew_up) {
        const RateFit fit = fit_blowup_rate(traj.t, traj.lambda, 2.0);
        r.T = fit.T;
        r.exponent = fit.exponent;
        r.exponent_sigma = fit.exponent_sigma;
        r.prefactor = fit.prefactor;
        r.fit_rms = fit.rms;
        r.fit_decades = fit.window_decades;
        if (traj.maxgrad.front() > 0.0 && fit.T > traj.t.front())
            r.indicator_growth = std::sqrt(fit.T - traj.t.back()) * traj.maxgrad.back() /
                                 (std::sqrt(fit.T - traj.t.front()) * traj.maxgrad.front());
    }
    out.state = std::move(st);
    return out;
}

inline RunResult run_blowup(const SimConfig& cfg) { return run_blowup(make_sim_setup(cfg), cfg.b0); }

} // namespace blowup
