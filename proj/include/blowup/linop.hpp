#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "blowup/errors.hpp"
#include "blowup/numerics.hpp"
#include "blowup/profile.hpp"

namespace blowup {

/// Coefficient tables for the linearized operator and its factorization,
/// precomputed once per profile so the apply_* calls stay allocation-light.
///   A  = -d/dy + V/y          (annihilates Lambda Q)
///   A* =  d/dy + (d-1+V)/y    (L^2(y^{d-1}dy) adjoint of A)
///   L  = A* A = -Delta_rad + Z/y^2
///   L~ = A A* = -Delta_rad + Z~/y^2
struct OperatorContext {
    std::shared_ptr<const ProfilePack> pack;
    std::vector<double> y2;      ///< y^2
    std::vector<double> ydm1;    ///< y^{d-1}
    std::vector<double> Voy;     ///< V / y
    std::vector<double> Aoy;     ///< (d-1+V) / y
    std::vector<double> Zoy2;    ///< Z / y^2
    std::vector<double> Ztoy2;   ///< Z~ / y^2

    const RadialGrid& grid() const { return *pack->grid; }
    int d() const { return pack->d; }
    double gamma() const { return pack->gamma; }
};

inline OperatorContext make_operator_context(std::shared_ptr<const ProfilePack> pack) {
    if (!pack)
        throw parameter_error("make_operator_context: null profile pack");
    OperatorContext ctx;
    ctx.pack = std::move(pack);
    const RadialGrid& g = *ctx.pack->grid;
    ctx.y2.resize(g.n);
    ctx.ydm1.resize(g.n);
    ctx.Voy.resize(g.n);
    ctx.Aoy.resize(g.n);
    ctx.Zoy2.resize(g.n);
    ctx.Ztoy2.resize(g.n);
    for (std::size_t i = 0; i < g.n; ++i) {
        const double y = g.y[i];
        ctx.y2[i] = y * y;
        ctx.ydm1[i] = std::pow(y, g.d - 1);
        ctx.Voy[i] = ctx.pack->V.v[i] / y;
        ctx.Aoy[i] = (g.d - 1.0 + ctx.pack->V.v[i]) / y;
        ctx.Zoy2[i] = ctx.pack->Z.v[i] / ctx.y2[i];
        ctx.Ztoy2[i] = ctx.pack->Ztilde.v[i] / ctx.y2[i];
    }
    return ctx;
}

namespace detail {

/// Origin/tail bookkeeping for first-order factors: the output exponent
/// drops by one unless the leading coefficient cancels, in which case the
/// next term (two powers up) takes over.
inline int first_order_origin(int p, double coef) {
    return (coef == 0.0) ? p + 1 : p - 1;
}

inline std::optional<double> first_order_tail(const std::optional<double>& q, double shift) {
    if (!q)
        return std::nullopt;
    const double coef = *q + shift;
    return (std::abs(coef) < 1e-12) ? *q - 2.0 : *q - 1.0;
}

} // namespace detail

/// A f = -f' + (V/y) f = (V f - Lambda f)/y.
inline GridFunction apply_A(const OperatorContext& ctx, const GridFunction& f) {
    require_same_grid(f, ctx.pack->V, "apply_A");
    auto lf = lambda_op(f);
    GridFunction out(f.grid);
    const RadialGrid& g = ctx.grid();
    for (std::size_t i = 0; i < g.n; ++i)
        out.v[i] = (ctx.pack->V.v[i] * f.v[i] - lf.v[i]) / g.y[i];
    // A(c y^p) = (1 - p) c y^{p-1} + ... near 0;  (-q - gamma) c y^{q-1} at inf
    out.origin_exponent = detail::first_order_origin(f.origin_exponent,
                                                     1.0 - f.origin_exponent);
    out.tail_exponent = detail::first_order_tail(f.tail_exponent, ctx.gamma());
    return out;
}

/// A* f = f' + ((d-1+V)/y) f = (Lambda f + (d-1+V) f)/y.
inline GridFunction apply_Astar(const OperatorContext& ctx, const GridFunction& f) {
    require_same_grid(f, ctx.pack->V, "apply_Astar");
    auto lf = lambda_op(f);
    GridFunction out(f.grid);
    const RadialGrid& g = ctx.grid();
    for (std::size_t i = 0; i < g.n; ++i)
        out.v[i] = (lf.v[i] + (g.d - 1.0 + ctx.pack->V.v[i]) * f.v[i]) / g.y[i];
    out.origin_exponent = detail::first_order_origin(f.origin_exponent,
                                                     f.origin_exponent + ctx.d());
    out.tail_exponent = detail::first_order_tail(
        f.tail_exponent, static_cast<double>(ctx.d()) - 1.0 - ctx.gamma());
    return out;
}

namespace detail {

/// Shared second-order core:  out = (-f_xx - (d-2) f_x)/y^2 + pot2 * f,
/// where pot2 is Z/y^2 or Z~/y^2.
inline GridFunction second_order_apply(const OperatorContext& ctx, const GridFunction& f,
                                       const std::vector<double>& pot2) {
    const RadialGrid& g = ctx.grid();
    std::vector<double> fx, fxx;
    x_derivatives(f, &fx, &fxx);
    GridFunction out(f.grid);
    for (std::size_t i = 0; i < g.n; ++i)
        out.v[i] = (-fxx[i] - (g.d - 2.0) * fx[i]) / ctx.y2[i] + pot2[i] * f.v[i];
    return out;
}

} // namespace detail

/// L f = -f'' - (d-1)/y f' + Z/y^2 f.
inline GridFunction apply_L(const OperatorContext& ctx, const GridFunction& f) {
    require_same_grid(f, ctx.pack->V, "apply_L");
    GridFunction out = detail::second_order_apply(ctx, f, ctx.Zoy2);
    const int p = f.origin_exponent;
    // leading coefficient -(p-1)(p+d-1) vanishes on the kernel exponents
    out.origin_exponent = (p == 1 || p == 1 - ctx.d()) ? p : p - 2;
    if (f.tail_exponent)
        out.tail_exponent = *f.tail_exponent - 2.0;
    return out;
}

/// L~ f = -f'' - (d-1)/y f' + Z~/y^2 f  (the conjugated operator A A*).
inline GridFunction apply_Ltilde(const OperatorContext& ctx, const GridFunction& f) {
    require_same_grid(f, ctx.pack->V, "apply_Ltilde");
    GridFunction out = detail::second_order_apply(ctx, f, ctx.Ztoy2);
    const int p = f.origin_exponent;
    // leading coefficient vanishes at p = 2 and p = -d
    out.origin_exponent = (p == 2 || p == -ctx.d()) ? p : p - 2;
    if (f.tail_exponent)
        out.tail_exponent = *f.tail_exponent - 2.0;
    return out;
}

/// Solve L w = f for the regular branch (w ~ y^{p+2} at the origin, no
/// kernel admixture) via the double quadrature
///   A w (y) = y^{1-d} (Lambda Q)^{-1} ∫_0^y f Lambda Q x^{d-1} dx,
///   w (y)   = -Lambda Q ∫_0^y (A w / Lambda Q) dx.
inline GridFunction invert_L(const OperatorContext& ctx, const GridFunction& f) {
    require_same_grid(f, ctx.pack->V, "invert_L");
    const RadialGrid& g = ctx.grid();
    const GridFunction& LamQ = ctx.pack->LamQ;

    GridFunction inner(f.grid, 0.0, f.origin_exponent + ctx.d(),
                       f.tail_exponent ? std::optional<double>(*f.tail_exponent + ctx.d() - 1.0 -
                                                               ctx.gamma())
                                       : std::nullopt);
    for (std::size_t i = 0; i < g.n; ++i)
        inner.v[i] = f.v[i] * LamQ.v[i] * ctx.ydm1[i];
    auto G1 = cumulative_from_zero(inner);

    GridFunction ratio(f.grid, 0.0, f.origin_exponent, std::nullopt);
    for (std::size_t i = 0; i < g.n; ++i)
        ratio.v[i] = G1.v[i] / (ctx.ydm1[i] * LamQ.v[i] * LamQ.v[i]);
    auto G2 = cumulative_from_zero(ratio);

    GridFunction w(f.grid, 0.0, f.origin_exponent + 2,
                   f.tail_exponent ? std::optional<double>(*f.tail_exponent + 2.0)
                                   : std::nullopt);
    for (std::size_t i = 0; i < g.n; ++i) {
        w.v[i] = -LamQ.v[i] * G2.v[i];
        if (!std::isfinite(w.v[i]))
            throw numerical_error("invert_L: overflow at y = " + std::to_string(g.y[i]));
    }
    return w;
}

// ---------------------------------------------------------------------------
// The T_k ladder
// ---------------------------------------------------------------------------

/// T_0 = Lambda Q and T_{k+1} = -L^{-1} T_k, so that L T_{k+1} = -T_k and
/// T_k grows like y^{2k - gamma}.  The roundtrip residuals record how well
/// the discrete L undoes the discrete inversion (inner 90% of the grid,
/// relative to the local |T_k|).
struct TkFamily {
    std::vector<GridFunction> T;          ///< T[0..K]
    std::vector<double> roundtrip_resid;  ///< index k: residual of L T_{k+1} = -T_k
    std::vector<double> measured_tail;    ///< fitted tail exponent of T_k
};

inline TkFamily generate_Tk(const OperatorContext& ctx, int K) {
    if (K < 0 || K > 8)
        throw parameter_error("generate_Tk: K out of range");
    const RadialGrid& g = ctx.grid();
    TkFamily fam;
    fam.T.reserve(K + 1);
    GridFunction T0 = ctx.pack->LamQ;
    fam.T.push_back(T0);
    // fit over the last half decade: the subleading tail correction decays
    // like y^{-(d-2-2 gamma)}, which for d = 7 is a slow 1/y that would bias
    // a wider fit window beyond the advertised accuracy
    fam.measured_tail.push_back(measure_tail_exponent(T0, 0.5).slope);
    for (int k = 0; k < K; ++k) {
        GridFunction next = -1.0 * invert_L(ctx, fam.T.back());
        next.origin_exponent = 2 * (k + 1) + 1;
        next.tail_exponent = 2.0 * (k + 1) - ctx.gamma();
        fam.measured_tail.push_back(measure_tail_exponent(next, 0.5).slope);

        auto back = apply_L(ctx, next);
        double worst = 0.0;
        for (std::size_t i = 4; i < g.n; ++i) {
            if (g.y[i] > g.y_max * 0.79) // inner 90% of the log range
                break;
            const double denom = std::abs(fam.T.back().v[i]) + 1e-300;
            worst = std::max(worst, std::abs(back.v[i] + fam.T.back().v[i]) / denom);
        }
        fam.roundtrip_resid.push_back(worst);
        fam.T.push_back(std::move(next));
    }
    return fam;
}

// ---------------------------------------------------------------------------
// Localized orthogonality direction Phi_M
// ---------------------------------------------------------------------------

/// Phi_M = chi_M Lambda Q + sum_{k=1}^L c_k L^k((chi_M - 1) Lambda Q),
/// with the c_k chosen so that <Phi_M, T_k> = 0 for k = 1..L.  Using
/// (chi_M - 1) Lambda Q in the iterated terms keeps them supported in
/// [M, 2M] (L^k of the untruncated Lambda Q vanishes identically), which
/// avoids amplifying origin noise.  By L-self-adjointness the family then
/// satisfies <L^i T_k, Phi_M> = (-1)^k <chi_M Lambda Q, Lambda Q> delta_{ik}.
struct PhiMDirection {
    double M = 0.0;
    int L = 0;
    std::vector<double> c;      ///< c[0] = 1, then c_1..c_L
    GridFunction Phi;
    double denom = 0.0;         ///< <chi_M Lambda Q, Lambda Q>
    double pairing = 0.0;       ///< measured <Phi, Lambda Q>; the normalization
                                ///< actually realized by the diagonal identities
    std::vector<double> ortho;  ///< achieved |<Phi, T_k>|/pairing, k = 1..L
};

inline PhiMDirection build_PhiM(const OperatorContext& ctx, const TkFamily& tks, double M,
                                int L, int cutoff_degree = 7) {
    const RadialGrid& g = ctx.grid();
    if (L < 0 || L + 1 > static_cast<int>(tks.T.size()))
        throw parameter_error("build_PhiM: need T_0..T_L in the family");
    if (2.0 * M > g.y_max)
        throw parameter_error("build_PhiM: cutoff support [M, 2M] leaves the grid");

    auto zero_beyond_support = [&](GridFunction& f) {
        for (std::size_t i = 0; i < g.n; ++i)
            if (g.y[i] > 2.0 * M)
                f.v[i] = 0.0;
    };

    auto chi = cutoff_field(ctx.pack->grid, M, cutoff_degree);
    // g_0 = chi Lambda Q;  g_k = L^k((chi - 1) Lambda Q) for k >= 1
    std::vector<GridFunction> basis;
    basis.reserve(L + 1);
    GridFunction g0 = chi * ctx.pack->LamQ;
    g0.origin_exponent = 1;
    g0.tail_exponent.reset();
    zero_beyond_support(g0);
    basis.push_back(g0);
    if (L >= 1) {
        GridFunction ring(ctx.pack->grid, 0.0, 1, std::nullopt);
        for (std::size_t i = 0; i < g.n; ++i)
            ring.v[i] = (chi.v[i] - 1.0) * ctx.pack->LamQ.v[i];
        // supported in [M, 2M]: origin metadata is irrelevant (values are 0)
        GridFunction iter = ring;
        for (int k = 1; k <= L; ++k) {
            iter = apply_L(ctx, iter);
            zero_beyond_support(iter);
            iter.origin_exponent = 1;
            iter.tail_exponent.reset();
            basis.push_back(iter);
        }
    }

    PhiMDirection phi;
    phi.M = M;
    phi.L = L;
    phi.denom = inner_product(g0, ctx.pack->LamQ);
    if (!(phi.denom > 0.0))
        throw numerical_error("build_PhiM: <chi Lambda Q, Lambda Q> must be positive");

    phi.c.assign(L + 1, 0.0);
    phi.c[0] = 1.0;

    // Node values combine pieces whose magnitudes are far apart (|c_k| grows
    // like M^{2k} against shrinking iterates), so sum them in extended
    // precision; the rounded result then carries only O(eps |Phi|) noise.
    auto assemble = [&]() {
        phi.Phi = GridFunction(ctx.pack->grid, 0.0, 1, std::nullopt);
        for (std::size_t i = 0; i < g.n; ++i) {
            long double acc = basis[0].v[i];
            for (int j = 1; j <= L; ++j)
                acc += static_cast<long double>(phi.c[j]) * basis[j].v[i];
            phi.Phi.v[i] = static_cast<double>(acc);
        }
        zero_beyond_support(phi.Phi);
    };

    if (L >= 1) {
        Eigen::MatrixXd A(L, L);
        for (int k = 1; k <= L; ++k)
            for (int j = 1; j <= L; ++j)
                A(k - 1, j - 1) = inner_product(basis[j], tks.T[k]);
        Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
        if (!lu.isInvertible())
            throw numerical_error("build_PhiM: orthogonality system is singular");

        auto residuals = [&]() {
            Eigen::VectorXd r(L);
            for (int k = 1; k <= L; ++k)
                r(k - 1) = inner_product(phi.Phi, tks.T[k]);
            return r;
        };

        // The entries span many orders of magnitude (|c_k| grows like M^{2k}),
        // so a single LU solve leaves residuals far above roundoff.  Refine
        // against the actual grid functionals, keeping the best iterate.
        assemble();
        std::vector<double> best_c = phi.c;
        double best = std::numeric_limits<double>::infinity();
        for (int pass = 0; pass < 6; ++pass) {
            Eigen::VectorXd r = residuals();
            const double score = r.lpNorm<Eigen::Infinity>();
            if (score < best) {
                best = score;
                best_c = phi.c;
            }
            if (score <= 1e-13 * phi.denom)
                break;
            Eigen::VectorXd delta = lu.solve(-r);
            for (int j = 1; j <= L; ++j)
                phi.c[j] += delta(j - 1);
            assemble();
        }
        phi.c = best_c;
        assemble();

        // Refinement stalls at the rounding granularity of the assembled
        // field, which for the highest condition sits above the target: the
        // residual as a function of the last coefficient's ULP lattice is a
        // small linear drift plus roundoff jitter.  Scan that lattice, re-
        // zeroing the lower conditions each time, and keep the best offset.
        const double target = 1e-9 * phi.denom;
        if (best > target && L >= 1) {
            Eigen::FullPivLU<Eigen::MatrixXd> lusub;
            if (L >= 2)
                lusub.compute(A.topLeftCorner(L - 1, L - 1));
            const double base_cL = best_c[L];
            double best_cL = base_cL;
            std::vector<double> best_sub(best_c.begin(), best_c.end());
            for (int off = -250; off <= 250; ++off) {
                phi.c = best_c;
                phi.c[L] = base_cL + off * std::abs(base_cL) * 1.1e-16;
                assemble();
                for (int pass = 0; pass < 2 && L >= 2; ++pass) {
                    Eigen::VectorXd r = residuals();
                    Eigen::VectorXd delta = lusub.solve(-r.head(L - 1));
                    for (int j = 1; j <= L - 1; ++j)
                        phi.c[j] += delta(j - 1);
                    assemble();
                }
                const double score = residuals().lpNorm<Eigen::Infinity>();
                if (score < best) {
                    best = score;
                    best_cL = phi.c[L];
                    best_sub = phi.c;
                }
                if (best <= target)
                    break;
            }
            phi.c = best_sub;
            phi.c[L] = best_cL;
            assemble();
        }
    } else {
        assemble();
    }

    phi.pairing = inner_product(phi.Phi, ctx.pack->LamQ);
    if (!(std::abs(phi.pairing) > 0.0))
        throw numerical_error("build_PhiM: <Phi, Lambda Q> vanished");
    phi.ortho.clear();
    for (int k = 1; k <= L; ++k)
        phi.ortho.push_back(std::abs(inner_product(phi.Phi, tks.T[k])) / std::abs(phi.pairing));
    return phi;
}

/// Residual of the commutator identity L(Lambda f) = Lambda(L f) + 2 L f
/// - (Lambda Z / y^2) f, normalized by the larger side, interior nodes only.
/// Uses the closed form Lambda Z = -2 (d-1) sin(2Q) Lambda Q.
inline double lambda_commutator_check(const OperatorContext& ctx, const GridFunction& f) {
    const RadialGrid& g = ctx.grid();
    auto lhs = apply_L(ctx, lambda_op(f));
    auto Lf = apply_L(ctx, f);
    auto rhs = lambda_op(Lf);
    double scale = 0.0, worst = 0.0;
    std::vector<double> rv(g.n);
    for (std::size_t i = 0; i < g.n; ++i) {
        const double lamZ = -2.0 * (g.d - 1.0) * std::sin(2.0 * ctx.pack->Q.v[i]) *
                            ctx.pack->LamQ.v[i];
        rv[i] = rhs.v[i] + 2.0 * Lf.v[i] - lamZ / ctx.y2[i] * f.v[i];
        scale = std::max({scale, std::abs(lhs.v[i]), std::abs(rv[i])});
    }
    const std::size_t skip = g.n / 20; // 5% margin at both ends
    for (std::size_t i = skip; i + skip < g.n; ++i)
        worst = std::max(worst, std::abs(lhs.v[i] - rv[i]));
    return worst / (scale + 1e-300);
}

// ---------------------------------------------------------------------------
// Coercivity probe
// ---------------------------------------------------------------------------

/// Monte-Carlo lower-bound probe for the weighted coercivity of L^{k+1}
/// under the orthogonality constraints <f, L^m Phi_M> = 0, 0 <= m <= k-hbar.
/// Each sample is a sum of three C^inf log-space Gaussian bumps, windowed
/// away from both grid ends, projected onto the constraint set; the
/// reported ratio is
///   ||L^{k+1} f||^2 / { ||A L^k f / y||^2
///                       + sum_m ||L^m f||^2 weighted by y^-4 (1+y^{4(k-m)})^-1
///                       + sum_m ||A L^m f||^2 weighted by y^-6 (1+y^{4(k-m-1)})^-1 }.
struct CoercivityReport {
    double min_ratio = 0.0;
    std::vector<double> ratios;
};

inline CoercivityReport coercivity_probe(const OperatorContext& ctx, const PhiMDirection& phi,
                                         int k, int nsamples, unsigned seed) {
    const RadialGrid& g = ctx.grid();
    const int hbar = ctx.pack->hbar;
    if (k < 0 || k > 4)
        throw parameter_error("coercivity_probe: k out of range");
    const int mc = k - hbar; // constraints m = 0..mc (none if negative)

    // window: C^inf ramps between [a, 2a] and [b, 2b]
    const double a = 4.0 * g.y_min;
    const double b = std::min(2.0 * phi.M, g.y_max / 20.0);
    GridFunction window(ctx.pack->grid, 0.0, 3, std::nullopt);
    for (std::size_t i = 0; i < g.n; ++i) {
        const double up = smoothstep(std::log(g.y[i] / a) / std::log(2.0));
        const double dn = 1.0 - smoothstep(std::log(g.y[i] / b) / std::log(2.0));
        window.v[i] = up * dn;
    }

    // correction directions for the projection: windowed T_j
    std::vector<GridFunction> dirs;
    for (int j = 0; j <= std::max(mc, 0); ++j) {
        if (mc < 0)
            break;
        GridFunction u = window;
        for (std::size_t i = 0; i < g.n; ++i)
            u.v[i] *= (j == 0 ? ctx.pack->LamQ.v[i] : std::pow(g.y[i], 2 * j) *
                                                          ctx.pack->LamQ.v[i]);
        u.origin_exponent = 3;
        dirs.push_back(std::move(u));
    }

    auto iterate_L = [&](const GridFunction& f, int times) {
        GridFunction out = f;
        for (int m = 0; m < times; ++m)
            out = apply_L(ctx, out);
        return out;
    };

    auto constraint_values = [&](const GridFunction& f) {
        std::vector<double> c;
        GridFunction it = f;
        for (int m = 0; m <= mc; ++m) {
            if (m > 0)
                it = apply_L(ctx, it);
            c.push_back(inner_product(it, phi.Phi));
        }
        return c;
    };

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> Uamp(-1.0, 1.0);
    std::uniform_real_distribution<double> Umu(std::log(8.0 * a), std::log(b / 4.0));
    std::uniform_real_distribution<double> Usig(0.25, 0.6);

    Eigen::MatrixXd C;
    Eigen::FullPivLU<Eigen::MatrixXd> ludec;
    if (mc >= 0) {
        C.resize(mc + 1, mc + 1);
        for (int j = 0; j <= mc; ++j) {
            auto cv = constraint_values(dirs[j]);
            for (int m = 0; m <= mc; ++m)
                C(m, j) = cv[m];
        }
        ludec.compute(C);
        if (!ludec.isInvertible())
            throw numerical_error("coercivity_probe: constraint projection is singular");
    }

    CoercivityReport rep;
    rep.min_ratio = std::numeric_limits<double>::infinity();
    for (int s = 0; s < nsamples; ++s) {
        GridFunction f(ctx.pack->grid, 0.0, 3, std::nullopt);
        for (int bump = 0; bump < 3; ++bump) {
            const double amp = Uamp(rng);
            const double mu = Umu(rng);
            const double sig = Usig(rng);
            for (std::size_t i = 0; i < g.n; ++i) {
                const double x = std::log(g.y[i]);
                f.v[i] += amp * std::exp(-0.5 * (x - mu) * (x - mu) / (sig * sig));
            }
        }
        for (std::size_t i = 0; i < g.n; ++i)
            f.v[i] *= window.v[i];
        if (norm_inf(f) < 1e-12)
            continue;

        if (mc >= 0) {
            for (int pass = 0; pass < 2; ++pass) {
                auto cv = constraint_values(f);
                Eigen::VectorXd rhs(mc + 1);
                for (int m = 0; m <= mc; ++m)
                    rhs(m) = cv[m];
                Eigen::VectorXd alpha = ludec.solve(rhs);
                for (int j = 0; j <= mc; ++j)
                    for (std::size_t i = 0; i < g.n; ++i)
                        f.v[i] -= alpha(j) * dirs[j].v[i];
            }
        }

        // numerator
        auto lk1 = iterate_L(f, k + 1);
        const double num = inner_product(lk1, lk1);

        // denominator
        double den = 0.0;
        GridFunction lmf = f;
        for (int m = 0; m <= k; ++m) {
            if (m > 0)
                lmf = apply_L(ctx, lmf);
            // ||L^m f||^2 with weight 1/(y^4 (1 + y^{4(k-m)}))
            GridFunction wf = lmf;
            for (std::size_t i = 0; i < g.n; ++i) {
                const double y4km = std::pow(g.y[i], 4.0 * (k - m));
                wf.v[i] = lmf.v[i] * lmf.v[i] /
                          (ctx.y2[i] * ctx.y2[i] * (1.0 + y4km));
            }
            wf.origin_exponent = 2 * lmf.origin_exponent - 4;
            den += integral(wf);

            auto alf = apply_A(ctx, lmf);
            if (m == k) {
                // leading gradient block: ||A L^k f / y||^2
                GridFunction wa = alf;
                for (std::size_t i = 0; i < g.n; ++i)
                    wa.v[i] = alf.v[i] * alf.v[i] / ctx.y2[i];
                wa.origin_exponent = 2 * alf.origin_exponent - 2;
                den += integral(wa);
            } else {
                // ||A L^m f||^2 with weight 1/(y^6 (1 + y^{4(k-m-1)}))
                GridFunction wa = alf;
                for (std::size_t i = 0; i < g.n; ++i) {
                    const double y4 = std::pow(g.y[i], 4.0 * (k - m - 1));
                    wa.v[i] = alf.v[i] * alf.v[i] /
                              (ctx.y2[i] * ctx.y2[i] * ctx.y2[i] * (1.0 + y4));
                }
                wa.origin_exponent = 2 * alf.origin_exponent - 6;
                den += integral(wa);
            }
        }
        if (!(den > 0.0))
            continue;
        const double ratio = num / den;
        rep.ratios.push_back(ratio);
        rep.min_ratio = std::min(rep.min_ratio, ratio);
    }
    if (rep.ratios.empty())
        throw numerical_error("coercivity_probe: no usable samples");
    return rep;
}

} // namespace blowup
