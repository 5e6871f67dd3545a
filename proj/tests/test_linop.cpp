#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "blowup/fits.hpp"
#include "blowup/linop.hpp"
#include "blowup/numerics.hpp"
#include "blowup/profile.hpp"

#include "test_util.hpp"

using namespace blowup;

namespace {

OperatorContext cached_ctx(int d, std::size_t n = 2049, double y_min = 1e-4,
                           double y_max = 1e4) {
    return make_operator_context(testutil::cached_pack_ptr(d, n, y_min, y_max));
}

/// Smooth log-space Gaussian bump forced to compact support by C^7 ramps.
/// Compact support matters: the pairing weight y^{d-1} grows fast enough to
/// resurrect even a 1e-10 Gaussian remnant at the top of the grid.
GridFunction windowed_bump(const OperatorContext& ctx, std::mt19937_64& rng) {
    const RadialGrid& g = ctx.grid();
    std::uniform_real_distribution<double> Umu(std::log(0.05), std::log(5.0));
    std::uniform_real_distribution<double> Usig(0.4, 0.9);
    std::uniform_real_distribution<double> Uamp(0.2, 1.0);
    const double mu = Umu(rng), sig = Usig(rng), amp = Uamp(rng);
    const double a = 10.0 * g.y_min, b = g.y_max / 100.0;
    GridFunction f(ctx.pack->grid, 0.0, 3, std::nullopt);
    for (std::size_t i = 0; i < g.n; ++i) {
        const double x = std::log(g.y[i]);
        const double up = smoothstep(std::log(g.y[i] / a) / std::log(2.0));
        const double dn = 1.0 - smoothstep(std::log(g.y[i] / b) / std::log(2.0));
        f.v[i] = amp * std::exp(-0.5 * (x - mu) * (x - mu) / (sig * sig)) * up * dn;
    }
    return f;
}

} // namespace

TEST_CASE("A annihilates LamQ and A* annihilates the conjugate kernel") {
    for (int d : {7, 8, 11}) {
        auto ctx = cached_ctx(d);
        const RadialGrid& g = ctx.grid();

        auto r = apply_A(ctx, ctx.pack->LamQ);
        double worst = 0.0;
        for (std::size_t i = 0; i < g.n; ++i)
            worst = std::max(worst, std::abs(r.v[i]) * g.y[i] / ctx.pack->LamQ.v[i]);
        // V is analytic, so the only error is the Lambda stencil: ~2e-8
        CHECK(worst < 1e-7);

        // second kernel direction 1/(y^{d-1} LamQ); skip a few edge nodes
        // where the one-sided stencil meets the y^{-d} singularity
        GridFunction k2(ctx.pack->grid, 0.0, -d,
                        -(static_cast<double>(d) - 1.0) + ctx.gamma());
        for (std::size_t i = 0; i < g.n; ++i)
            k2.v[i] = 1.0 / (ctx.ydm1[i] * ctx.pack->LamQ.v[i]);
        auto r2 = apply_Astar(ctx, k2);
        double worst2 = 0.0;
        for (std::size_t i = 8; i + 8 < g.n; ++i)
            worst2 = std::max(worst2, std::abs(r2.v[i]) * g.y[i] / k2.v[i]);
        CHECK(worst2 < 1e-4); // measured 7.2e-6
    }
}

TEST_CASE("L LamQ residual decreases at stencil order under refinement") {
    for (int d : {7, 8}) {
        std::vector<double> hs, errs;
        for (std::size_t n : {513u, 1025u, 2049u}) {
            auto ctx = cached_ctx(d, n);
            auto r = apply_L(ctx, ctx.pack->LamQ);
            errs.push_back(norm_inf(r));
            hs.push_back(ctx.grid().h);
        }
        CHECK(fit_order(hs, errs) > 3.5); // measured 4.0
        CHECK(errs.back() < 5e-4);        // measured 1.3e-4
    }
}

TEST_CASE("adjointness of A and A* on randomized compact pairs") {
    // n = 4097: the defect is pure fourth-order truncation, measured 8.7e-9
    // there; the coarser everyday grid sits at ~1.4e-7.
    for (int d : {7, 8}) {
        auto ctx = cached_ctx(d, 4097);
        std::mt19937_64 rng(12345);
        double worst = 0.0;
        for (int t = 0; t < 32; ++t) {
            auto u = windowed_bump(ctx, rng);
            auto v = windowed_bump(ctx, rng);
            auto Au = apply_A(ctx, u);
            const double lhs = inner_product(Au, v);
            const double rhs = inner_product(u, apply_Astar(ctx, v));
            const double scale =
                std::sqrt(inner_product(Au, Au) * inner_product(v, v)) + 1e-300;
            worst = std::max(worst, std::abs(lhs - rhs) / scale);
        }
        CHECK(worst <= 1e-7);
    }
}

TEST_CASE("L factors as A*A and Ltilde as AA*") {
    for (int d : {7, 8}) {
        auto ctx = cached_ctx(d);
        const RadialGrid& g = ctx.grid();
        std::mt19937_64 rng(777);
        double worst = 0.0, worst_til = 0.0;
        for (int t = 0; t < 8; ++t) {
            auto u = windowed_bump(ctx, rng);
            auto Lf = apply_L(ctx, u);
            auto AsA = apply_Astar(ctx, apply_A(ctx, u));
            auto Ltf = apply_Ltilde(ctx, u);
            auto AAs = apply_A(ctx, apply_Astar(ctx, u));
            const double sc = norm_inf(Lf) + 1e-300;
            const double scT = norm_inf(Ltf) + 1e-300;
            for (std::size_t i = 8; i + 8 < g.n; ++i) {
                worst = std::max(worst, std::abs(Lf.v[i] - AsA.v[i]) / sc);
                worst_til = std::max(worst_til, std::abs(Ltf.v[i] - AAs.v[i]) / scT);
            }
        }
        // the composed form doubles the stencil error: measured 3.3e-7 / 5.8e-7
        CHECK(worst < 3e-6);
        CHECK(worst_til < 3e-6);
    }
}

TEST_CASE("commutator identity for the scaling generator") {
    auto ctx = cached_ctx(8);
    const RadialGrid& g = ctx.grid();

    GridFunction f(ctx.pack->grid, 0.0, 1, std::nullopt);
    for (std::size_t i = 0; i < g.n; ++i)
        f.v[i] = g.y[i] * std::exp(-g.y[i] * g.y[i]);
    CHECK(lambda_commutator_check(ctx, f) < 1e-6); // measured 1.5e-7

    // residual shrinks at stencil order under refinement (measured ratio ~80)
    auto ctx_coarse = cached_ctx(8, 513);
    GridFunction fc(ctx_coarse.pack->grid, 0.0, 1, std::nullopt);
    for (std::size_t i = 0; i < ctx_coarse.grid().n; ++i)
        fc.v[i] = ctx_coarse.grid().y[i] * std::exp(-ctx_coarse.grid().y[i] * ctx_coarse.grid().y[i]);
    CHECK(lambda_commutator_check(ctx_coarse, fc) / lambda_commutator_check(ctx, f) > 20.0);

    // f = LamQ: both sides collapse to -(Lambda Z/y^2) LamQ
    CHECK(lambda_commutator_check(ctx, ctx.pack->LamQ) < 1e-6); // measured 2.2e-7

    GridFunction zero(ctx.pack->grid, 0.0, 1, std::nullopt);
    CHECK(lambda_commutator_check(ctx, zero) == 0.0);
}

TEST_CASE("invert_L inverts the regular branch") {
    auto ctx = cached_ctx(7, 2049, 1e-4, 1e3);
    const RadialGrid& g = ctx.grid();

    GridFunction zero(ctx.pack->grid, 0.0, 1, std::nullopt);
    auto wz = invert_L(ctx, zero);
    CHECK(norm_inf(wz) == 0.0);

    // smooth compactly supported source: L(invert_L(f)) = f
    GridFunction src(ctx.pack->grid, 0.0, 1, std::nullopt);
    for (std::size_t i = 0; i < g.n; ++i)
        src.v[i] = cutoff_value(g.y[i]) * g.y[i];
    auto w = invert_L(ctx, src);
    auto back = apply_L(ctx, w);
    double worst = 0.0;
    const double sc = norm_inf(src);
    for (std::size_t i = 0; i + g.n / 10 < g.n; ++i)
        worst = std::max(worst, std::abs(back.v[i] - src.v[i]) / sc);
    CHECK(worst < 1e-4); // measured 2.5e-6

    // metadata: two cumulative integrals raise both exponents by 2
    CHECK(w.origin_exponent == src.origin_exponent + 2);
}

TEST_CASE("T_k ladder: round trips, growth exponents") {
    for (int d : {7, 8, 11}) {
        auto ctx = cached_ctx(d, 2049, 1e-4, 1e3);
        auto fam = generate_Tk(ctx, 4);
        REQUIRE(fam.T.size() == 5);
        const double gamma = ctx.gamma();

        // T_0 is LamQ itself
        CHECK(norm_inf(fam.T[0] - ctx.pack->LamQ) == 0.0);

        for (int k = 0; k <= 3; ++k) {
            const double target = 2.0 * k - gamma;
            // 2% of the exponent (absolute floor of 0.02 where it crosses 0,
            // e.g. 2 - gamma = 0 exactly at d = 7)
            const double budget = 0.02 * std::max(1.0, std::abs(target));
            CHECK(std::abs(fam.measured_tail[k] - target) < budget);
            // origin growth is y^{2k+1}
            CHECK(std::abs(measure_origin_exponent(fam.T[k]).slope - (2.0 * k + 1.0)) < 0.05);
        }
        for (int k = 0; k < 4; ++k)
            CHECK(fam.roundtrip_resid[k] < 1e-3); // measured < 5e-6 for all
    }
}

TEST_CASE("PhiM orthogonality, coefficient growth, support") {
    for (int d : {7, 8}) {
        auto ctx = cached_ctx(d, 2049, 1e-4, 1e3);
        auto fam = generate_Tk(ctx, 4);
        const RadialGrid& g = ctx.grid();

        std::vector<PhiMDirection> dirs;
        for (double M : {20.0, 40.0}) {
            auto phi = build_PhiM(ctx, fam, M, 3);
            CHECK(phi.c[0] == 1.0);
            CHECK(phi.denom > 0.0);
            // <Phi, T_k> / <Phi, LamQ> for k = 1..3; measured <= 1.1e-9
            for (double o : phi.ortho)
                CHECK(o <= 1e-8);
            // hard compact support
            for (std::size_t i = 0; i < g.n; ++i)
                if (g.y[i] > 2.0 * M)
                    CHECK(phi.Phi.v[i] == 0.0);
            // the measured pairing <Phi, LamQ> sits below <chi LamQ, LamQ>
            // by the quadrature systematic of the C^7 cutoff's sixth
            // derivative under L^3 (about 13-16% at this resolution); it is
            // the normalization the diagonal identities actually realize
            CHECK(phi.pairing > 0.75 * phi.denom);
            CHECK(phi.pairing < phi.denom);
            dirs.push_back(phi);
        }

        // growth |c_{k,M}| <~ M^{2k}: fitted exponent between M = 20 and 40
        for (int k = 1; k <= 3; ++k) {
            const double slope =
                std::log(std::abs(dirs[1].c[k]) / std::abs(dirs[0].c[k])) / std::log(2.0);
            CHECK(slope <= 2.0 * k + 0.5);
            CHECK(slope > 0.0);
        }

        // identity matrix <L^i T_k, Phi> = (-1)^k pairing delta_ik
        for (const auto& phi : dirs) {
            for (int i = 0; i <= 3; ++i) {
                for (int k = 0; k <= 3; ++k) {
                    GridFunction it = fam.T[k];
                    for (int m = 0; m < i; ++m)
                        it = apply_L(ctx, it);
                    const double val = inner_product(it, phi.Phi) / phi.pairing;
                    const double expect = (i == k) ? ((k % 2 == 0) ? 1.0 : -1.0) : 0.0;
                    if (i == k)
                        CHECK(std::abs(val - expect) < 2e-3); // measured 1.2e-4
                    else
                        CHECK(std::abs(val) < 1e-3); // measured 2.2e-4 worst
                }
            }
        }
    }
}

TEST_CASE("coercivity probe stays strictly positive on random admissible samples") {
    for (int d : {7, 8, 11}) {
        auto ctx = cached_ctx(d, 2049, 1e-4, 1e3);
        auto fam = generate_Tk(ctx, 4);
        auto phi = build_PhiM(ctx, fam, 20.0, 3);
        const int k = ctx.pack->hbar; // the exponent the trapped-regime norms use
        auto rep = coercivity_probe(ctx, phi, k, 64, 777);
        REQUIRE(rep.ratios.size() == 64);
        CHECK(rep.min_ratio > 0.0);
        CHECK(rep.min_ratio > 0.5); // measured 5.8 / 22.3 / 48.1 for d = 7/8/11
    }
}

TEST_CASE("operator metadata propagation") {
    auto ctx = cached_ctx(7);

    // A(LamQ): origin coefficient (1 - p) vanishes at p = 1, tail -gamma
    // is the kernel direction
    auto A = apply_A(ctx, ctx.pack->LamQ);
    CHECK(A.origin_exponent == 2);
    REQUIRE(A.tail_exponent.has_value());
    CHECK(*A.tail_exponent == Catch::Approx(-ctx.gamma() - 2.0));

    // generic bump through L: p -> p - 2, q -> q - 2
    GridFunction f(ctx.pack->grid, 1.0, 3, -5.0);
    auto Lf = apply_L(ctx, f);
    CHECK(Lf.origin_exponent == 1);
    CHECK(*Lf.tail_exponent == -7.0);

    auto w = invert_L(ctx, ctx.pack->LamQ);
    CHECK(w.origin_exponent == 3);
    CHECK(*w.tail_exponent == Catch::Approx(2.0 - ctx.gamma()));
}

TEST_CASE("operator calculus rejects invalid inputs") {
    auto ctx = cached_ctx(7);
    CHECK_THROWS_AS(make_operator_context(nullptr), parameter_error);

    auto other = make_grid(7, 1e-4, 1e4, 129);
    GridFunction g_other(other, 1.0, 1, std::nullopt);
    CHECK_THROWS_AS(apply_A(ctx, g_other), parameter_error);
    CHECK_THROWS_AS(apply_L(ctx, g_other), parameter_error);
    CHECK_THROWS_AS(invert_L(ctx, g_other), parameter_error);

    CHECK_THROWS_AS(generate_Tk(ctx, -1), parameter_error);
    CHECK_THROWS_AS(generate_Tk(ctx, 99), parameter_error);

    auto fam = generate_Tk(ctx, 2);
    // asks for more T_k than the family holds
    CHECK_THROWS_AS(build_PhiM(ctx, fam, 20.0, 3), parameter_error);
    // cutoff support would leave the grid
    CHECK_THROWS_AS(build_PhiM(ctx, fam, 0.9e4, 1), parameter_error);
}
