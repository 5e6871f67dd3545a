#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <vector>

#include "blowup/fits.hpp"
#include "blowup/qb.hpp"

#include "test_util.hpp"

using namespace blowup;

namespace {

// The profile-deformation grids stop at y = 1e3: the tail cancellation in
// Lambda T_k - (2k - gamma) T_k loses ~8 digits by y ~ 1e3-1e4, and the
// localization radius never needs more (2 B1 < 850 down to b_1 = 1e-5).
struct LadderFixture {
    OperatorContext ctx;
    TkFamily tks;
    std::vector<MonomialExpansion> S;
    int L;
};

const LadderFixture& cached_ladder(int d, int L) {
    static std::map<std::pair<int, int>, LadderFixture> cache;
    auto it = cache.find({d, L});
    if (it == cache.end()) {
        auto ctx = make_operator_context(testutil::cached_pack_ptr(d, 2049, 1e-4, 1e3));
        auto tks = generate_Tk(ctx, L + 1);
        auto S = build_Sk(ctx, tks, L);
        it = cache.emplace(std::make_pair(d, L),
                           LadderFixture{std::move(ctx), std::move(tks), std::move(S), L})
                 .first;
    }
    return it->second;
}

// the depth the scaling experiments run at: d = 8 carries the quantized-rate
// acceptance measurements at L = 2, d = 7 exercises the deeper L = 3 ladder
constexpr int kDepth8 = 2, kDepth7 = 3;

std::vector<int> only_b1(int L, int power) {
    std::vector<int> idx(L, 0);
    idx[0] = power;
    return idx;
}

} // namespace

TEST_CASE("correction ladder carries exactly the degree-k monomials") {
    for (auto [d, L] : {std::pair{8, kDepth8}, std::pair{7, kDepth7}}) {
        const auto& lad = cached_ladder(d, L);
        REQUIRE(static_cast<int>(lad.S.size()) == L + 3);
        CHECK(lad.S[0].terms.empty());
        CHECK(lad.S[1].terms.empty());  // S_1 = 0: nothing of degree 1 survives
        for (int k = 2; k <= L + 2; ++k) {
            const auto& e = lad.S[k];
            CHECK(e.p1 == k);
            CHECK(e.p2 == k - 1);
            CHECK(e.p3 == k);
            CHECK(!e.terms.empty());
            for (const auto& [idx, f] : e.terms) {
                CHECK(index_weight(idx) == k);
                CHECK(f.size() == lad.ctx.grid().n);
            }
            // differentiating by b_m removes weight m, so a degree-k
            // expansion has no dependence on amplitudes with m >= k
            for (int m = k; m <= L; ++m)
                CHECK(expansion_partial(e, m).terms.empty());
        }
    }

    // the d = 8, L = 2 index sets written out: the recursion is small enough
    // to enumerate by hand from E_{k-1} + P_k
    const auto& lad = cached_ladder(8, 2);
    auto keys = [&](int k) {
        std::vector<std::vector<int>> v;
        for (const auto& [idx, f] : lad.S[k].terms)
            v.push_back(idx);
        return v;
    };
    CHECK(keys(2) == std::vector<std::vector<int>>{{2, 0}});
    CHECK(keys(3) == std::vector<std::vector<int>>{{1, 1}, {3, 0}});
    CHECK(keys(4) == std::vector<std::vector<int>>{{0, 2}, {2, 1}, {4, 0}});
}

TEST_CASE("first correction solves against the handwritten quadratic forcing") {
    for (auto [d, L] : {std::pair{8, kDepth8}, std::pair{7, kDepth7}}) {
        const auto& lad = cached_ladder(d, L);
        const auto& ctx = lad.ctx;
        const RadialGrid& g = ctx.grid();
        const double gamma = ctx.gamma();
        const GridFunction& T1 = lad.tks.T[1];

        // F_2 has the single coefficient (at b_1^2)
        //   Lambda T_1 - (2 - gamma) T_1 - (d-1) sin(2Q) T_1^2 / y^2,
        // the last factor being f''(Q)/2 of f = sin(2x) times the Taylor
        // 1/2! -- a plausible place to lose a factor of two
        GridFunction oracle = lambda_op(T1) - (2.0 - gamma) * T1;
        for (std::size_t i = 0; i < g.n; ++i)
            oracle.v[i] -= (d - 1.0) * std::sin(2.0 * ctx.pack->Q.v[i]) * T1.v[i] * T1.v[i] /
                           (g.y[i] * g.y[i]);

        // applying L to the stored S_2 must return -F_2 up to the inversion
        // roundtrip (measured ~2e-7 of the sup, inner 90% of the grid)
        GridFunction back = -1.0 * apply_L(ctx, lad.S[2].terms.at(only_b1(L, 2)));
        const double sc = norm_inf(oracle);
        double worst = 0.0;
        for (std::size_t i = 8; i + g.n / 10 < g.n; ++i)
            worst = std::max(worst, std::abs(back.v[i] - oracle.v[i]) / sc);
        CHECK(worst < 1e-6);
    }
}

TEST_CASE("quadratic Taylor slice agrees with a finite difference of the true forcing") {
    for (int d : {8, 7}) {
        const auto& lad = cached_ladder(d, d == 8 ? kDepth8 : kDepth7);
        const RadialGrid& g = lad.ctx.grid();
        double worst = 0.0;
        for (double ytar : {0.3, 1.0, 3.0, 10.0, 30.0}) {
            std::size_t i = 0;
            while (i + 1 < g.n && g.y[i] < ytar)
                ++i;
            const double y = g.y[i], T = lad.tks.T[1].v[i], Q = lad.ctx.pack->Q.v[i];
            // step sized so hb*T ~ 5e-4: the quadratic content then clears
            // the ulp floor of the order-one sines while the quartic
            // truncation stays ~1e-7 relative
            const double hb = 5e-4 / std::abs(T);
            auto nl = [&](double b) {
                return (d - 1.0) / (2.0 * y * y) *
                       (std::sin(2.0 * Q + 2.0 * b * T) - std::sin(2.0 * Q) -
                        2.0 * b * std::cos(2.0 * Q) * T);
            };
            const double fd = (nl(hb) + nl(-hb)) / (hb * hb);  // nl(0) = 0
            const double slice = -2.0 * (d - 1.0) * std::sin(2.0 * Q) * T * T / (y * y);
            worst = std::max(worst, std::abs(slice - fd) / std::abs(slice));
        }
        CHECK(worst < 1e-6);
    }
}

TEST_CASE("corrections are homogeneous under amplitude rescaling") {
    for (auto [d, L] : {std::pair{8, kDepth8}, std::pair{7, kDepth7}}) {
        const auto& lad = cached_ladder(d, L);
        std::vector<double> b(L), b2(L), b3(L);
        for (int j = 0; j < L; ++j) {
            b[j] = 1e-3 / (j + 1);
            b2[j] = b[j] * std::pow(2.0, j + 1);  // power-of-two rescale: exact
            b3[j] = b[j] * std::pow(3.0, j + 1);
        }
        for (int k = 2; k <= L + 2; ++k) {
            GridFunction base = evaluate_expansion(lad.ctx.pack->grid, lad.S[k], b);
            GridFunction e2 = evaluate_expansion(lad.ctx.pack->grid, lad.S[k], b2);
            GridFunction e3 = evaluate_expansion(lad.ctx.pack->grid, lad.S[k], b3);
            const double m2 = std::pow(2.0, k), m3 = std::pow(3.0, k);
            const double sc = norm_inf(base);
            for (std::size_t i = 0; i < base.size(); ++i) {
                CHECK(e2.v[i] == m2 * base.v[i]);  // mu = 2 shifts exponents only
                CHECK(std::abs(e3.v[i] - m3 * base.v[i]) <= 1e-12 * m3 * sc);
            }
        }
    }
}

TEST_CASE("correction tails land in the promoted decay classes, origins at 2k+1") {
    for (auto [d, L] : {std::pair{8, kDepth8}, std::pair{7, kDepth7}}) {
        const auto& lad = cached_ladder(d, L);
        const double gamma = lad.ctx.gamma();
        // gammat = d - 2 - 2 gamma separates the two decaying solutions of
        // the linearized flow at infinity; for gammat < 2 (exactly d = 7,
        // gammat = 1) the ladder cancellation leaves y^{2k - gamma - gammat}
        // behind, one power y^{2 - gammat} above the naive class
        const double gammat = static_cast<double>(d) - 2.0 - 2.0 * gamma;
        const double promo = std::max(0.0, 2.0 - gammat);
        for (int k = 2; k <= L + 2; ++k) {
            for (const auto& [idx, f] : lad.S[k].terms) {
                const double naive = 2.0 * (k - 1) - gamma;
                const double tail = measure_tail_exponent(f, 0.5).slope;
                const double origin = measure_origin_exponent(f).slope;
                if (d == 7) {
                    // promotion saturates: measured naive + 1.00 .. 1.06
                    CHECK(tail >= naive + 0.9);
                    CHECK(tail <= naive + promo + 0.2);
                } else {
                    // no promotion, but slow from-above transients on this
                    // grid (worst +0.36, the (2,1) entry of S_4)
                    CHECK(tail >= naive - 0.1);
                    CHECK(tail <= naive + 0.5);
                }
                CHECK(std::abs(origin - (2.0 * k + 1.0)) < 0.4);
            }
        }
    }
}

TEST_CASE("zero amplitude reproduces the free profile bitwise") {
    for (auto [d, L] : {std::pair{8, kDepth8}, std::pair{7, kDepth7}}) {
        const auto& lad = cached_ladder(d, L);
        auto prof = assemble_Qb(lad.ctx, lad.tks, lad.S, std::vector<double>(L, 0.0));
        const auto& Q = lad.ctx.pack->Q;
        for (std::size_t i = 0; i < Q.size(); ++i) {
            CHECK(prof.Theta.v[i] == 0.0);
            CHECK(prof.Qb.v[i] == Q.v[i]);
            CHECK(prof.Qb_loc.v[i] == Q.v[i]);
        }
        auto rep = compute_Psib(lad.ctx, prof, std::vector<double>(L, 0.0));
        for (std::size_t i = 0; i < Q.size(); ++i) {
            CHECK(rep.Psib.v[i] == 0.0);
            CHECK(rep.Psib_free.v[i] == 0.0);
        }
        for (double w : rep.weighted)
            CHECK(w == 0.0);
        CHECK(rep.local_norm == 0.0);
    }
}

TEST_CASE("localization is inert below B1 and total beyond 2B1") {
    const auto& lad = cached_ladder(8, kDepth8);
    const RadialGrid& g = lad.ctx.grid();
    std::vector<double> b(kDepth8, 0.0);
    b[0] = 1e-3;
    auto prof = assemble_Qb(lad.ctx, lad.tks, lad.S, b);
    CHECK(prof.B0 == Catch::Approx(1.0 / std::sqrt(b[0])));
    CHECK(prof.B1 == Catch::Approx(std::pow(prof.B0, 1.05)));
    for (std::size_t i = 0; i < g.n; ++i) {
        if (g.y[i] <= prof.B1)
            CHECK(prof.Qb_loc.v[i] == prof.Qb.v[i]);
        if (g.y[i] >= 2.0 * prof.B1)
            CHECK(prof.Qb_loc.v[i] == lad.ctx.pack->Q.v[i]);
    }
}

TEST_CASE("profile deviation near the origin grows linearly in b1") {
    const auto& lad = cached_ladder(8, kDepth8);
    const RadialGrid& g = lad.ctx.grid();
    std::vector<double> xs, ys;
    for (double bb = 1e-5; bb < 1.1e-2; bb *= 10.0) {
        std::vector<double> b(kDepth8, 0.0);
        b[0] = bb;
        auto prof = assemble_Qb(lad.ctx, lad.tks, lad.S, b);
        double dev = 0.0;
        for (std::size_t i = 0; i < g.n && g.y[i] <= 1.0; ++i)
            dev = std::max(dev, std::abs(prof.Qb.v[i] - lad.ctx.pack->Q.v[i]));
        xs.push_back(bb);
        ys.push_back(dev);
    }
    auto lf = fit_powerlaw(xs, ys, 0.0, 1.0);
    CHECK(std::abs(lf.slope - 1.0) < 0.1);
}

TEST_CASE("exact amplitude law zeroes the modulation vector") {
    for (auto [d, L] : {std::pair{8, kDepth8}, std::pair{7, kDepth7}}) {
        const auto& lad = cached_ladder(d, L);
        std::vector<double> b(L);
        for (int j = 0; j < L; ++j)
            b[j] = 4e-3 * std::pow(3e-4, j);  // roughly the b_k ~ b_1^k hierarchy
        auto prof = assemble_Qb(lad.ctx, lad.tks, lad.S, b);
        auto bs = exact_bsystem_rhs(b, lad.ctx.gamma());
        GridFunction mod = mod_vector(lad.ctx, prof, bs);
        CHECK(norm_inf(mod) < 1e-12);

        // perturbing one law entry responds exactly linearly along the
        // modulation direction of that amplitude
        const double eps = 1e-7;
        auto bs2 = bs;
        bs2[0] += eps;
        GridFunction mod2 = mod_vector(lad.ctx, prof, bs2);
        GridFunction dir = lad.tks.T[1];
        for (int j = 2; j <= L + 2; ++j) {
            MonomialExpansion dS = expansion_partial(lad.S[j], 1);
            if (!dS.terms.empty())
                dir = dir + evaluate_expansion(lad.ctx.pack->grid, dS, b);
        }
        double worst = 0.0;
        for (std::size_t i = 0; i < mod.size(); ++i)
            worst = std::max(worst, std::abs(mod2.v[i] - mod.v[i] - eps * dir.v[i]));
        CHECK(worst < 1e-10 * eps * norm_inf(dir));
    }
}

TEST_CASE("single-amplitude modulation vector is the bracket times its direction") {
    // L = 1 is small enough to write out: Mod = [b_s + (2-gamma) b_1^2] *
    // (T_1 + dS_2/db_1 + dS_3/db_1)
    auto ctx = make_operator_context(testutil::cached_pack_ptr(8, 2049, 1e-4, 1e3));
    auto tks = generate_Tk(ctx, 2);
    auto S = build_Sk(ctx, tks, 1);
    const double b1 = 2e-3, bs_val = -1e-6;
    auto prof = assemble_Qb(ctx, tks, S, {b1});
    GridFunction mod = mod_vector(ctx, prof, {bs_val});

    const double bracket = bs_val + (2.0 - ctx.gamma()) * b1 * b1;
    GridFunction dir = tks.T[1];
    for (int j = 2; j <= 3; ++j)
        dir = dir + evaluate_expansion(ctx.pack->grid, expansion_partial(S[j], 1), {b1});
    double worst = 0.0;
    const double sc = std::abs(bracket) * norm_inf(dir);
    for (std::size_t i = 0; i < mod.size(); ++i)
        worst = std::max(worst, std::abs(mod.v[i] - bracket * dir.v[i]));
    CHECK(worst < 1e-13 * sc);
}

TEST_CASE("residual norms scale at the predicted rates as b1 -> 0") {
    // sweep helper: six profiles per decade with the exact law
    auto sweep = [](const LadderFixture& lad, double blo) {
        std::vector<double> xs;
        std::vector<std::vector<double>> norms;
        for (double bb = blo; bb < 1.05 * 10.0 * blo; bb *= std::pow(10.0, 0.2)) {
            std::vector<double> b(lad.L, 0.0);
            b[0] = bb;
            auto prof = assemble_Qb(lad.ctx, lad.tks, lad.S, b);
            auto rep = compute_Psib(lad.ctx, prof, exact_bsystem_rhs(b, lad.ctx.gamma()));
            xs.push_back(bb);
            norms.push_back(rep.weighted);
        }
        return std::pair{xs, norms};
    };
    auto slope = [](const std::pair<std::vector<double>, std::vector<std::vector<double>>>& sw,
                    int m) {
        std::vector<double> ys;
        for (const auto& row : sw.second)
            ys.push_back(row[m]);
        return fit_powerlaw(sw.first, ys, 0.0, 1.0).slope;
    };

    {
        // d = 8, L = 2.  On b_1 in [1e-5, 1e-4] the window edge 2 B0 sits at
        // y in [200, 632], past the correction-tail transients, and the
        // leading norms track the interior remainder rate 2m + 4 + 2(1-delta)
        const auto& lad = cached_ladder(8, kDepth8);
        const double delta = lad.ctx.pack->delta;
        auto lo = sweep(lad, 1e-5);
        const double s0 = slope(lo, 0), s1 = slope(lo, 1);
        CHECK(std::abs(s0 - (4.0 + 2.0 * (1.0 - delta))) < 0.3);
        CHECK(s0 == Catch::Approx(5.406).margin(0.1));  // measured 5.4060, rms 0.022
        CHECK(std::abs(s1 - (6.0 + 2.0 * (1.0 - delta))) < 0.3);
        // m = 2 scales so fast its low-amplitude values drown in the
        // eps-level cancellation floor (~1e-46); measure it on [1e-3, 1e-2]
        auto hi = sweep(lad, 1e-3);
        CHECK(slope(hi, 2) == Catch::Approx(9.77).margin(0.25));  // 2m+4+2(1-delta) = 9.586
    }
    {
        // d = 7, L = 3: gammat = 1 promotes the leftover tail by one power,
        // so the clean measured hierarchy is 2m + 3.5 instead of the naive
        // 2m + 4.5 (= 2m + 4 + 2(1-delta) at delta = 3/4)
        const auto& lad = cached_ladder(7, kDepth7);
        auto lo = sweep(lad, 1e-5);
        CHECK(slope(lo, 0) == Catch::Approx(3.4975).margin(0.15));
        CHECK(slope(lo, 1) == Catch::Approx(5.4974).margin(0.15));
        CHECK(slope(lo, 2) == Catch::Approx(7.4965).margin(0.15));
        auto hi = sweep(lad, 1e-3);
        CHECK(slope(hi, 3) == Catch::Approx(9.341).margin(0.25));
    }
}

TEST_CASE("factored forcing tail matches the textbook difference") {
    // sin(2Q+2t) - sin(2Q) - 2 cos(2Q) t rewritten without the order-one
    // subtraction; the two sides agree to the naive form's ulp floor
    const auto& lad = cached_ladder(8, kDepth8);
    const RadialGrid& g = lad.ctx.grid();
    double worst = 0.0;
    for (std::size_t i = 0; i < g.n; ++i) {
        if (g.y[i] < 1e-2 || g.y[i] > 1e2)
            continue;
        const double twoQ = 2.0 * lad.ctx.pack->Q.v[i];
        const double t = 1.7e-3 * lad.tks.T[1].v[i];
        const double naive = std::sin(twoQ + 2.0 * t) - std::sin(twoQ) -
                             2.0 * std::cos(twoQ) * t;
        const double fact = -4.0 * std::sin(t) * std::sin(twoQ + 0.5 * t) * std::sin(0.5 * t) +
                            2.0 * std::cos(twoQ) * (std::sin(t) - t);
        worst = std::max(worst, std::abs(naive - fact));
    }
    CHECK(worst < 3e-15);
}

TEST_CASE("malformed profile requests are rejected") {
    const auto& lad = cached_ladder(8, kDepth8);
    // localization radius leaving the grid: B1 = b^{-0.525} at b = 1e-6 puts
    // 2 B1 ~ 2.8e3 past y_max = 1e3
    CHECK_THROWS_AS(assemble_Qb(lad.ctx, lad.tks, lad.S, {1e-6, 0.0}), parameter_error);
    // b_1 = 0 demands a fully zero amplitude vector
    CHECK_THROWS_AS(assemble_Qb(lad.ctx, lad.tks, lad.S, {0.0, 1e-5}), parameter_error);
    // ladder depth is capped at 4
    CHECK_THROWS_AS(build_Sk(lad.ctx, lad.tks, 5), parameter_error);
    // law vector must match the amplitude count
    auto prof = assemble_Qb(lad.ctx, lad.tks, lad.S, {1e-3, 0.0});
    CHECK_THROWS_AS(compute_Psib(lad.ctx, prof, {0.0, 0.0, 0.0}), parameter_error);
    CHECK_THROWS_AS(mod_vector(lad.ctx, prof, {0.0}), parameter_error);
    // evaluation with too few amplitudes
    CHECK_THROWS_AS(evaluate_expansion(lad.ctx.pack->grid, lad.S[2], {1e-3}), parameter_error);
}
