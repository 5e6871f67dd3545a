#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "blowup/modes.hpp"

using namespace blowup;

namespace {

// (d, ell) pairs admitted by 2*ell > gamma across the supercritical range;
// d = 7 sits exactly at gamma = 2, so ell = 1 is excluded there.
std::vector<std::pair<int, int>> admissible_pairs() {
    std::vector<std::pair<int, int>> out;
    for (int d = 7; d <= 12; ++d)
        for (int ell = 1; ell <= 3; ++ell)
            if (2.0 * ell > gamma_exponent(d))
                out.emplace_back(d, ell);
    return out;
}

} // namespace

TEST_CASE("branch coefficients follow the closed recursion") {
    // ell = 1 at d = 8: the single coefficient is 1/(2 - gamma) = 1 + sqrt(2)
    const ModeSystem one = make_mode_system(8, 1, 2);
    CHECK(one.c[0] == Catch::Approx(1.0 + std::sqrt(2.0)).margin(1e-14));
    CHECK(one.c[1] == 0.0);

    // ell = 2 at d = 7 (gamma = 2): c = (1, -1, 0)
    const ModeSystem two = make_mode_system(7, 2, 3);
    CHECK(two.gamma == Catch::Approx(2.0).margin(1e-15));
    CHECK(two.c[0] == Catch::Approx(1.0).margin(1e-15));
    CHECK(two.c[1] == Catch::Approx(-1.0).margin(1e-15));
    CHECK(two.c[2] == 0.0);

    // the recursion relation itself, at an unexceptional dimension
    const ModeSystem three = make_mode_system(9, 3, 4);
    const double g = three.gamma;
    for (int k = 1; k < 3; ++k)
        CHECK(three.c[k] ==
              Catch::Approx(-g * (3 - k) / (6.0 - g) * three.c[k - 1]).margin(1e-15));
    CHECK(three.c[3] == 0.0);
}

TEST_CASE("the exact branch zeroes the system residual") {
    for (auto [d, ell] : admissible_pairs()) {
        const ModeSystem sys = make_mode_system(d, ell, ell + 1);
        for (double s : {1.5, 10.0, 100.0}) {
            double worst = 0.0;
            for (double r : explicit_residual(sys, s))
                worst = std::max(worst, std::abs(r));
            INFO("d = " << d << " ell = " << ell << " s = " << s);
            CHECK(worst <= 1e-14);
        }
    }
}

TEST_CASE("the explicit solution samples c_k / s^k") {
    const ModeSystem sys = make_mode_system(7, 2, 3);
    const std::vector<double> b = explicit_solution(sys, 10.0);
    CHECK(b[0] == Catch::Approx(0.1).margin(1e-16));
    CHECK(b[1] == Catch::Approx(-0.01).margin(1e-16));
    CHECK(b[2] == 0.0);
    CHECK_THROWS_AS(explicit_solution(sys, 0.0), parameter_error);
    CHECK_THROWS_AS(explicit_solution(sys, -3.0), parameter_error);
}

TEST_CASE("linearization spectrum: one stable mode, ell - 1 unstable") {
    for (auto [d, ell] : admissible_pairs()) {
        const double g = gamma_exponent(d);
        const LinearizationMatrix lin = build_Al(g, ell);
        const std::vector<double> want = diagonal_spectrum(g, ell);
        REQUIRE(lin.eigenvalues.size() == static_cast<std::size_t>(ell));
        int positive = 0;
        for (int j = 0; j < ell; ++j) {
            INFO("d = " << d << " ell = " << ell << " mode " << j + 1);
            CHECK(lin.eigenvalues[j] == Catch::Approx(want[j]).margin(1e-10));
            if (lin.eigenvalues[j] > 0.0)
                ++positive;
        }
        CHECK(positive == ell - 1);

        // P really diagonalizes A
        const Eigen::MatrixXd D = lin.P * lin.A * lin.Pinv;
        for (int i = 0; i < ell; ++i)
            for (int j = 0; j < ell; ++j)
                CHECK(std::abs(D(i, j) - (i == j ? lin.eigenvalues[i] : 0.0)) <= 1e-12);
    }
}

TEST_CASE("ell = 1 linearization is the pure decay [-1]") {
    for (int d : {8, 9, 10, 11, 12}) {
        const LinearizationMatrix lin = build_Al(gamma_exponent(d), 1);
        CHECK(lin.A(0, 0) == Catch::Approx(-1.0).margin(1e-14));
        CHECK(lin.eigenvalues[0] == Catch::Approx(-1.0).margin(1e-14));
    }
    // d = 8, ell = 2: the unstable rate is 2 gamma / (4 - gamma)
    const double g = gamma_exponent(8);
    const LinearizationMatrix lin = build_Al(g, 2);
    CHECK(lin.eigenvalues[0] == Catch::Approx(-1.0).margin(1e-10));
    CHECK(lin.eigenvalues[1] == Catch::Approx(2.0 * g / (4.0 - g)).margin(1e-10));
    CHECK(lin.eigenvalues[1] == Catch::Approx(1.3137085).margin(1e-6));
}

TEST_CASE("branch trajectory reproduces both scaling exponents of the scale factor") {
    // d = 8, ell = 1: lambda ~ s^{-1/(2-gamma)} and lambda ~ (T-t)^{1/gamma}
    const ModeSystem sys = make_mode_system(8, 1, 1);
    const ModeTrajectory tr = integrate_system(sys, explicit_solution(sys, 10.0), 10.0, 1e6);

    CHECK_FALSE(tr.left_blowup_regime);
    const double want_s = -1.0 / (2.0 - sys.gamma);   // -2.4142136
    const double want_t = 1.0 / sys.gamma;            //  0.6306020
    CHECK(tr.s_fit.slope == Catch::Approx(want_s).epsilon(0.01));
    CHECK(tr.t_fit.slope == Catch::Approx(want_t).epsilon(0.01));

    // this branch is closed-form all the way down: T = s0 / (2 c_1 - 1)
    CHECK(tr.T == Catch::Approx(10.0 / (2.0 * sys.c[0] - 1.0)).margin(1e-9));
    CHECK(tr.prefactor > 0.0);

    // the scale factor was driven deep into collapse before the stop fired
    CHECK(tr.s_end > 1e5);
    CHECK(tr.lambda.back() < 1e-8);

    // recorded columns are strictly monotone, even where t approaches its limit
    for (std::size_t i = 1; i < tr.s.size(); ++i) {
        REQUIRE(tr.s[i] > tr.s[i - 1]);
        REQUIRE(tr.t[i] > tr.t[i - 1]);
        REQUIRE(tr.lambda[i] < tr.lambda[i - 1]);
    }
}

TEST_CASE("quantized rate at d = 7: the ell = 2 branch collapses linearly in T - t") {
    const ModeSystem sys = make_mode_system(7, 2, 3);
    const ModeTrajectory tr = integrate_system(sys, explicit_solution(sys, 20.0), 20.0, 1e5);

    // gamma = 2 and ell = 2 make everything rational: lambda = 20/s = (T-t)/20
    CHECK(tr.t_fit.slope == Catch::Approx(1.0).epsilon(0.01));
    CHECK(tr.s_fit.slope == Catch::Approx(-1.0).epsilon(0.01));
    CHECK(tr.T == Catch::Approx(20.0).margin(1e-5));
    CHECK(tr.prefactor == Catch::Approx(0.05).epsilon(1e-3));
}

TEST_CASE("dropping out of the blowup regime is reported, not fatal") {
    const ModeSystem sys = make_mode_system(7, 2, 2);
    std::vector<double> b0 = explicit_solution(sys, 20.0);
    b0[1] -= 0.5 / (20.0 * 20.0); // kick the second amplitude below the branch
    const ModeTrajectory tr = integrate_system(sys, b0, 20.0, 1e6);

    CHECK(tr.left_blowup_regime);
    CHECK(std::isnan(tr.T));
    REQUIRE(tr.s.size() >= 2);
    for (std::size_t i = 0; i < tr.b.size(); ++i)
        CHECK(tr.b[i][0] > 0.0); // every kept sample is still inside the regime
}

TEST_CASE("eigenmode kicks grow or decay at their own eigenvalue") {
    const ModeSystem sys = make_mode_system(7, 2, 2);
    const InstabilityReport rep = instability_experiment(sys, 1e-3, 42);

    REQUIRE(rep.probes.size() == 4); // two signs per mode
    for (const auto& p : rep.probes) {
        INFO("mode " << p.mode << " sign " << p.sign);
        CHECK(p.fit.slope == Catch::Approx(p.eigenvalue).margin(0.1));
    }
    // the d = 7 spectrum is exactly {-1, 2}
    CHECK(rep.eigenvalues[0] == Catch::Approx(-1.0).margin(1e-10));
    CHECK(rep.eigenvalues[1] == Catch::Approx(2.0).margin(1e-10));

    // a generic kick carries every mode at once
    REQUIRE(rep.random_probes.size() == 2);
    for (const auto& p : rep.random_probes)
        CHECK(p.fit.slope == Catch::Approx(p.eigenvalue).margin(0.1));
}

TEST_CASE("the deeper spectrum shows up mode by mode as well") {
    const ModeSystem sys = make_mode_system(7, 3, 3);
    const InstabilityReport rep = instability_experiment(sys, 1e-4, 7);
    REQUIRE(rep.probes.size() == 6);
    for (const auto& p : rep.probes) {
        INFO("mode " << p.mode << " sign " << p.sign);
        CHECK(p.fit.slope == Catch::Approx(p.eigenvalue).margin(0.1));
    }
    // eigenvalues {-1, 1, 3/2} at gamma = 2
    CHECK(rep.eigenvalues[1] == Catch::Approx(1.0).margin(1e-10));
    CHECK(rep.eigenvalues[2] == Catch::Approx(1.5).margin(1e-10));
}

TEST_CASE("zero kick stays on the branch to integrator accuracy") {
    const ModeSystem sys = make_mode_system(7, 2, 2);
    const InstabilityReport rep = instability_experiment(sys, 0.0, 1);
    CHECK(rep.probes.empty());
    CHECK(rep.random_probes.empty());
    CHECK(rep.reference_drift <= 1e-8);
}

TEST_CASE("shooting pins the unstable coordinate of the stable manifold") {
    const ModeSystem sys = make_mode_system(7, 2, 2);

    // the manifold offset shrinks as the start moves out (the branch itself
    // sits at V = 0, and the seeded stable displacement decays with s0)
    const double x20 = shoot_unstable(sys, 20.0, 3200.0, 1e-6);
    const double x40 = shoot_unstable(sys, 40.0, 3200.0, 1e-6);
    const double x80 = shoot_unstable(sys, 80.0, 3200.0, 1e-6);
    CHECK(std::abs(x40) < std::abs(x20));
    CHECK(std::abs(x80) < std::abs(x40));
    CHECK(std::abs(x20) < 0.1 * shrinking_bound(sys, 20.0));

    // the found trajectory stays far inside the shrinking set all the way
    const LinearizationMatrix lin = build_Al(sys.gamma, sys.ell);
    const double x = shoot_unstable(sys, 20.0, 3200.0, 1e-8);
    const DiagonalTrace trace =
        trace_diagonal(sys, lin, {1.0 / std::sqrt(20.0), x}, 20.0, 3200.0);
    CHECK_FALSE(trace.left_regime);
    double worst = 0.0;
    for (std::size_t i = 0; i < trace.s.size(); ++i)
        for (double v : trace.V[i])
            worst = std::max(worst, std::abs(v) / shrinking_bound(sys, trace.s[i]));
    CHECK(worst < 0.5);

    // bisection contract: halving the tolerance moves the answer by less
    const double xh = shoot_unstable(sys, 20.0, 3200.0, 0.5e-8);
    CHECK(std::abs(xh - x) < 1e-8);
}

TEST_CASE("every admissible ell = 1 start relaxes onto the branch") {
    for (int d : {8, 10, 12}) {
        const ModeSystem sys = make_mode_system(d, 1, 1);
        for (double u0 : {-0.5, 2.0, 8.0}) {
            const std::vector<double> b0 = {(sys.c[0] + u0) / 10.0};
            const ModeTrajectory tr = integrate_system(sys, b0, 10.0, 2e4);
            INFO("d = " << d << " U1(s0) = " << u0);
            CHECK(tr.b.back()[0] * tr.s.back() / sys.c[0] == Catch::Approx(1.0).epsilon(0.01));
        }
    }
}

TEST_CASE("malformed mode requests are rejected") {
    CHECK_THROWS_AS(make_mode_system(6, 2, 2), parameter_error);  // below the supercritical range
    CHECK_THROWS_AS(make_mode_system(7, 1, 1), parameter_error);  // 2*ell = gamma exactly
    CHECK_THROWS_AS(make_mode_system(8, 2, 1), parameter_error);  // L < ell
    CHECK_THROWS_AS(build_Al(2.0, 1), parameter_error);           // 2*ell = gamma again

    const ModeSystem sys = make_mode_system(7, 2, 2);
    CHECK_THROWS_AS(integrate_system(sys, {0.1}, 20.0, 1e4), parameter_error);      // wrong size
    CHECK_THROWS_AS(integrate_system(sys, {100.0, 0.0}, 20.0, 1e4), parameter_error); // off the branch
    CHECK_THROWS_AS(integrate_system(sys, {-0.05, 0.0}, 20.0, 1e4), parameter_error); // b_1 <= 0
    CHECK_THROWS_AS(integrate_system(sys, explicit_solution(sys, 20.0), 20.0, 30.0),
                    parameter_error); // window too short to say anything

    CHECK_THROWS_AS(instability_experiment(sys, 2e-3, 1), parameter_error); // kick too large
    CHECK_THROWS_AS(instability_experiment(sys, -1e-4, 1), parameter_error);
    CHECK_THROWS_AS(instability_experiment(make_mode_system(8, 1, 1), 1e-4, 1), parameter_error);

    CHECK_THROWS_AS(shoot_unstable(make_mode_system(7, 3, 3), 20.0, 100.0, 1e-6), parameter_error);
    CHECK_THROWS_AS(shoot_unstable(sys, 20.0, 10.0, 1e-6), parameter_error);
    CHECK_THROWS_AS(shoot_unstable(sys, 20.0, 100.0, 0.0), parameter_error);

    const LinearizationMatrix lin = build_Al(sys.gamma, sys.ell);
    CHECK_THROWS_AS(trace_diagonal(sys, lin, {0.0}, 20.0, 100.0), parameter_error);
}
