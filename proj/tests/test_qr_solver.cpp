#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "helpers.hpp"
#include "qpanel/qr_solver.hpp"

using namespace qpanel;
using Eigen::MatrixXd;
using Eigen::VectorXd;

TEST_CASE("constant outcome is fit exactly at any quantile") {
    VectorXd y = VectorXd::Constant(3, 1.0);
    MatrixXd X = MatrixXd::Ones(3, 1);
    for (const double tau : {0.1, 0.5, 0.9}) {
        const QrFit f = fit_qr(y, X, tau);
        CHECK(f.coef(0) == doctest::Approx(1.0));
        CHECK(f.objective == doctest::Approx(0.0));
        CHECK(f.certificate_ok);
    }
}

TEST_CASE("even-n median lands in the interpolation interval with certificate") {
    VectorXd y(4);
    y << 1, 2, 3, 10;
    MatrixXd X = MatrixXd::Ones(4, 1);
    const QrFit f = fit_qr(y, X, 0.5);
    CHECK(f.coef(0) >= 2.0);
    CHECK(f.coef(0) <= 3.0);
    CHECK(f.n_neg <= 2);
    CHECK(2 <= f.n_neg + f.n_zero);
}

TEST_CASE("solver matches the brute-force basic-solution minimum") {
    int instances = 0;
    for (uint64_t s = 0; s < 60; ++s) {
        Philox rng(1000 + s, 0);
        const int n = 6 + static_cast<int>(rng.uniform() * 9);  // 6..14
        const int k = 1 + static_cast<int>(rng.uniform() * 3);  // 1..3
        if (n < k + 2) continue;
        MatrixXd X(n, k);
        X.col(0).setOnes();
        VectorXd y(n);
        for (int i = 0; i < n; ++i) {
            for (int c = 1; c < k; ++c) X(i, c) = rng.normal();
            y(i) = rng.normal() * (1.0 + 0.5 * rng.uniform());
        }
        const double tau = 0.1 + 0.8 * rng.uniform();
        const QrFit f = fit_qr(y, X, tau);
        const double brute = testutil::brute_force_check_loss(y, X, tau);
        CHECK(f.objective == doctest::Approx(brute).epsilon(1e-9));
        CHECK(f.certificate_ok);
        ++instances;
    }
    CHECK(instances >= 50);
}

TEST_CASE("affine equivariance of the solution") {
    Philox rng(5150, 0);
    for (int rep = 0; rep < 10; ++rep) {
        const int n = 30;
        MatrixXd X(n, 2);
        X.col(0).setOnes();
        VectorXd y(n);
        for (int i = 0; i < n; ++i) {
            X(i, 1) = rng.normal();
            y(i) = 0.5 + X(i, 1) + rng.normal();
        }
        const double tau = 0.3;
        const double a = 2.5;
        VectorXd c(2);
        c << -0.7, 1.3;
        const QrFit base = fit_qr(y, X, tau);
        const QrFit shifted = fit_qr(a * y + X * c, X, tau);
        CHECK(shifted.coef(0) == doctest::Approx(a * base.coef(0) + c(0)).epsilon(1e-8));
        CHECK(shifted.coef(1) == doctest::Approx(a * base.coef(1) + c(1)).epsilon(1e-8));
    }
}

TEST_CASE("objective equals the independently recomputed check loss") {
    Philox rng(31, 0);
    const int n = 40;
    MatrixXd X(n, 3);
    X.col(0).setOnes();
    VectorXd y(n);
    for (int i = 0; i < n; ++i) {
        X(i, 1) = rng.normal();
        X(i, 2) = rng.uniform();
        y(i) = X(i, 1) - X(i, 2) + rng.normal();
    }
    const QrFit f = fit_qr(y, X, 0.7);
    VectorXd b(3);
    for (int k = 0; k < 3; ++k) b(k) = f.coef(k);
    CHECK(f.objective == doctest::Approx(check_loss(y, X, b, 0.7)).epsilon(1e-10));

    // the attained objective is no worse than nearby candidates
    for (int trial = 0; trial < 20; ++trial) {
        VectorXd cand = b;
        for (int k = 0; k < 3; ++k) cand(k) += 0.1 * rng.normal();
        CHECK(f.objective <= check_loss(y, X, cand, 0.7) + 1e-12);
    }
}

TEST_CASE("intercept quantile path is essentially monotone for location data") {
    Philox rng(333, 0);
    const int n = 300;
    MatrixXd X(n, 2);
    X.col(0).setOnes();
    VectorXd y(n);
    for (int i = 0; i < n; ++i) {
        X(i, 1) = rng.normal();
        y(i) = 1.0 + 0.5 * X(i, 1) + rng.normal();
    }
    double prev = -1e300;
    for (double tau = 0.1; tau < 0.91; tau += 0.05) {
        const QrFit f = fit_qr(y, X, tau);
        CHECK(f.coef(0) >= prev - 1e-7); // diagnostic slack for ties
        prev = f.coef(0);
    }
}

TEST_CASE("rank-deficient columns are dropped and recorded") {
    Philox rng(77, 1);
    const int n = 20;
    MatrixXd X(n, 3);
    X.col(0).setOnes();
    for (int i = 0; i < n; ++i) X(i, 1) = rng.normal();
    X.col(2) = 2.0 * X.col(1); // dependent
    VectorXd y(n);
    for (int i = 0; i < n; ++i) y(i) = X(i, 1) + rng.normal();
    const QrFit f = fit_qr(y, X, 0.5);
    REQUIRE(f.dropped.size() == 1);
    CHECK(f.dropped[0] == 2);
    CHECK(std::isnan(f.coef(2)));
    CHECK(f.certificate_ok);
}

TEST_CASE("error paths") {
    VectorXd y(3);
    y << 1, 2, 3;
    CHECK_THROWS_AS(fit_qr(y, MatrixXd::Zero(3, 1), 0.5), NumericError);
    CHECK_THROWS_AS(fit_qr(y, MatrixXd::Ones(3, 1), 1.5), ConfigError);
    MatrixXd bad = MatrixXd::Ones(3, 1);
    bad(1, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(fit_qr(y, bad, 0.5), DataError);
}

TEST_CASE("first stage: constant outcome reproduces itself at every tau") {
    VectorXd y(6);
    y << 2, 2, 2, 5, 5, 5;
    MatrixXd x1(6, 1);
    x1 << 0.1, 0.7, 0.3, 0.9, 0.4, 0.6;
    const GroupedPanel p = make_panel(y, x1, MatrixXd(6, 0), {"a", "a", "a", "b", "b", "b"});
    const QuantileGrid grid{{0.1, 0.5, 0.9}};
    const FirstStageFit fs = fit_first_stage_serial(p, grid);
    for (int t = 0; t < 3; ++t)
        CHECK((fs.fitted[t] - y).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("first stage fits are independent of group block order") {
    const GroupedPanel p = testutil::random_panel(4, 5, 10, 1, 1, 404);
    const QuantileGrid grid{{0.25, 0.75}};
    const FirstStageFit fs = fit_first_stage_serial(p, grid);

    // rebuild the same panel with groups stacked in reverse order
    std::vector<int> order(p.m());
    for (int j = 0; j < p.m(); ++j) order[j] = p.m() - 1 - j;
    std::vector<double> y2;
    std::vector<double> x2v;
    std::vector<std::string> gid;
    for (int jj : order) {
        const int s = p.group_start[jj];
        for (int i = 0; i < p.n_j(jj); ++i) {
            y2.push_back(p.y(s + i));
            x2v.push_back(p.x1(s + i, 0));
            gid.push_back(p.group_labels[jj]);
        }
    }
    VectorXd yv(y2.size());
    MatrixXd x1v(y2.size(), 1);
    for (std::size_t i = 0; i < y2.size(); ++i) {
        yv(i) = y2[i];
        x1v(i, 0) = x2v[i];
    }
    const GroupedPanel q = make_panel(yv, x1v, MatrixXd(static_cast<int>(y2.size()), 0), gid);
    const FirstStageFit fs2 = fit_first_stage_serial(q, grid);
    for (int t = 0; t < 2; ++t)
        for (int j = 0; j < p.m(); ++j) {
            const int j2 = static_cast<int>(
                std::find(q.group_labels.begin(), q.group_labels.end(), p.group_labels[j]) -
                q.group_labels.begin());
            CHECK((fs.fits[t][j].coef - fs2.fits[t][j2].coef).cwiseAbs().maxCoeff() <= 1e-12);
        }
}

TEST_CASE("parallel first stage equals the serial reference bit for bit") {
    const GroupedPanel p = testutil::random_panel(12, 4, 15, 2, 1, 955);
    const QuantileGrid grid{{0.1, 0.5, 0.9}};
    const FirstStageFit serial = fit_first_stage_serial(p, grid);
    for (const int workers : {1, 2, 4}) {
        const FirstStageFit par = fit_first_stage(p, grid, workers);
        for (int t = 0; t < grid.size(); ++t) {
            CHECK((par.fitted[t].array() == serial.fitted[t].array()).all());
            for (int j = 0; j < p.m(); ++j)
                CHECK((par.fits[t][j].residuals.array() ==
                       serial.fits[t][j].residuals.array()).all());
        }
    }
}

TEST_CASE("first stage certificates hold on a grouped draw") {
    // structure matches the m=n=25 grouped design
    const GroupedPanel p = testutil::random_panel(25, 25, 25, 1, 1, 2025);
    const QuantileGrid grid{{0.1, 0.5, 0.9}};
    const FirstStageFit fs = fit_first_stage_serial(p, grid);
    for (int t = 0; t < 3; ++t)
        for (int j = 0; j < p.m(); ++j) {
            const QrFit& f = fs.fits[t][j];
            CHECK(f.certificate_ok);
            CHECK(f.n_neg <= p.n_j(j) * grid[t] + 1e-9);
            CHECK(p.n_j(j) * grid[t] <= f.n_neg + f.n_zero + 1e-9);
        }
}

TEST_CASE("ols first stage basics") {
    // intercept-only groups produce the group mean
    VectorXd y(5);
    y << 1, 2, 6, 3, 5;
    MatrixXd x1(5, 0);
    const GroupedPanel p = make_panel(y, x1, MatrixXd(5, 0), {"a", "a", "a", "b", "b"});
    const FirstStageFit fs = fit_ols_first_stage(p);
    CHECK(fs.least_squares);
    CHECK(fs.fitted[0](0) == doctest::Approx(3.0));
    CHECK(fs.fitted[0](3) == doctest::Approx(4.0));
}

TEST_CASE("ols first stage: saturated group reproduces y, residuals orthogonal") {
    Philox rng(808, 0);
    // group a is exactly determined (n = K1 + 1 = 2)
    VectorXd y(8);
    MatrixXd x1(8, 1);
    for (int i = 0; i < 8; ++i) {
        x1(i, 0) = rng.normal();
        y(i) = 1 + x1(i, 0) + rng.normal();
    }
    const GroupedPanel p =
        make_panel(y, x1, MatrixXd(8, 0), {"a", "a", "b", "b", "b", "b", "b", "b"});
    const FirstStageFit fs = fit_ols_first_stage(p);
    CHECK((fs.fitted[0].head(2) - y.head(2)).cwiseAbs().maxCoeff() <= 1e-10);

    // residual orthogonality within group b
    const Eigen::MatrixXd Xt = first_stage_design(p, 1);
    const VectorXd r = fs.fits[0][1].residuals;
    CHECK((Xt.transpose() * r).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("ols first stage rejects singular group designs naming the group") {
    VectorXd y(5);
    y << 1, 2, 3, 4, 5;
    MatrixXd x1(5, 1);
    x1 << 3, 3, 3, 1, 2; // constant within group a -> collinear with intercept
    const GroupedPanel p = make_panel(y, x1, MatrixXd(5, 0), {"a", "a", "a", "b", "b"});
    try {
        fit_ols_first_stage(p);
        FAIL("expected a numeric error");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("a") != std::string::npos);
    }
}
