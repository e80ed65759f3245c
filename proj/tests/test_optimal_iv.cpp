#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "qpanel/estimators.hpp"
#include "qpanel/montecarlo.hpp"
#include "qpanel/optimal_iv.hpp"

using namespace qpanel;
using Eigen::MatrixXd;
using Eigen::VectorXd;

TEST_CASE("powell estimate approaches the closed form under a known density") {
    // y = 1 + x + u with u uniform on (0,1): density 1 at every quantile,
    // so V = tau(1-tau) (E[xx'])^{-1} ... (E[xx'])^{-1} with f = 1
    const int n = 2000;
    Philox rng(811, 0);
    MatrixXd X(n, 2);
    X.col(0).setOnes();
    VectorXd y(n);
    for (int i = 0; i < n; ++i) {
        X(i, 1) = rng.normal();
        y(i) = 1.0 + X(i, 1) + rng.uniform_open();
    }
    const double tau = 0.5;
    const QrFit fit = fit_qr(y, X, tau);
    const MatrixXd v = powell_vj(fit, X, tau, 0.0, nullptr, "test");

    const MatrixXd gram = X.transpose() * X / n;
    const MatrixXd target = gram.inverse() * tau * (1.0 - tau); // f == 1
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
            CHECK(v(a, b) == doctest::Approx(target(a, b)).epsilon(0.20));
}

TEST_CASE("saturated band turns the kernel matrix into the scaled gram") {
    Philox rng(812, 0);
    const int n = 4;
    MatrixXd X(n, 2);
    X.col(0).setOnes();
    VectorXd y(n);
    for (int i = 0; i < n; ++i) {
        X(i, 1) = rng.normal();
        y(i) = rng.normal();
    }
    const QrFit fit = fit_qr(y, X, 0.5);
    const double h = 1e6; // covers every residual
    double used = 0.0;
    const MatrixXd v = powell_vj(fit, X, 0.5, h, &used, "test");
    CHECK(used == h);
    CHECK(v.allFinite());
    // B = gram/(2h), so V = (2h)^2 tau(1-tau) gram^{-1}
    const MatrixXd gram = X.transpose() * X / n;
    const MatrixXd expect = 4.0 * h * h * 0.25 * gram.inverse();
    CHECK((v - expect).cwiseAbs().maxCoeff() <= 1e-4 * expect.cwiseAbs().maxCoeff());
}

TEST_CASE("powell matrices are symmetric psd across a grouped draw") {
    DgpSpec spec;
    spec.kind = DgpKind::Grouped1;
    spec.m = 25;
    spec.n = 25;
    spec.seed = 99;
    const GroupedPanel p = draw_grouped(spec, 0);
    const QuantileGrid grid{{0.5}};
    const FirstStageFit fs = fit_first_stage_serial(p, grid);
    const FirstStageVariance v = powell_first_stage_variance(p, fs, 0);
    for (int j = 0; j < p.m(); ++j) {
        CHECK((v.v[j] - v.v[j].transpose()).cwiseAbs().maxCoeff() == 0.0);
        Eigen::SelfAdjointEigenSolver<MatrixXd> eig(v.v[j]);
        CHECK(eig.eigenvalues().minCoeff() >= -1e-12 * eig.eigenvalues().maxCoeff());
        CHECK(v.bandwidth[j] > 0.0);
    }
}

TEST_CASE("nerlove variance of group effects") {
    CHECK(nerlove_sigma_alpha(VectorXd::Constant(5, 3.3)) == doctest::Approx(0.0));
    VectorXd two(2);
    two << 0.0, 2.0;
    CHECK(nerlove_sigma_alpha(two) == doctest::Approx(2.0));
    CHECK_THROWS_AS(nerlove_sigma_alpha(VectorXd::Constant(1, 1.0)), DataError);
}

TEST_CASE("nerlove plug-in approaches the true group-effect variance") {
    DgpSpec spec;
    spec.kind = DgpKind::Panel;
    spec.m = 200;
    spec.n = 200;
    spec.lambda = 0.0;
    spec.seed = 1234;
    const GroupedPanel p = draw_panel(spec, 0);
    const QuantileGrid grid{{0.5}};
    const FirstStageFit fs = fit_first_stage_serial(p, grid);

    const InstrumentSet be = build_instruments(p, {InstrumentKind::Between});
    const MdEstimate pre = md_fit(fs.fitted[0], build_design(p), be.Z, MatrixXd(), 0.5);
    const VectorXd alpha =
        group_effect_estimates(p, fs, 0, pre.delta.tail(p.k2()));
    CHECK(nerlove_sigma_alpha(alpha) == doctest::Approx(1.0).epsilon(0.10));
}

TEST_CASE("low-rank and dense optimal-instrument routes agree") {
    const GroupedPanel p = testutil::random_panel(6, 8, 30, 1, 1, 814);
    const QuantileGrid grid{{0.5}};
    const FirstStageFit fs = fit_first_stage_serial(p, grid);
    const FirstStageVariance v = powell_first_stage_variance(p, fs, 0);
    for (const double s2 : {0.0, 0.4}) {
        const MatrixXd fast = re_optimal_instrument(p, v, s2);
        const MatrixXd dense = re_optimal_instrument_dense(p, v, s2);
        CHECK((fast - dense).cwiseAbs().maxCoeff() <=
              1e-8 * (1.0 + dense.cwiseAbs().maxCoeff()));
    }
}

TEST_CASE("optimal instrument with zero group variance equals efficient md") {
    for (uint64_t seed : {901, 902, 903}) {
        const GroupedPanel p = testutil::random_panel(8, 6, 14, 1, 1, seed);
        const QuantileGrid grid{{0.5}};
        const FirstStageFit fs = fit_first_stage_serial(p, grid);
        const FirstStageVariance v = powell_first_stage_variance(p, fs, 0);

        const MatrixXd X = build_design(p);
        const MatrixXd zstar = re_optimal_instrument(p, v, 0.0);
        const MdEstimate oi = md_fit(fs.fitted[0], X, zstar, MatrixXd(), 0.5);

        // efficient MD on the first-stage coefficients, weights (V_j/n_j)^{-1}
        std::vector<VectorXd> beta;
        std::vector<MatrixXd> w;
        for (int j = 0; j < p.m(); ++j) {
            beta.push_back(fs.fits[0][j].coef);
            w.push_back((v.v[j] / p.n_j(j)).inverse());
        }
        const VectorXd emd = testutil::weighted_md_on_coefficients(p, beta, w);
        CHECK((oi.delta - emd).cwiseAbs().maxCoeff() <=
              1e-6 * (1.0 + emd.cwiseAbs().maxCoeff()));
    }
}

TEST_CASE("least-squares analog reproduces fgls random effects") {
    const GroupedPanel p = testutil::random_panel(10, 4, 12, 2, 1, 905);
    const FirstStageFit fs = fit_ols_first_stage(p);

    // homoskedastic OLS plug-ins with fixed variance components
    const double s_eps = 1.7, s_alpha = 0.6;
    FirstStageVariance v;
    v.tau = 0.5;
    for (int j = 0; j < p.m(); ++j) {
        const MatrixXd Xt = first_stage_design(p, j);
        v.v.push_back(s_eps * (Xt.transpose() * Xt / p.n_j(j)).inverse());
        v.bandwidth.push_back(1.0);
    }
    const MatrixXd zstar = re_optimal_instrument(p, v, s_alpha);
    const MdEstimate oi = md_fit(fs.fitted[0], build_design(p), zstar, MatrixXd(), 0.5);
    const VectorXd fgls = testutil::fgls_random_effects(p, s_eps, s_alpha);
    CHECK((oi.delta - fgls).cwiseAbs().maxCoeff() <= 1e-6 * (1.0 + fgls.cwiseAbs().maxCoeff()));
}

TEST_CASE("huge group variance collapses the optimal instrument onto within variation") {
    DgpSpec spec;
    spec.kind = DgpKind::Panel;
    spec.m = 25;
    spec.n = 20;
    spec.lambda = 0.0;
    spec.seed = 4321;
    const GroupedPanel p = draw_panel(spec, 2);
    const QuantileGrid grid{{0.5}};
    const FirstStageFit fs = fit_first_stage_serial(p, grid);
    const FirstStageVariance v = powell_first_stage_variance(p, fs, 0);

    const MatrixXd X = build_design(p);
    const MatrixXd zstar = re_optimal_instrument(p, v, 1e9);
    const MdEstimate oi = md_fit(fs.fitted[0], X, zstar, MatrixXd(), 0.5);

    // Sherman-Morrison oracle for the exact sigma -> infinity limit:
    // M^+ -> A^+ - A^+ 1 1' A^+ / (1' A^+ 1) on the slope target and the
    // intercept instrument keeps the direction A^+ 1. The slope instrument
    // loses all between variation.
    MatrixXd zlim(p.n_rows(), 2);
    for (int j = 0; j < p.m(); ++j) {
        const int s = p.group_start[j], nj = p.n_j(j);
        const MatrixXd Xt = first_stage_design(p, j);
        const MatrixXd A = Xt * (v.v[j] / nj) * Xt.transpose();
        Eigen::SelfAdjointEigenSolver<MatrixXd> eig(A);
        Eigen::VectorXd inv = eig.eigenvalues();
        const double lmax = inv.maxCoeff();
        for (int i = 0; i < nj; ++i) inv(i) = inv(i) > 1e-12 * lmax ? 1.0 / inv(i) : 0.0;
        const MatrixXd apinv =
            eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
        const VectorXd ones = VectorXd::Ones(nj);
        const VectorXd a1 = apinv * ones;
        zlim.col(0).segment(s, nj) =
            apinv * p.x1.col(0).segment(s, nj) - a1 * (a1.dot(p.x1.col(0).segment(s, nj)) /
                                                       ones.dot(a1));
        zlim.col(1).segment(s, nj) = a1;
        // the slope instrument has exactly zero group means in the limit
        CHECK(std::fabs(zlim.col(0).segment(s, nj).sum()) <=
              1e-6 * (1.0 + zlim.col(0).segment(s, nj).cwiseAbs().maxCoeff() * nj));
    }
    const MdEstimate lim = md_fit(fs.fitted[0], X, zlim, MatrixXd(), 0.5);
    // the within-identified coefficient reaches its limit; the intercept
    // keeps only O(1/sigma^2) identifying signal and is not comparable in
    // doubles at this magnitude
    CHECK(std::fabs(oi.delta(0) - lim.delta(0)) <= 1e-3);
}

TEST_CASE("re optimal estimates approach fixed effects as n grows") {
    const QuantileGrid grid{{0.5}};
    auto mean_gap = [&](int n, int draws) {
        DgpSpec spec;
        spec.kind = DgpKind::Panel;
        spec.m = 25;
        spec.n = n;
        spec.lambda = 0.0;
        spec.seed = 909;
        double gap = 0.0;
        for (int r = 0; r < draws; ++r) {
            const GroupedPanel p = draw_panel(spec, r);
            const FirstStageFit fs = fit_first_stage_serial(p, grid);
            const EstimatorResult a =
                fit_estimator(p, fs, mc_estimator(DgpKind::Panel, "re_oi"));
            const EstimatorResult b =
                fit_estimator(p, fs, mc_estimator(DgpKind::Panel, "fe"));
            gap += std::fabs(a.by_tau[0].estimate(0) - b.by_tau[0].estimate(0));
        }
        return gap / draws;
    };
    const double wide = mean_gap(10, 10);
    const double tight = mean_gap(200, 10);
    // the within weights dominate as n grows; the residual gap reflects the
    // density-weighted (not gram-weighted) within averaging
    CHECK(tight <= 0.02);
    CHECK(tight <= 0.35 * wide);
}

TEST_CASE("constant-density variance makes gram weighting efficient") {
    // with V_j proportional to (Xt'Xt/n)^{-1}, efficient MD reduces to the
    // plain second-stage OLS of the fitted values on X
    const GroupedPanel p = testutil::random_panel(7, 5, 11, 1, 1, 906);
    const QuantileGrid grid{{0.5}};
    const FirstStageFit fs = fit_first_stage_serial(p, grid);
    FirstStageVariance v;
    v.tau = 0.5;
    for (int j = 0; j < p.m(); ++j) {
        const MatrixXd Xt = first_stage_design(p, j);
        v.v.push_back(0.25 * (Xt.transpose() * Xt / p.n_j(j)).inverse());
        v.bandwidth.push_back(1.0);
    }
    const MatrixXd X = build_design(p);
    const MatrixXd zstar = fe_optimal_instrument(p, v, &X);
    const MdEstimate oi = md_fit(fs.fitted[0], X, zstar, MatrixXd(), 0.5);
    const MdEstimate ols = md_fit(fs.fitted[0], X, X, MatrixXd(), 0.5);
    CHECK((oi.delta - ols.delta).cwiseAbs().maxCoeff() <=
          1e-8 * (1.0 + ols.delta.cwiseAbs().maxCoeff()));
}

TEST_CASE("intercept-only optimal instrument is the rescaled constant") {
    // K1 = 0: Z*_j is constant within each group, proportional to n_j/v_j;
    // the resulting IV fit is the variance-weighted group-mean estimator
    VectorXd y(6);
    y << 1, 2, 3, 10, 11, 15;
    const GroupedPanel p = make_panel(y, MatrixXd(6, 0), MatrixXd(6, 0),
                                      {"a", "a", "a", "b", "b", "b"});
    FirstStageVariance v;
    v.tau = 0.5;
    v.v = {MatrixXd::Constant(1, 1, 2.0), MatrixXd::Constant(1, 1, 8.0)};
    v.bandwidth = {1.0, 1.0};

    const MatrixXd X = p.x2; // intercept column
    const MatrixXd zstar = fe_optimal_instrument(p, v, &X);
    for (int j = 0; j < 2; ++j) {
        const auto seg = zstar.col(0).segment(p.group_start[j], 3);
        CHECK((seg.array() - seg(0)).abs().maxCoeff() <= 1e-12);
    }
    // weights n_j^2/(V_j n_j), here 3/2 vs 3/8 -> group means 2 and 12
    const FirstStageFit fs = fit_ols_first_stage(p);
    const MdEstimate fit = md_fit(fs.fitted[0], X, zstar, MatrixXd(), 0.5);
    const double w1 = 3.0 / 2.0, w2 = 3.0 / 8.0;
    CHECK(fit.delta(0) == doctest::Approx((w1 * 2.0 + w2 * 12.0) / (w1 + w2)).epsilon(1e-10));
}

TEST_CASE("eq-18 matrix must be psd") {
    const GroupedPanel p = testutil::random_panel(4, 4, 6, 1, 1, 907);
    FirstStageVariance v;
    v.tau = 0.5;
    for (int j = 0; j < p.m(); ++j) {
        v.v.push_back(-MatrixXd::Identity(2, 2)); // deliberately invalid
        v.bandwidth.push_back(1.0);
    }
    CHECK_THROWS_AS(re_optimal_instrument(p, v, 0.0), NumericError);
}
