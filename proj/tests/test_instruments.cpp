#include <doctest.h>

#include "helpers.hpp"
#include "qpanel/instruments.hpp"

using namespace qpanel;
using Eigen::MatrixXd;
using Eigen::VectorXd;

TEST_CASE("design assembly and column metadata") {
    const GroupedPanel p = testutil::random_panel(4, 3, 8, 1, 1, 21);
    const MatrixXd X = build_design(p);
    CHECK(X.cols() == 3); // x1, intercept, x2
    const auto names = design_names(p);
    REQUIRE(names.size() == 3);
    CHECK(names[0] == "x1_1");
    CHECK(names[1] == "(intercept)");
    CHECK(names[2] == "x2_1");

    // manual concatenation oracle
    MatrixXd manual(p.n_rows(), 3);
    manual.col(0) = p.x1.col(0);
    manual.col(1) = p.x2.col(0);
    manual.col(2) = p.x2.col(1);
    CHECK((X - manual).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("constructed instrument sets have the documented shapes") {
    const GroupedPanel p = testutil::random_panel(6, 4, 9, 2, 1, 22);
    const int k1 = 2, k2 = 2;

    CHECK(build_instruments(p, {InstrumentKind::Pooled}).Z.cols() == k1 + k2);
    CHECK(build_instruments(p, {InstrumentKind::Between}).Z.cols() == k1 + k2);
    CHECK(build_instruments(p, {InstrumentKind::FixedEffects}).Z.cols() == k1);
    const InstrumentSet re = build_instruments(p, {InstrumentKind::RandomEffectsGMM});
    CHECK(re.Z.cols() == 2 * k1 + k2);

    // fixed-effects instruments have exact zero group means
    const InstrumentSet fe = build_instruments(p, {InstrumentKind::FixedEffects});
    for (int j = 0; j < p.m(); ++j) {
        const auto block = fe.Z.middleRows(p.group_start[j], p.n_j(j));
        for (int k = 0; k < fe.Z.cols(); ++k)
            CHECK(std::fabs(block.col(k).mean()) <= 1e-10);
    }

    // within + mean reassemble x1 column by column
    CHECK((re.Z.leftCols(k1) + re.Z.middleCols(k1, k1) - p.x1).cwiseAbs().maxCoeff() <=
          1e-12 * (1.0 + p.x1.cwiseAbs().maxCoeff()));
}

TEST_CASE("one-regressor example produces a block-triangular cross-moment matrix") {
    const GroupedPanel p = testutil::random_panel(5, 6, 6, 1, 1, 23);
    InstrumentSpec spec;
    spec.kind = InstrumentKind::HausmanTaylor; // [within(x1), X2] here
    spec.x2_exogenous = {0, 1};
    const InstrumentSet zs = build_instruments(p, spec);
    REQUIRE(zs.Z.cols() == 3);
    const MatrixXd X = build_design(p);
    const MatrixXd s_zx = zs.Z.transpose() * X / p.n_rows();
    // the within row is orthogonal to the group-level regressors exactly
    CHECK(std::fabs(s_zx(0, 1)) <= 1e-12);
    CHECK(std::fabs(s_zx(0, 2)) <= 1e-12);
    CHECK(std::fabs(s_zx(0, 0)) > 1e-3);
}

TEST_CASE("hausman-taylor order condition is checked at construction") {
    const GroupedPanel p = testutil::random_panel(6, 4, 9, 1, 2, 24);
    InstrumentSpec spec;
    spec.kind = InstrumentKind::HausmanTaylor;
    spec.x1_exogenous = {};       // nothing to instrument with
    spec.x2_exogenous = {0};      // intercept only; two endogenous x2 columns
    CHECK_THROWS_AS(build_instruments(p, spec), ConfigError);

    spec.x1_exogenous = {0};
    try {
        build_instruments(p, spec);
        FAIL("still one instrument short");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("order condition") != std::string::npos);
    }
}

TEST_CASE("external instruments mix with own instruments") {
    const GroupedPanel p = testutil::random_panel(6, 4, 9, 1, 1, 25, true);
    InstrumentSpec spec;
    spec.kind = InstrumentKind::External;
    spec.x2_endogenous = {1};
    spec.z_ext_columns = {0};
    const InstrumentSet zs = build_instruments(p, spec);
    CHECK(zs.Z.cols() == 3); // within(x1), intercept, z
    CHECK(zs.names[0] == "within(x1_1)");
    CHECK(zs.names[2] == "z_1");

    spec.z_ext_columns = {3};
    CHECK_THROWS_AS(build_instruments(p, spec), ConfigError);
}

TEST_CASE("identification failure reports the offending singular value") {
    MatrixXd X(6, 2);
    X << 1, 2, 1, 4, 1, 6, 1, 8, 1, 10, 1, 12;
    MatrixXd Z(6, 2);
    Z.col(0) = X.col(0);
    Z.col(1) = 2.0 * X.col(0); // rank one
    CHECK_THROWS_AS(check_identification(Z, X), NumericError);
    CHECK_THROWS_AS(check_identification(MatrixXd::Ones(6, 1), X), ConfigError);
}

TEST_CASE("classification into fast and slow instrument columns") {
    const GroupedPanel p = testutil::random_panel(5, 4, 9, 1, 1, 26);
    MatrixXd Z(p.n_rows(), 3);
    Z.col(0) = within_demean(p).col(0);
    Z.col(1) = p.x2.col(0);                        // intercept
    Z.col(2) = Z.col(0).array() + 0.5;             // shifted within column
    const auto [l1, l2] = classify_columns(Z, p);
    REQUIRE(l1.size() == 1);
    CHECK(l1[0] == 0);
    REQUIRE(l2.size() == 2);
    CHECK(l2[0] == 1);
    CHECK(l2[1] == 2);
}

TEST_CASE("instrument construction is covariant under affine reparametrization") {
    const GroupedPanel base = testutil::random_panel(5, 4, 9, 1, 1, 27);
    const double a = 2.5, c = -1.7;
    Eigen::MatrixXd x1b = a * base.x1.array() + c;
    std::vector<std::string> gid(base.n_rows());
    for (int i = 0; i < base.n_rows(); ++i) gid[i] = base.group_labels[base.group[i]];
    const GroupedPanel trans =
        make_panel(base.y, x1b, base.x2.rightCols(1), gid, Eigen::MatrixXd(), true);

    const InstrumentSet z0 = build_instruments(base, {InstrumentKind::RandomEffectsGMM});
    const InstrumentSet z1 = build_instruments(trans, {InstrumentKind::RandomEffectsGMM});
    // within columns scale by a and ignore the shift
    CHECK((z1.Z.col(0) - a * z0.Z.col(0)).cwiseAbs().maxCoeff() <= 1e-10);
    // mean columns map through the same affine transformation
    CHECK((z1.Z.col(1) - (a * z0.Z.col(1).array() + c).matrix()).cwiseAbs().maxCoeff() <=
          1e-10);
}
