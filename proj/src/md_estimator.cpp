#include "qpanel/md_estimator.hpp"

#include <Eigen/Dense>
#include <limits>
#include <cmath>

namespace qpanel {

Weighting weighting_from_string(const std::string& s) {
    if (s == "identity") return Weighting::Identity;
    if (s == "two_stage_ls" || s == "2sls") return Weighting::TwoStageLS;
    if (s == "efficient") return Weighting::Efficient;
    throw ConfigError("unknown weighting '" + s + "'");
}

std::string to_string(Weighting w) {
    switch (w) {
        case Weighting::Identity: return "identity";
        case Weighting::TwoStageLS: return "two_stage_ls";
        case Weighting::Efficient: return "efficient";
    }
    return "?";
}

namespace {

void check_svals(const Eigen::MatrixXd& a, const char* what) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
    const double smin = svd.singularValues().minCoeff();
    const double smax = svd.singularValues().maxCoeff();
    if (!(smin > 1e-10 * smax))
        throw NumericError(std::string("singular ") + what +
                           ": smallest singular value " + std::to_string(smin));
}

} // namespace

MdEstimate md_fit(const Eigen::VectorXd& yhat, const Eigen::MatrixXd& X,
                  const Eigen::MatrixXd& Z, const Eigen::MatrixXd& W,
                  double tau, std::vector<std::string> names) {
    const int N = static_cast<int>(X.rows());
    const int K = static_cast<int>(X.cols());
    const int L = static_cast<int>(Z.cols());
    if (yhat.size() != N || Z.rows() != N)
        throw DataError("dimension mismatch in md_fit");
    if (L < K)
        throw ConfigError("under-identified md_fit: L=" + std::to_string(L) +
                          " < K=" + std::to_string(K));
    if (W.size() > 0 && (W.rows() != L || W.cols() != L))
        throw DataError("weighting matrix must be L x L");

    MdEstimate est;
    est.tau = tau;
    est.names = std::move(names);
    if (est.names.empty())
        for (int k = 0; k < K; ++k) est.names.push_back("x" + std::to_string(k + 1));
    est.S_ZX = Z.transpose() * X / static_cast<double>(N);
    const Eigen::VectorXd m_zy = Z.transpose() * yhat / static_cast<double>(N);
    est.exactly_identified = (L == K);

    if (est.exactly_identified) {
        check_svals(est.S_ZX, "S_ZX");
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(est.S_ZX);
        est.G_hat = qr.solve(Eigen::MatrixXd::Identity(L, L));
        est.delta = qr.solve(m_zy);
        est.W = Eigen::MatrixXd::Identity(L, L);
    } else {
        const Eigen::MatrixXd Wm =
            W.size() > 0 ? W : Eigen::MatrixXd(Eigen::MatrixXd::Identity(L, L));
        const Eigen::MatrixXd SW = est.S_ZX.transpose() * Wm; // K x L
        const Eigen::MatrixXd M = SW * est.S_ZX;              // K x K
        check_svals(M, "S_ZX' W S_ZX");
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(M);
        est.G_hat = qr.solve(SW);
        est.delta = est.G_hat * m_zy;
        est.W = Wm;
    }
    est.residuals = yhat - X * est.delta;
    return est;
}

MdEstimate md_fit(const Eigen::VectorXd& yhat, const Eigen::MatrixXd& X,
                  const Eigen::MatrixXd& Z, Weighting preset,
                  double tau, std::vector<std::string> names) {
    if (preset == Weighting::Efficient)
        throw ConfigError("efficient weighting requires the two-step fit in inference");
    Eigen::MatrixXd W;
    if (preset == Weighting::TwoStageLS) {
        const Eigen::MatrixXd zz = Z.transpose() * Z / static_cast<double>(Z.rows());
        check_svals(zz, "Z'Z");
        W = zz.colPivHouseholderQr().solve(
            Eigen::MatrixXd::Identity(Z.cols(), Z.cols()));
        W = 0.5 * (W + W.transpose());
    }
    MdEstimate est = md_fit(yhat, X, Z, W, tau, std::move(names));
    est.weighting = preset;
    return est;
}

MdEstimate ls_one_step(const GroupedPanel& panel, const Eigen::MatrixXd& X,
                       const Eigen::MatrixXd& Z, const Eigen::MatrixXd& W) {
    MdEstimate est = md_fit(panel.y, X, Z, W, 0.5);
    est.tau = std::numeric_limits<double>::quiet_NaN();
    return est;
}

ClpFit clp_fit(const FirstStageFit& fs, int tau_index, const GroupedPanel& panel,
               const Eigen::VectorXd* iv, int iv_x2_col) {
    const int m = panel.m();
    const int k2 = panel.k2();
    if (tau_index < 0 || tau_index >= static_cast<int>(fs.fits.size()))
        throw ConfigError("tau index out of range in clp_fit");

    Eigen::VectorXd b0(m);
    Eigen::MatrixXd x2g(m, k2);
    for (int j = 0; j < m; ++j) {
        b0(j) = fs.fits[tau_index][j].coef(0);
        x2g.row(j) = panel.x2_row(j);
    }

    Eigen::MatrixXd zg = x2g;
    if (iv) {
        if (iv->size() != m) throw DataError("CLP instrument must have one value per group");
        if (iv_x2_col < 0 || iv_x2_col >= k2)
            throw ConfigError("CLP instrument column index out of range");
        zg.col(iv_x2_col) = *iv;
    }

    const Eigen::MatrixXd zx = zg.transpose() * x2g;
    check_svals(zx, "CLP group-level design");
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(zx);

    ClpFit fit;
    fit.tau = fs.taus[tau_index];
    fit.names = panel.x2_names;
    fit.gamma = qr.solve(zg.transpose() * b0);

    // HC1 sandwich on the group-level regression
    const Eigen::VectorXd e = b0 - x2g * fit.gamma;
    Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(k2, k2);
    for (int j = 0; j < m; ++j)
        meat += e(j) * e(j) * zg.row(j).transpose() * zg.row(j);
    if (m > k2) meat *= static_cast<double>(m) / static_cast<double>(m - k2);
    const Eigen::MatrixXd bread = qr.solve(Eigen::MatrixXd::Identity(k2, k2));
    const Eigen::MatrixXd v = bread * meat * bread.transpose();
    fit.se = v.diagonal().cwiseMax(0.0).cwiseSqrt();
    return fit;
}

} // namespace qpanel
