#include "qpanel/optimal_iv.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <limits>

namespace qpanel {

double hall_sheather_rate(double tau, int n) {
    boost::math::normal_distribution<double> nd;
    const double q = boost::math::quantile(nd, tau);
    const double phi = boost::math::pdf(nd, q);
    const double z975 = boost::math::quantile(nd, 0.975);
    return std::pow(static_cast<double>(n), -1.0 / 3.0) * std::pow(z975, 2.0 / 3.0) *
           std::cbrt(1.5 * phi * phi / (2.0 * q * q + 1.0));
}

namespace {

double interquartile_range(const Eigen::VectorXd& u) {
    std::vector<double> s(u.data(), u.data() + u.size());
    std::sort(s.begin(), s.end());
    auto quantile = [&](double p) {
        const double pos = p * (s.size() - 1);
        const std::size_t lo = static_cast<std::size_t>(pos);
        const std::size_t hi = std::min(lo + 1, s.size() - 1);
        return s[lo] + (pos - lo) * (s[hi] - s[lo]);
    };
    return quantile(0.75) - quantile(0.25);
}

} // namespace

Eigen::MatrixXd powell_vj(const QrFit& fit, const Eigen::MatrixXd& Xt, double tau,
                          double bandwidth_override, double* bandwidth_used,
                          const std::string& group_label) {
    const int n = static_cast<int>(Xt.rows());
    const int p = static_cast<int>(Xt.cols());
    const Eigen::VectorXd& u = fit.residuals;

    double h;
    if (bandwidth_override > 0.0) {
        h = bandwidth_override;
    } else {
        // the Hall/Sheather rate is a bandwidth on the quantile scale; map
        // it to residual units through the normal quantile spacing and a
        // robust dispersion estimate
        double ht = hall_sheather_rate(tau, n);
        while (tau - ht <= 0.0 || tau + ht >= 1.0) ht *= 0.5;
        boost::math::normal_distribution<double> nd;
        const double spread =
            boost::math::quantile(nd, tau + ht) - boost::math::quantile(nd, tau - ht);
        const double iqr = interquartile_range(u) / 1.349;
        const double sd = std::sqrt((u.array() - u.mean()).square().sum() /
                                    std::max(n - 1, 1));
        double scale = iqr > 0.0 ? std::min(sd, iqr) : sd;
        scale = std::max(scale, 1e-8 * (1.0 + u.cwiseAbs().mean()));
        h = spread * scale;
    }

    const Eigen::MatrixXd gram = Xt.transpose() * Xt / static_cast<double>(n);
    for (int attempt = 0; attempt <= 3; ++attempt) {
        Eigen::MatrixXd b = Eigen::MatrixXd::Zero(p, p);
        for (int i = 0; i < n; ++i)
            if (std::fabs(u(i)) <= h)
                b += Xt.row(i).transpose() * Xt.row(i);
        b /= (2.0 * h * n);

        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(b);
        const double lmin = eig.eigenvalues().minCoeff();
        const double lmax = eig.eigenvalues().maxCoeff();
        if (lmin > 1e-12 * std::max(lmax, 1.0)) {
            Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(b);
            const Eigen::MatrixXd binv = qr.solve(Eigen::MatrixXd::Identity(p, p));
            Eigen::MatrixXd v = binv * (tau * (1.0 - tau)) * gram * binv.transpose();
            v = 0.5 * (v + v.transpose()).eval();
            if (!v.allFinite())
                throw NumericError("non-finite Powell variance in group " + group_label);
            if (bandwidth_used) *bandwidth_used = h;
            return v;
        }
        h *= 2.0; // no density mass in the band; widen and retry
    }
    throw NumericError("Powell density band is empty in group " + group_label +
                       " even after widening");
}

FirstStageVariance powell_first_stage_variance(const GroupedPanel& panel,
                                               const FirstStageFit& fs, int tau_index,
                                               double bandwidth_override) {
    FirstStageVariance out;
    out.tau = fs.taus[tau_index];
    out.v.resize(panel.m());
    out.bandwidth.resize(panel.m());
    for (int j = 0; j < panel.m(); ++j)
        out.v[j] = powell_vj(fs.fits[tau_index][j], first_stage_design(panel, j), out.tau,
                             bandwidth_override, &out.bandwidth[j], panel.group_labels[j]);
    return out;
}

double nerlove_sigma_alpha(const Eigen::VectorXd& alpha_hat) {
    const int m = static_cast<int>(alpha_hat.size());
    if (m < 2) throw DataError("sigma_alpha needs at least two groups");
    const double mean = alpha_hat.mean();
    return (alpha_hat.array() - mean).square().sum() / static_cast<double>(m - 1);
}

Eigen::VectorXd group_effect_estimates(const GroupedPanel& panel, const FirstStageFit& fs,
                                       int tau_index, const Eigen::VectorXd& gamma_x2) {
    if (gamma_x2.size() != panel.k2())
        throw DataError("gamma plug-in must have one entry per x2 column");
    Eigen::VectorXd a(panel.m());
    for (int j = 0; j < panel.m(); ++j)
        a(j) = fs.fits[tau_index][j].coef(0) - panel.x2_row(j).dot(gamma_x2);
    return a;
}

namespace {

// pinv of M = Xt C Xt' through the p-dimensional eigenstructure: with
// Xt = QR, M = Q (R C R') Q' and the nonzero spectrum of M is that of RCR'.
Eigen::MatrixXd lowrank_pinv_times(const Eigen::MatrixXd& Xt, const Eigen::MatrixXd& C,
                                   const Eigen::MatrixXd& rhs, const std::string& label) {
    const int n = static_cast<int>(Xt.rows());
    const int p = static_cast<int>(Xt.cols());

    Eigen::HouseholderQR<Eigen::MatrixXd> qr(Xt);
    const Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(n, p);
    const Eigen::MatrixXd R = qr.matrixQR().topRows(p).triangularView<Eigen::Upper>();
    const Eigen::MatrixXd S = 0.5 * (R * C * R.transpose() +
                                     (R * C * R.transpose()).transpose());

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(S);
    const Eigen::VectorXd& lam = eig.eigenvalues();
    const double lmax = lam.cwiseAbs().maxCoeff();
    if (!(lmax > 0.0))
        throw NumericError("optimal-instrument matrix is zero for group " + label);
    if (lam.minCoeff() < -1e-8 * lmax)
        throw NumericError("optimal-instrument matrix is not PSD for group " + label);

    const double cutoff = std::max(n, p) * std::numeric_limits<double>::epsilon() * lmax;
    Eigen::VectorXd inv(p);
    for (int i = 0; i < p; ++i) inv(i) = lam(i) > cutoff ? 1.0 / lam(i) : 0.0;

    const Eigen::MatrixXd QU = Q * eig.eigenvectors();
    return QU * (inv.asDiagonal() * (QU.transpose() * rhs));
}

Eigen::MatrixXd optimal_instrument_impl(const GroupedPanel& panel,
                                        const FirstStageVariance& v, double sigma_alpha_sq,
                                        const Eigen::MatrixXd& target, bool dense) {
    if (static_cast<int>(v.v.size()) != panel.m())
        throw DataError("first-stage variance must cover every group");
    if (sigma_alpha_sq < 0.0) throw ConfigError("sigma_alpha^2 must be nonnegative");
    if (target.rows() != panel.n_rows()) throw DataError("target rows do not match panel");

    Eigen::MatrixXd zstar(panel.n_rows(), target.cols());
    for (int j = 0; j < panel.m(); ++j) {
        const int s = panel.group_start[j], nj = panel.n_j(j);
        const Eigen::MatrixXd Xt = first_stage_design(panel, j);
        const int p = static_cast<int>(Xt.cols());

        // M_j = Xt (V_j/n_j) Xt' + ones(n,n) sigma_a^2; the ones matrix is
        // Xt e0 e0' Xt' because column 0 of Xt is the constant.
        Eigen::MatrixXd C = v.v[j] / static_cast<double>(nj);
        C(0, 0) += sigma_alpha_sq;

        if (dense) {
            const Eigen::MatrixXd M = Xt * C * Xt.transpose();
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (M + M.transpose()));
            const Eigen::VectorXd& lam = eig.eigenvalues();
            const double lmax = lam.cwiseAbs().maxCoeff();
            if (!(lmax > 0.0))
                throw NumericError("optimal-instrument matrix is zero for group " +
                                   panel.group_labels[j]);
            const double cutoff =
                std::max(nj, p) * std::numeric_limits<double>::epsilon() * lmax;
            Eigen::VectorXd inv(nj);
            for (int i = 0; i < nj; ++i) inv(i) = lam(i) > cutoff ? 1.0 / lam(i) : 0.0;
            zstar.middleRows(s, nj) =
                eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose() *
                target.middleRows(s, nj);
        } else {
            zstar.middleRows(s, nj) = lowrank_pinv_times(
                Xt, C, target.middleRows(s, nj), panel.group_labels[j]);
        }
    }
    return zstar;
}

} // namespace

Eigen::MatrixXd re_optimal_instrument(const GroupedPanel& panel,
                                      const FirstStageVariance& v, double sigma_alpha_sq,
                                      const Eigen::MatrixXd* target) {
    Eigen::MatrixXd x;
    if (target) {
        x = *target;
    } else {
        x.resize(panel.n_rows(), panel.k1() + panel.k2());
        x.leftCols(panel.k1()) = panel.x1;
        x.rightCols(panel.k2()) = panel.x2;
    }
    return optimal_instrument_impl(panel, v, sigma_alpha_sq, x, false);
}

Eigen::MatrixXd fe_optimal_instrument(const GroupedPanel& panel,
                                      const FirstStageVariance& v,
                                      const Eigen::MatrixXd* target) {
    const Eigen::MatrixXd& x = target ? *target : panel.x1;
    return optimal_instrument_impl(panel, v, 0.0, x, false);
}

Eigen::MatrixXd re_optimal_instrument_dense(const GroupedPanel& panel,
                                            const FirstStageVariance& v,
                                            double sigma_alpha_sq,
                                            const Eigen::MatrixXd* target) {
    Eigen::MatrixXd x;
    if (target) {
        x = *target;
    } else {
        x.resize(panel.n_rows(), panel.k1() + panel.k2());
        x.leftCols(panel.k1()) = panel.x1;
        x.rightCols(panel.k2()) = panel.x2;
    }
    return optimal_instrument_impl(panel, v, sigma_alpha_sq, x, true);
}

} // namespace qpanel
