#include "qpanel/inference.hpp"

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <map>

namespace qpanel {

double normal_quantile(double p) {
    return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

double normal_cdf(double x) {
    return boost::math::cdf(boost::math::normal_distribution<double>(), x);
}

double t_quantile(double p, int dof) {
    if (dof < 1) throw ConfigError("t quantile needs at least 1 degree of freedom");
    return boost::math::quantile(boost::math::students_t_distribution<double>(dof), p);
}

namespace {

// cluster row ranges: default one cluster per group; a user mapping merges
// whole groups into coarser clusters
std::vector<std::vector<int>> cluster_groups(const GroupedPanel& panel,
                                             const InferenceOptions& opts) {
    if (opts.cluster_of_group.empty()) {
        std::vector<std::vector<int>> out(panel.m());
        for (int j = 0; j < panel.m(); ++j) out[j] = {j};
        return out;
    }
    if (static_cast<int>(opts.cluster_of_group.size()) != panel.m())
        throw ConfigError("cluster mapping must have one entry per group");
    std::map<int, std::vector<int>> acc;
    for (int j = 0; j < panel.m(); ++j) acc[opts.cluster_of_group[j]].push_back(j);
    std::vector<std::vector<int>> out;
    for (auto& [c, js] : acc) out.push_back(std::move(js));
    return out;
}

Eigen::VectorXd cluster_gbar(const GroupedPanel& panel, const Eigen::MatrixXd& Z,
                             const Eigen::VectorXd& u, const std::vector<int>& js) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(Z.cols());
    int n_c = 0;
    for (int j : js) {
        const int s = panel.group_start[j], nj = panel.n_j(j);
        g += Z.middleRows(s, nj).transpose() * u.segment(s, nj);
        n_c += nj;
    }
    return g / static_cast<double>(n_c);
}

void check_residual_length(const GroupedPanel& panel, const Eigen::VectorXd& u) {
    if (u.size() != panel.n_rows())
        throw DataError("residual vector length does not match the panel");
}

} // namespace

Eigen::MatrixXd omega_hat(const GroupedPanel& panel, const Eigen::MatrixXd& Z,
                          const Eigen::VectorXd& u_tau, const Eigen::VectorXd& u_tau_prime,
                          const InferenceOptions& opts) {
    check_residual_length(panel, u_tau);
    check_residual_length(panel, u_tau_prime);
    if (Z.rows() != panel.n_rows()) throw DataError("instrument rows do not match panel");

    const auto clusters = cluster_groups(panel, opts);
    const int m = static_cast<int>(clusters.size());
    const int L = static_cast<int>(Z.cols());
    Eigen::MatrixXd omega = Eigen::MatrixXd::Zero(L, L);
    for (const auto& js : clusters) {
        const Eigen::VectorXd g1 = cluster_gbar(panel, Z, u_tau, js);
        const Eigen::VectorXd g2 = cluster_gbar(panel, Z, u_tau_prime, js);
        omega += g1 * g2.transpose();
    }
    omega /= static_cast<double>(m);
    if (opts.dof_correction && m > 1)
        omega *= static_cast<double>(m) / static_cast<double>(m - 1);
    return omega;
}

Eigen::VectorXd moment_mean(const GroupedPanel& panel, const Eigen::MatrixXd& Z,
                            const Eigen::VectorXd& u, const InferenceOptions& opts) {
    check_residual_length(panel, u);
    const auto clusters = cluster_groups(panel, opts);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(Z.cols());
    for (const auto& js : clusters) g += cluster_gbar(panel, Z, u, js);
    return g / static_cast<double>(clusters.size());
}

MomentVariance moment_variance(const GroupedPanel& panel, const Eigen::MatrixXd& Z,
                               const std::vector<Eigen::VectorXd>& residuals,
                               const std::vector<double>& taus,
                               const InferenceOptions& opts) {
    if (residuals.size() != taus.size())
        throw DataError("one residual vector per quantile required");
    MomentVariance mv;
    mv.taus = taus;
    mv.m = static_cast<int>(cluster_groups(panel, opts).size());
    const int T = static_cast<int>(taus.size());
    mv.omega.assign(T, std::vector<Eigen::MatrixXd>(T));
    for (int t = 0; t < T; ++t)
        for (int t2 = t; t2 < T; ++t2) {
            mv.omega[t][t2] = omega_hat(panel, Z, residuals[t], residuals[t2], opts);
            if (t2 != t) mv.omega[t2][t] = mv.omega[t][t2].transpose();
        }
    // diagonal blocks are averages of outer products, so PSD up to rounding
    for (int t = 0; t < T; ++t) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(mv.omega[t][t]);
        const double lmax = std::max(eig.eigenvalues().cwiseAbs().maxCoeff(), 1e-300);
        if (eig.eigenvalues().minCoeff() < -1e-10 * lmax)
            throw NumericError("moment variance block lost positive semidefiniteness");
    }
    return mv;
}

CoefCovariance sigma_hat(const std::vector<MdEstimate>& estimates,
                         const MomentVariance& omega) {
    const int T = static_cast<int>(estimates.size());
    if (T == 0 || static_cast<int>(omega.taus.size()) != T)
        throw DataError("estimates and moment variance grids do not match");
    const int K = static_cast<int>(estimates[0].delta.size());

    CoefCovariance cov;
    cov.taus = omega.taus;
    cov.k = K;
    cov.stacked.resize(T * K, T * K);
    for (int t = 0; t < T; ++t)
        for (int t2 = 0; t2 < T; ++t2)
            cov.stacked.block(t * K, t2 * K, K, K) =
                estimates[t].G_hat * (omega.omega[t][t2] / omega.m) *
                estimates[t2].G_hat.transpose();
    // enforce exact symmetry of the stacked matrix
    cov.stacked = 0.5 * (cov.stacked + cov.stacked.transpose()).eval();
    return cov;
}

Eigen::MatrixXd efficient_weight(const Eigen::MatrixXd& omega_tau, bool* truncated) {
    const int L = static_cast<int>(omega_tau.rows());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (omega_tau + omega_tau.transpose()));
    const Eigen::VectorXd& lam = eig.eigenvalues();
    const double lmax = lam.cwiseAbs().maxCoeff();
    if (!(lmax > 0.0)) throw NumericError("moment variance is identically zero");

    const double cutoff = 1e-12 * lmax;
    bool cut = false;
    Eigen::VectorXd inv(L);
    for (int i = 0; i < L; ++i) {
        if (lam(i) > cutoff) {
            inv(i) = 1.0 / lam(i);
        } else {
            inv(i) = 0.0;
            cut = true;
        }
    }
    if (truncated) *truncated = cut;
    return eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
}

MdEstimate md_fit_efficient(const Eigen::VectorXd& yhat, const Eigen::MatrixXd& X,
                            const Eigen::MatrixXd& Z, const GroupedPanel& panel,
                            double tau, std::vector<std::string> names,
                            const InferenceOptions& opts) {
    const MdEstimate step1 = md_fit(yhat, X, Z, Weighting::TwoStageLS, tau, names);
    const Eigen::MatrixXd omega = omega_hat(panel, Z, step1.residuals, step1.residuals, opts);
    bool truncated = false;
    const Eigen::MatrixXd wstar = efficient_weight(omega, &truncated);
    MdEstimate est = md_fit(yhat, X, Z, wstar, tau, std::move(names));
    est.weighting = Weighting::Efficient;
    est.w_truncated = truncated;
    return est;
}

TestResult z_test(const Eigen::VectorXd& delta_stacked, const CoefCovariance& sigma,
                  const Eigen::VectorXd& eta, double null_value) {
    if (eta.size() != sigma.stacked.rows() || delta_stacked.size() != eta.size())
        throw DataError("contrast vector dimension mismatch in z_test");
    if (!(eta.norm() > 0.0)) throw ConfigError("contrast vector must be nonzero");

    const double var = eta.dot(sigma.stacked * eta);
    if (!(var > 0.0)) throw NumericError("degenerate variance in z_test");
    TestResult r;
    r.statistic = (eta.dot(delta_stacked) - null_value) / std::sqrt(var);
    r.p_value = 2.0 * (1.0 - normal_cdf(std::fabs(r.statistic)));
    r.reject_05 = r.p_value < 0.05;
    return r;
}

TestResult j_test(const MdEstimate& est, const GroupedPanel& panel, const Eigen::MatrixXd& Z,
                  const InferenceOptions& opts) {
    const int L = static_cast<int>(Z.cols());
    const int K = static_cast<int>(est.delta.size());
    if (L <= K)
        throw ConfigError("J-test needs an overidentified model (L > K); got L=" +
                          std::to_string(L) + ", K=" + std::to_string(K));
    if (est.weighting != Weighting::Efficient)
        throw ConfigError("J-test requires the efficient-GMM estimate");

    const auto clusters = cluster_groups(panel, opts);
    const int m = static_cast<int>(clusters.size());
    const Eigen::VectorXd gbar = moment_mean(panel, Z, est.residuals, opts);

    TestResult r;
    r.statistic = m * gbar.dot(est.W * gbar);
    r.dof = L - K;
    boost::math::chi_squared_distribution<double> chi2(L - K);
    r.p_value = boost::math::cdf(boost::math::complement(chi2, r.statistic));
    r.reject_05 = r.p_value < 0.05;
    return r;
}

Eigen::MatrixXd clustered_covariance(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Z,
                                     const Eigen::MatrixXd& W, const Eigen::VectorXd& u,
                                     const std::vector<int>& cluster_ids) {
    const int N = static_cast<int>(X.rows());
    if (Z.rows() != N || u.size() != N || static_cast<int>(cluster_ids.size()) != N)
        throw DataError("dimension mismatch in clustered_covariance");
    const int K = static_cast<int>(X.cols());
    const int L = static_cast<int>(Z.cols());
    const Eigen::MatrixXd Wm = W.size() > 0 ? W : Eigen::MatrixXd::Identity(L, L);

    std::map<int, std::vector<int>> rows;
    for (int i = 0; i < N; ++i) rows[cluster_ids[i]].push_back(i);
    const double G = static_cast<double>(rows.size());

    Eigen::MatrixXd szx = Z.transpose() * X / G;
    Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(L, L);
    for (const auto& [c, idx] : rows) {
        Eigen::VectorXd zu = Eigen::VectorXd::Zero(L);
        for (int i : idx) zu += Z.row(i).transpose() * u(i);
        meat += zu * zu.transpose();
    }
    meat /= G;

    const Eigen::MatrixXd A = szx.transpose() * Wm * szx; // K x K
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
    const Eigen::MatrixXd Ainv = qr.solve(Eigen::MatrixXd::Identity(K, K));
    const Eigen::MatrixXd B = szx.transpose() * Wm * meat * Wm * szx;
    return Ainv * B * Ainv.transpose();
}

Eigen::MatrixXd jackknife_covariance(const GroupedPanel& panel, const Eigen::MatrixXd& X,
                                     const Eigen::MatrixXd& Z, const Eigen::VectorXd& yhat,
                                     const Eigen::MatrixXd& W, const InferenceOptions& opts) {
    const int K = static_cast<int>(X.cols());
    const int L = static_cast<int>(Z.cols());
    if (X.rows() != panel.n_rows() || Z.rows() != panel.n_rows() ||
        yhat.size() != panel.n_rows())
        throw DataError("dimension mismatch in jackknife_covariance");
    const Eigen::MatrixXd Wm = W.size() > 0 ? W : Eigen::MatrixXd::Identity(L, L);

    const Eigen::MatrixXd zx = Z.transpose() * X;
    const Eigen::VectorXd zy = Z.transpose() * yhat;

    const auto clusters = cluster_groups(panel, opts);
    const int G = static_cast<int>(clusters.size());
    if (G < 2) throw DataError("jackknife needs at least two clusters");

    Eigen::MatrixXd loo(G, K);
    for (int c = 0; c < G; ++c) {
        Eigen::MatrixXd zx_c = zx;
        Eigen::VectorXd zy_c = zy;
        for (int j : clusters[c]) {
            const int s = panel.group_start[j], nj = panel.n_j(j);
            zx_c -= Z.middleRows(s, nj).transpose() * X.middleRows(s, nj);
            zy_c -= Z.middleRows(s, nj).transpose() * yhat.segment(s, nj);
        }
        const Eigen::MatrixXd A = zx_c.transpose() * Wm * zx_c;
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
        if (qr.rank() < K)
            throw NumericError("jackknife subsample without cluster " + std::to_string(c) +
                               " is not identified");
        loo.row(c) = qr.solve(zx_c.transpose() * Wm * zy_c).transpose();
    }
    const Eigen::RowVectorXd mean = loo.colwise().mean();
    const Eigen::MatrixXd centered = loo.rowwise() - mean;
    return (static_cast<double>(G - 1) / G) * (centered.transpose() * centered);
}

} // namespace qpanel
