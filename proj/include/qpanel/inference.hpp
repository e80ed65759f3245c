#pragma once

#include <Eigen/Core>
#include <optional>
#include <vector>

#include "qpanel/md_estimator.hpp"
#include "qpanel/panel.hpp"

namespace qpanel {

struct InferenceOptions {
    bool dof_correction = false;        // multiply omega by m/(m-1)
    // optional coarser clustering: cluster id per group (defaults to the
    // group itself, i.e. one cluster per group)
    std::vector<int> cluster_of_group;
};

// Cluster-robust moment variance
//   omega(tau,tau') = (1/m) sum_j gbar_j(tau) gbar_j(tau')'
// with gbar_j = (1/n_j) sum_i z_ij u_ij, using group-specific n_j.
Eigen::MatrixXd omega_hat(const GroupedPanel& panel, const Eigen::MatrixXd& Z,
                          const Eigen::VectorXd& u_tau, const Eigen::VectorXd& u_tau_prime,
                          const InferenceOptions& opts = InferenceOptions());

// Moment mean gbar = (1/m) sum_j gbar_j (equals (1/(mn)) sum_ij z u when
// balanced).
Eigen::VectorXd moment_mean(const GroupedPanel& panel, const Eigen::MatrixXd& Z,
                            const Eigen::VectorXd& u,
                            const InferenceOptions& opts = InferenceOptions());

// All pairwise omega blocks over a quantile grid.
struct MomentVariance {
    std::vector<double> taus;
    int m = 0; // number of clusters used
    std::vector<std::vector<Eigen::MatrixXd>> omega; // [t][t'], L x L
};

MomentVariance moment_variance(const GroupedPanel& panel, const Eigen::MatrixXd& Z,
                               const std::vector<Eigen::VectorXd>& residuals,
                               const std::vector<double>& taus,
                               const InferenceOptions& opts = InferenceOptions());

// Coefficient covariance Sigma(tau,tau') = G(tau) * omega(tau,tau')/m * G(tau')'
// stacked over the grid into a TK x TK matrix.
struct CoefCovariance {
    std::vector<double> taus;
    int k = 0;
    Eigen::MatrixXd stacked; // TK x TK

    Eigen::MatrixXd block(int t, int t2) const {
        return stacked.block(t * k, t2 * k, k, k);
    }
    Eigen::VectorXd se(int t) const {
        return block(t, t).diagonal().cwiseMax(0.0).cwiseSqrt();
    }
};

CoefCovariance sigma_hat(const std::vector<MdEstimate>& estimates,
                         const MomentVariance& omega);

// W*(tau) = omega(tau,tau)^{-1}; pseudo-inverse with singular values below
// 1e-12 * sigma_max truncated (flagged through *truncated).
Eigen::MatrixXd efficient_weight(const Eigen::MatrixXd& omega_tau, bool* truncated = nullptr);

// Two-step efficient GMM: TwoStageLS first step, then W* from the
// cluster-robust omega of the first-step residuals.
MdEstimate md_fit_efficient(const Eigen::VectorXd& yhat, const Eigen::MatrixXd& X,
                            const Eigen::MatrixXd& Z, const GroupedPanel& panel,
                            double tau, std::vector<std::string> names = {},
                            const InferenceOptions& opts = InferenceOptions());

struct TestResult {
    double statistic = 0.0;
    std::optional<int> dof;  // set for the J-test
    double p_value = 1.0;
    bool reject_05 = false;
};

// z statistic eta'(delta_stacked - null) / sqrt(eta' Sigma eta) against the
// standard normal, two-sided.
TestResult z_test(const Eigen::VectorXd& delta_stacked, const CoefCovariance& sigma,
                  const Eigen::VectorXd& eta, double null_value);

// Overidentification / Hausman J-test: J = m gbar' W* gbar ~ chi^2_{L-K},
// evaluated at an efficient-GMM estimate.
TestResult j_test(const MdEstimate& est, const GroupedPanel& panel, const Eigen::MatrixXd& Z,
                  const InferenceOptions& opts = InferenceOptions());

// Clustered sandwich covariance of a linear GMM fit; clusters may sit at or
// above the group level. Used by the least-squares equivalence checks.
Eigen::MatrixXd clustered_covariance(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Z,
                                     const Eigen::MatrixXd& W, const Eigen::VectorXd& u,
                                     const std::vector<int>& cluster_ids);

// Delete-one-cluster jackknife covariance of the GMM coefficient vector,
// holding the weighting matrix fixed (CV3). Near-unbiased with few
// clusters, where the plug-in sandwich undershoots.
Eigen::MatrixXd jackknife_covariance(const GroupedPanel& panel, const Eigen::MatrixXd& X,
                                     const Eigen::MatrixXd& Z, const Eigen::VectorXd& yhat,
                                     const Eigen::MatrixXd& W,
                                     const InferenceOptions& opts = InferenceOptions());

double normal_quantile(double p);
double normal_cdf(double x);
double t_quantile(double p, int dof);

} // namespace qpanel
