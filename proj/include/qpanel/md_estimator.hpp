#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

#include "qpanel/panel.hpp"
#include "qpanel/qr_solver.hpp"

namespace qpanel {

enum class Weighting { Identity, TwoStageLS, Efficient };

Weighting weighting_from_string(const std::string& s);
std::string to_string(Weighting w);

// Second-stage GMM estimate at one quantile.
struct MdEstimate {
    double tau = 0.5;
    Eigen::VectorXd delta;            // K, design column order
    std::vector<std::string> names;   // design column names
    Eigen::MatrixXd S_ZX;             // (1/N) Z'X, L x K
    Eigen::MatrixXd G_hat;            // (S'WS)^{-1} S'W, K x L
    Eigen::MatrixXd W;                // weighting matrix actually used
    Eigen::VectorXd residuals;        // yhat - X*delta, length N
    bool exactly_identified = false;
    Weighting weighting = Weighting::Identity;
    bool w_truncated = false;         // pseudo-inverse cutoff engaged
};

// delta = (X'Z W Z'X)^{-1} X'Z W Z'yhat. With L == K this is the IV
// estimator and W is irrelevant. Pass an empty W for the identity.
MdEstimate md_fit(const Eigen::VectorXd& yhat, const Eigen::MatrixXd& X,
                  const Eigen::MatrixXd& Z, const Eigen::MatrixXd& W,
                  double tau, std::vector<std::string> names = {});

// Preset weighting: Identity or TwoStageLS (W = (Z'Z/N)^{-1}). The
// Efficient preset is the two-step estimator in inference.hpp because it
// needs the cluster-robust moment variance.
MdEstimate md_fit(const Eigen::VectorXd& yhat, const Eigen::MatrixXd& X,
                  const Eigen::MatrixXd& Z, Weighting preset,
                  double tau, std::vector<std::string> names = {});

// One-step GMM of y itself on X — the oracle side of the least-squares
// equivalences (two-step with OLS first stage must match it exactly).
MdEstimate ls_one_step(const GroupedPanel& panel, const Eigen::MatrixXd& X,
                       const Eigen::MatrixXd& Z, const Eigen::MatrixXd& W = Eigen::MatrixXd());

// Comparator: regress the first-stage intercepts on the group-level
// regressors, one observation per group (OLS, or IV when a group-level
// instrument replaces an endogenous x2 column). Reported with
// heteroskedasticity-robust (HC1) standard errors.
struct ClpFit {
    double tau = 0.5;
    Eigen::VectorXd gamma;        // K2
    Eigen::VectorXd se;           // robust
    std::vector<std::string> names;
};

ClpFit clp_fit(const FirstStageFit& fs, int tau_index, const GroupedPanel& panel,
               const Eigen::VectorXd* iv = nullptr, int iv_x2_col = -1);

} // namespace qpanel
