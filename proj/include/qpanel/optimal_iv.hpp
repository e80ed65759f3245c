#pragma once

#include <Eigen/Core>
#include <vector>

#include "qpanel/panel.hpp"
#include "qpanel/qr_solver.hpp"

namespace qpanel {

// Per-group first-stage coefficient variance V_j(tau), Powell kernel
// sandwich estimate.
struct FirstStageVariance {
    double tau = 0.5;
    std::vector<Eigen::MatrixXd> v;   // per group, (1+K1) x (1+K1), symmetric PSD
    std::vector<double> bandwidth;    // band actually used per group
};

// Bandwidth rate for the density band: Hall/Sheather-style
// n^{-1/3} z_{.975}^{2/3} (1.5 phi(q)^2 / (2 q^2 + 1))^{1/3}, q = Phi^{-1}(tau);
// scaled by the residual IQR at call sites.
double hall_sheather_rate(double tau, int n);

// B = (1/n) sum 1{|u| <= h} x x' / (2h);  V = B^{-1} tau(1-tau) (X'X/n) B^{-1}.
// A singular band is widened (doubled) up to three times before failing.
Eigen::MatrixXd powell_vj(const QrFit& fit, const Eigen::MatrixXd& Xt, double tau,
                          double bandwidth_override, double* bandwidth_used,
                          const std::string& group_label);

FirstStageVariance powell_first_stage_variance(const GroupedPanel& panel,
                                               const FirstStageFit& fs, int tau_index,
                                               double bandwidth_override = 0.0);

// sigma_alpha^2 = (1/(m-1)) sum_j (a_j - mean)^2, never negative.
double nerlove_sigma_alpha(const Eigen::VectorXd& alpha_hat);

// alpha_j = first-stage intercept minus x2_j' gamma from a preliminary fit.
Eigen::VectorXd group_effect_estimates(const GroupedPanel& panel, const FirstStageFit& fs,
                                       int tau_index, const Eigen::VectorXd& gamma_x2);

// Z*_j = (Xt_j (V_j/n_j) Xt_j' + ones*sigma_a^2)^+ X_j stacked over groups,
// computed through the low-rank eigenstructure of the n_j x n_j matrix.
// target defaults to the full design [x1 x2]; pass panel.x1 for the
// within-identified version.
Eigen::MatrixXd re_optimal_instrument(const GroupedPanel& panel,
                                      const FirstStageVariance& v, double sigma_alpha_sq,
                                      const Eigen::MatrixXd* target = nullptr);

// sigma_alpha^2 = 0 case with the target restricted to the identified
// (within) coefficients.
Eigen::MatrixXd fe_optimal_instrument(const GroupedPanel& panel,
                                      const FirstStageVariance& v,
                                      const Eigen::MatrixXd* target = nullptr);

// Dense n_j x n_j pseudo-inverse route; reference implementation for the
// low-rank path.
Eigen::MatrixXd re_optimal_instrument_dense(const GroupedPanel& panel,
                                            const FirstStageVariance& v,
                                            double sigma_alpha_sq,
                                            const Eigen::MatrixXd* target = nullptr);

} // namespace qpanel
