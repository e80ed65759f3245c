#pragma once

#include <Eigen/Core>
#include <vector>

#include "qpanel/panel.hpp"

namespace qpanel {

// One per-group fit: quantile regression (or OLS in the least-squares
// variant used by the algebraic equivalence checks).
struct QrFit {
    double tau = 0.5;
    Eigen::VectorXd coef;        // design-column order, NaN where dropped
    std::vector<int> dropped;    // rank-deficient columns removed group-locally
    double objective = 0.0;      // (1/n) sum of check losses at the optimum
    Eigen::VectorXd residuals;   // n_j
    int n_neg = 0;               // residuals < -ztol
    int n_zero = 0;              // |residuals| <= ztol
    int iterations = 0;
    bool certificate_ok = false; // n_neg <= n*tau <= n_neg + n_zero
};

struct QrOptions {
    double opt_tol = 1e-9;     // reduced-cost tolerance, relative to slope mass
    double rank_tol = 1e-10;   // relative column-dependence threshold
    int max_iter_scale = 50;   // iteration cap = scale*n + 100*K + 200
};

// Minimize (1/n) sum_i rho_tau(y_i - x_i'b) exactly (LP vertex solution).
// X must contain the intercept column explicitly.
QrFit fit_qr(const Eigen::VectorXd& y, const Eigen::MatrixXd& X, double tau,
             const QrOptions& opts = QrOptions());

// Check loss evaluated at an arbitrary coefficient vector; used by tests
// to verify the minimizer property.
double check_loss(const Eigen::VectorXd& y, const Eigen::MatrixXd& X,
                  const Eigen::VectorXd& b, double tau);

struct FirstStageFit {
    std::vector<double> taus;               // quantile grid (empty for OLS)
    bool least_squares = false;
    std::vector<std::vector<QrFit>> fits;   // [t][j]
    std::vector<Eigen::VectorXd> fitted;    // [t], each length N in panel order

    int tau_index(double tau) const;
};

// Group design for the first stage: [1, x1_j].
Eigen::MatrixXd first_stage_design(const GroupedPanel& panel, int j);

// Eq.-style first stage: one quantile regression per (group, tau).
// workers <= 0 uses the OpenMP default; the result is identical for any
// worker count.
FirstStageFit fit_first_stage(const GroupedPanel& panel, const QuantileGrid& grid,
                              int workers = 0, const QrOptions& opts = QrOptions());

// Serial reference implementation kept for testing and benchmarking.
FirstStageFit fit_first_stage_serial(const GroupedPanel& panel, const QuantileGrid& grid,
                                     const QrOptions& opts = QrOptions());

// Per-group OLS of y on [1, x1]; the first stage of the least-squares
// equivalence oracles.
FirstStageFit fit_ols_first_stage(const GroupedPanel& panel);

} // namespace qpanel
