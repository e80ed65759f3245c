#pragma once

// Shared fixtures and independent oracles for the test suites. Everything
// here recomputes results through a different route than the library code
// it checks.

#include <Eigen/Dense>
#include <vector>

#include "qpanel/panel.hpp"
#include "qpanel/qr_solver.hpp"
#include "qpanel/rng.hpp"

namespace testutil {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Random unbalanced panel with k1 individual-level and k2_extra group-level
// regressor columns (plus the intercept), group effects, and optionally a
// group-level external instrument column.
inline qpanel::GroupedPanel random_panel(int m, int n_min, int n_max, int k1, int k2_extra,
                                         std::uint64_t seed, bool with_z = false) {
    qpanel::Philox rng(seed, 9001);
    std::vector<double> y;
    std::vector<std::vector<double>> x1rows, x2rows, zrows;
    std::vector<std::string> gid;
    for (int j = 0; j < m; ++j) {
        const int nj = n_min + static_cast<int>(rng.uniform() * (n_max - n_min + 1));
        std::vector<double> x2j(k2_extra);
        for (auto& v : x2j) v = rng.normal();
        const double zj = rng.normal();
        const double alpha = rng.normal();
        for (int i = 0; i < nj; ++i) {
            std::vector<double> x1i(k1);
            double xb = 0.0;
            for (int k = 0; k < k1; ++k) {
                x1i[k] = rng.normal() + 0.3 * zj;
                xb += (k + 1) * 0.5 * x1i[k];
            }
            for (int k = 0; k < k2_extra; ++k) xb += 0.7 * x2j[k];
            y.push_back(1.0 + xb + alpha + rng.normal());
            x1rows.push_back(x1i);
            x2rows.push_back(x2j);
            if (with_z) zrows.push_back({zj});
            gid.push_back("g" + std::to_string(j));
        }
    }
    const int n = static_cast<int>(y.size());
    VectorXd yv(n);
    MatrixXd x1(n, k1), x2(n, k2_extra), z(with_z ? n : 0, with_z ? 1 : 0);
    for (int i = 0; i < n; ++i) {
        yv(i) = y[i];
        for (int k = 0; k < k1; ++k) x1(i, k) = x1rows[i][k];
        for (int k = 0; k < k2_extra; ++k) x2(i, k) = x2rows[i][k];
        if (with_z) z(i, 0) = zrows[i][0];
    }
    return qpanel::make_panel(yv, x1, x2, gid, z, true);
}

// Exhaustive check-loss minimum over all exact-fit basic solutions (every
// full-rank size-K row subset). Exponential; only for tiny instances.
inline double brute_force_check_loss(const VectorXd& y, const MatrixXd& X, double tau) {
    const int n = static_cast<int>(X.rows());
    const int p = static_cast<int>(X.cols());
    std::vector<int> idx(p);
    for (int k = 0; k < p; ++k) idx[k] = k;
    double best = std::numeric_limits<double>::infinity();
    while (true) {
        MatrixXd B(p, p);
        VectorXd yb(p);
        for (int k = 0; k < p; ++k) {
            B.row(k) = X.row(idx[k]);
            yb(k) = y(idx[k]);
        }
        Eigen::FullPivLU<MatrixXd> lu(B);
        if (lu.isInvertible()) {
            const VectorXd b = lu.solve(yb);
            best = std::min(best, qpanel::check_loss(y, X, b, tau));
        }
        // next combination
        int k = p - 1;
        while (k >= 0 && idx[k] == n - p + k) --k;
        if (k < 0) break;
        ++idx[k];
        for (int k2 = k + 1; k2 < p; ++k2) idx[k2] = idx[k2 - 1] + 1;
    }
    return best;
}

// Within (fixed effects) least squares: demeaned OLS of y on x1.
inline VectorXd within_ols(const qpanel::GroupedPanel& p) {
    const MatrixXd xd = qpanel::within_demean(p, p.x1);
    VectorXd yd = p.y;
    for (int j = 0; j < p.m(); ++j) {
        const int s = p.group_start[j], nj = p.n_j(j);
        yd.segment(s, nj).array() -= yd.segment(s, nj).mean();
    }
    return (xd.transpose() * xd).ldlt().solve(xd.transpose() * yd);
}

// Between least squares: group-mean-replicated regression (weights groups
// by their size).
inline VectorXd between_ols(const qpanel::GroupedPanel& p) {
    MatrixXd x(p.n_rows(), p.k1() + p.k2());
    x.leftCols(p.k1()) = qpanel::group_means(p, p.x1);
    x.rightCols(p.k2()) = p.x2;
    VectorXd ybar(p.n_rows());
    for (int j = 0; j < p.m(); ++j) {
        const int s = p.group_start[j], nj = p.n_j(j);
        ybar.segment(s, nj).setConstant(p.y.segment(s, nj).mean());
    }
    return (x.transpose() * x).ldlt().solve(x.transpose() * ybar);
}

// Feasible-GLS random effects estimator via the classic theta transform,
// for given variance components.
inline VectorXd fgls_random_effects(const qpanel::GroupedPanel& p, double sigma_eps_sq,
                                    double sigma_alpha_sq) {
    MatrixXd x(p.n_rows(), p.k1() + p.k2());
    x.leftCols(p.k1()) = p.x1;
    x.rightCols(p.k2()) = p.x2;
    MatrixXd xt = x;
    VectorXd yt = p.y;
    for (int j = 0; j < p.m(); ++j) {
        const int s = p.group_start[j], nj = p.n_j(j);
        const double theta =
            1.0 - std::sqrt(sigma_eps_sq / (sigma_eps_sq + nj * sigma_alpha_sq));
        const Eigen::RowVectorXd xbar = x.middleRows(s, nj).colwise().mean();
        xt.middleRows(s, nj).rowwise() -= theta * xbar;
        yt.segment(s, nj).array() -= theta * p.y.segment(s, nj).mean();
    }
    return (xt.transpose() * xt).ldlt().solve(xt.transpose() * yt);
}

// Minimum distance on the first-stage coefficients with per-group weights:
// delta = (sum R' W_j R)^{-1} sum R' W_j beta_j, R_j = [[0, x2_j'], [I, 0]].
// With W_j = (V_j/n_j)^{-1} this is the efficient MD estimator.
inline VectorXd weighted_md_on_coefficients(const qpanel::GroupedPanel& p,
                                            const std::vector<VectorXd>& beta_j,
                                            const std::vector<MatrixXd>& w_j) {
    const int k1 = p.k1(), k2 = p.k2(), K = k1 + k2;
    MatrixXd lhs = MatrixXd::Zero(K, K);
    VectorXd rhs = VectorXd::Zero(K);
    for (int j = 0; j < p.m(); ++j) {
        MatrixXd r = MatrixXd::Zero(k1 + 1, K);
        r.block(0, k1, 1, k2) = p.x2_row(j);
        r.block(1, 0, k1, k1).setIdentity();
        lhs += r.transpose() * w_j[j] * r;
        rhs += r.transpose() * w_j[j] * beta_j[j];
    }
    return lhs.ldlt().solve(rhs);
}

} // namespace testutil
