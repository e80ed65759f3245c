#include "qpanel/qr_solver.hpp"

#include <Eigen/Dense>
#include <limits>
#include <algorithm>
#include <cmath>
#include <numeric>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace qpanel {

double check_loss(const Eigen::VectorXd& y, const Eigen::MatrixXd& X,
                  const Eigen::VectorXd& b, double tau) {
    const Eigen::VectorXd r = y - X * b;
    double s = 0.0;
    for (int i = 0; i < r.size(); ++i)
        s += r(i) * (tau - (r(i) < 0.0 ? 1.0 : 0.0));
    return s / static_cast<double>(r.size());
}

namespace {

// Greedy column selection: keep columns in order as long as they are not
// (numerically) in the span of the already-kept ones. The intercept comes
// first in first-stage designs, so within-group-constant regressors get
// dropped rather than the intercept.
std::vector<int> independent_columns(const Eigen::MatrixXd& X, double rank_tol) {
    const int n = static_cast<int>(X.rows());
    const int p = static_cast<int>(X.cols());
    std::vector<int> kept;
    Eigen::MatrixXd basis(n, 0);
    for (int k = 0; k < p; ++k) {
        Eigen::VectorXd v = X.col(k);
        const double scale = v.norm();
        if (scale <= 0.0) continue;
        // two rounds of Gram-Schmidt for numerical stability
        for (int rep = 0; rep < 2; ++rep)
            if (basis.cols() > 0) v -= basis * (basis.transpose() * v);
        if (v.norm() > rank_tol * scale) {
            basis.conservativeResize(n, basis.cols() + 1);
            basis.col(basis.cols() - 1) = v / v.norm();
            kept.push_back(k);
        }
    }
    return kept;
}

// Directional derivative of the (unnormalized) check loss along d, where
// s = X*d and zero residuals contribute their one-sided terms.
double directional_derivative(const Eigen::VectorXd& r, const Eigen::VectorXd& s,
                              double tau, double ztol) {
    double dd = 0.0;
    for (int i = 0; i < r.size(); ++i) {
        const double si = s(i);
        if (r(i) > ztol) {
            dd -= tau * si;
        } else if (r(i) < -ztol) {
            dd += (1.0 - tau) * si;
        } else {
            dd += si > 0.0 ? (1.0 - tau) * si : -tau * si;
        }
    }
    return dd;
}

struct SimplexResult {
    Eigen::VectorXd coef;
    Eigen::VectorXd residuals;
    int iterations = 0;
    bool converged = false;
};

// Vertex-descent simplex on the quantile-regression LP: the solution is a
// basic solution interpolating q observations; each pivot takes the long
// (weighted-median) step along an edge with negative directional derivative.
SimplexResult qr_simplex(const Eigen::VectorXd& y, const Eigen::MatrixXd& A,
                         double tau, double ztol, const QrOptions& opts,
                         const std::vector<int>& start_basis) {
    const int n = static_cast<int>(A.rows());
    const int q = static_cast<int>(A.cols());
    const int max_iter = opts.max_iter_scale * n + 100 * q + 200;

    std::vector<int> basis = start_basis;
    Eigen::MatrixXd B(q, q);
    for (int k = 0; k < q; ++k) B.row(k) = A.row(basis[k]);
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(B);

    struct Breakpoint {
        double t;
        double gain; // |x_i' d|, the slope increase when crossing
        int row;
        bool operator<(const Breakpoint& o) const { return t < o.t; }
    };

    SimplexResult out;
    Eigen::VectorXd yb(q);
    std::vector<Breakpoint> steps;
    steps.reserve(n);

    for (int it = 0; it < max_iter; ++it) {
        out.iterations = it;
        for (int k = 0; k < q; ++k) yb(k) = y(basis[k]);
        const Eigen::VectorXd b = lu.solve(yb);
        const Eigen::VectorXd r = y - A * b;
        const Eigen::MatrixXd Binv = lu.inverse();
        const Eigen::MatrixXd S = A * Binv; // S(i,k) = x_i' d_k

        // most negative directional derivative over the 2q edge directions
        int best_k = -1;
        double best_sign = 1.0, best_dd = 0.0;
        for (int k = 0; k < q; ++k) {
            const double tol = opts.opt_tol * (S.col(k).cwiseAbs().sum() + 1.0);
            const double dp = directional_derivative(r, S.col(k), tau, ztol);
            if (dp < -tol && dp < best_dd) { best_dd = dp; best_k = k; best_sign = 1.0; }
            const double dm = directional_derivative(r, -S.col(k), tau, ztol);
            if (dm < -tol && dm < best_dd) { best_dd = dm; best_k = k; best_sign = -1.0; }
        }
        if (best_k < 0) {
            out.coef = b;
            out.residuals = r;
            out.converged = true;
            return out;
        }

        // long step: walk breakpoints t_i = r_i / s_i until the slope turns
        steps.clear();
        for (int i = 0; i < n; ++i) {
            const double si = best_sign * S(i, best_k);
            if (std::fabs(si) < 1e-14 || std::fabs(r(i)) <= ztol) continue;
            const double t = r(i) / si;
            if (t > 0.0) steps.push_back({t, std::fabs(si), i});
        }
        std::sort(steps.begin(), steps.end());
        double slope = best_dd;
        int enter = -1;
        for (const auto& bp : steps) {
            slope += bp.gain;
            if (slope >= 0.0) { enter = bp.row; break; }
        }
        if (enter < 0) return out; // unbounded or stalled; caller retries

        basis[best_k] = enter;
        B.row(best_k) = A.row(enter);
        lu.compute(B);
    }
    return out;
}

std::vector<int> starting_basis(const Eigen::VectorXd& y, const Eigen::MatrixXd& A,
                                double rank_tol, bool warm) {
    const int n = static_cast<int>(A.rows());
    const int q = static_cast<int>(A.cols());
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    if (warm) {
        // rows closest to the OLS fit make a good initial vertex
        const Eigen::VectorXd b0 = A.colPivHouseholderQr().solve(y);
        const Eigen::VectorXd r0 = (y - A * b0).cwiseAbs();
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return r0(a) < r0(b); });
    }
    std::vector<int> basis;
    Eigen::MatrixXd rows(q, 0);
    for (int i : order) {
        Eigen::VectorXd v = A.row(i).transpose();
        const double scale = v.norm();
        if (scale <= 0.0) continue;
        for (int rep = 0; rep < 2; ++rep)
            if (rows.cols() > 0) v -= rows * (rows.transpose() * v);
        if (v.norm() > std::max(rank_tol, 1e-12) * scale) {
            rows.conservativeResize(q, rows.cols() + 1);
            rows.col(rows.cols() - 1) = v / v.norm();
            basis.push_back(i);
            if (static_cast<int>(basis.size()) == q) return basis;
        }
    }
    throw NumericError("design matrix does not contain a full-rank row subset");
}

} // namespace

QrFit fit_qr(const Eigen::VectorXd& y, const Eigen::MatrixXd& X, double tau,
             const QrOptions& opts) {
    const int n = static_cast<int>(y.size());
    const int p = static_cast<int>(X.cols());
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("quantile index outside (0,1)");
    if (X.rows() != n) throw DataError("design rows do not match outcome");
    if (!y.allFinite() || !X.allFinite()) throw DataError("non-finite inputs to fit_qr");

    const std::vector<int> kept = independent_columns(X, opts.rank_tol);
    const int q = static_cast<int>(kept.size());
    if (q == 0) throw NumericError("rank-0 design in fit_qr");
    if (n < q) throw DataError("fewer observations than design rank");

    Eigen::MatrixXd A(n, q);
    for (int k = 0; k < q; ++k) A.col(k) = X.col(kept[k]);

    const double ztol = 1e-8 * (1.0 + y.cwiseAbs().mean());
    SimplexResult res = qr_simplex(y, A, tau, ztol, opts, starting_basis(y, A, opts.rank_tol, true));
    if (!res.converged) {
        // cold restart from a leverage-based vertex
        res = qr_simplex(y, A, tau, ztol, opts, starting_basis(y, A, opts.rank_tol, false));
        if (!res.converged) throw NumericError("quantile regression simplex did not converge");
    }

    QrFit fit;
    fit.tau = tau;
    fit.coef = Eigen::VectorXd::Constant(p, std::numeric_limits<double>::quiet_NaN());
    for (int k = 0; k < q; ++k) fit.coef(kept[k]) = res.coef(k);
    for (int k = 0; k < p; ++k)
        if (std::find(kept.begin(), kept.end(), k) == kept.end()) fit.dropped.push_back(k);
    fit.residuals = res.residuals;
    fit.iterations = res.iterations;

    double obj = 0.0;
    for (int i = 0; i < n; ++i) {
        const double r = fit.residuals(i);
        obj += r * (tau - (r < 0.0 ? 1.0 : 0.0));
        if (r < -ztol) fit.n_neg++;
        else if (r <= ztol) fit.n_zero++;
    }
    fit.objective = obj / static_cast<double>(n);
    const double ntau = n * tau;
    fit.certificate_ok = (fit.n_neg <= ntau + 1e-9) && (ntau <= fit.n_neg + fit.n_zero + 1e-9);
    if (!fit.certificate_ok)
        throw NumericError("quantile regression optimality certificate failed");
    return fit;
}

Eigen::MatrixXd first_stage_design(const GroupedPanel& panel, int j) {
    const int nj = panel.n_j(j);
    Eigen::MatrixXd Xt(nj, 1 + panel.k1());
    Xt.col(0).setOnes();
    Xt.rightCols(panel.k1()) = panel.x1_block(j);
    return Xt;
}

int FirstStageFit::tau_index(double tau) const {
    for (std::size_t t = 0; t < taus.size(); ++t)
        if (std::fabs(taus[t] - tau) < 1e-12) return static_cast<int>(t);
    throw ConfigError("quantile " + std::to_string(tau) + " not in the fitted grid");
}

namespace {

void assemble_fitted(const GroupedPanel& panel, std::vector<std::vector<QrFit>>& fits,
                     std::vector<Eigen::VectorXd>& fitted) {
    const int T = static_cast<int>(fits.size());
    fitted.assign(T, Eigen::VectorXd(panel.n_rows()));
    for (int t = 0; t < T; ++t) {
        for (int j = 0; j < panel.m(); ++j) {
            const Eigen::MatrixXd Xt = first_stage_design(panel, j);
            const QrFit& f = fits[t][j];
            Eigen::VectorXd yh = Eigen::VectorXd::Zero(panel.n_j(j));
            for (int k = 0; k < Xt.cols(); ++k)
                if (std::isfinite(f.coef(k))) yh += Xt.col(k) * f.coef(k);
            fitted[t].segment(panel.group_start[j], panel.n_j(j)) = yh;
        }
    }
}

} // namespace

FirstStageFit fit_first_stage_serial(const GroupedPanel& panel, const QuantileGrid& grid,
                                     const QrOptions& opts) {
    FirstStageFit fs;
    fs.taus = grid.taus;
    fs.fits.assign(grid.size(), std::vector<QrFit>(panel.m()));
    for (int t = 0; t < grid.size(); ++t)
        for (int j = 0; j < panel.m(); ++j) {
            try {
                fs.fits[t][j] = fit_qr(panel.y_block(j), first_stage_design(panel, j),
                                       grid[t], opts);
            } catch (const Error& e) {
                throw NumericError("first stage failed in group " + panel.group_labels[j] +
                                   " at tau=" + std::to_string(grid[t]) + ": " + e.what());
            }
        }
    assemble_fitted(panel, fs.fits, fs.fitted);
    return fs;
}

FirstStageFit fit_first_stage(const GroupedPanel& panel, const QuantileGrid& grid,
                              int workers, const QrOptions& opts) {
    FirstStageFit fs;
    fs.taus = grid.taus;
    fs.fits.assign(grid.size(), std::vector<QrFit>(panel.m()));

    const int tasks = grid.size() * panel.m();
    std::string first_error;
    bool failed = false;

#ifdef _OPENMP
    const int threads = workers > 0 ? workers : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic, 4) num_threads(threads)
#endif
    for (int task = 0; task < tasks; ++task) {
        const int t = task / panel.m();
        const int j = task % panel.m();
        try {
            fs.fits[t][j] = fit_qr(panel.y_block(j), first_stage_design(panel, j),
                                   grid[t], opts);
        } catch (const std::exception& e) {
            const std::string msg = "first stage failed in group " + panel.group_labels[j] +
                                    " at tau=" + std::to_string(grid[t]) + ": " + e.what();
#ifdef _OPENMP
#pragma omp critical
#endif
            {
                if (!failed) { failed = true; first_error = msg; }
            }
        }
    }
    if (failed) throw NumericError(first_error);
    assemble_fitted(panel, fs.fits, fs.fitted);
    return fs;
}

FirstStageFit fit_ols_first_stage(const GroupedPanel& panel) {
    FirstStageFit fs;
    fs.least_squares = true;
    fs.taus = {std::numeric_limits<double>::quiet_NaN()};
    fs.fits.assign(1, std::vector<QrFit>(panel.m()));
    for (int j = 0; j < panel.m(); ++j) {
        const Eigen::MatrixXd Xt = first_stage_design(panel, j);
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Xt);
        qr.setThreshold(1e-10);
        if (qr.rank() < Xt.cols())
            throw NumericError("singular first-stage Gram matrix in group " +
                               panel.group_labels[j]);
        QrFit f;
        f.tau = std::numeric_limits<double>::quiet_NaN();
        f.coef = qr.solve(panel.y_block(j));
        f.residuals = panel.y_block(j) - Xt * f.coef;
        f.objective = f.residuals.squaredNorm() / panel.n_j(j);
        f.certificate_ok = true;
        fs.fits[0][j] = std::move(f);
    }
    assemble_fitted(panel, fs.fits, fs.fitted);
    return fs;
}

} // namespace qpanel
