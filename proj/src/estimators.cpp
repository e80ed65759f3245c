#include "qpanel/estimators.hpp"

#include <algorithm>
#include <cmath>

namespace qpanel {

Eigen::VectorXd group_level_column(const GroupedPanel& panel, int z_col) {
    if (panel.z_ext.size() == 0 || z_col < 0 || z_col >= panel.z_ext.cols())
        throw ConfigError("external instrument column out of range");
    Eigen::VectorXd out(panel.m());
    for (int j = 0; j < panel.m(); ++j) {
        const int s = panel.group_start[j], nj = panel.n_j(j);
        const auto seg = panel.z_ext.col(z_col).segment(s, nj);
        if ((seg.array() != seg(0)).any())
            throw DataError("instrument column '" + panel.z_names[z_col] +
                            "' varies within group " + panel.group_labels[j]);
        out(j) = seg(0);
    }
    return out;
}

namespace {

int cluster_count(const GroupedPanel& panel, const FitOptions& opts) {
    if (opts.inference.cluster_of_group.empty()) return panel.m();
    std::vector<int> ids = opts.inference.cluster_of_group;
    std::sort(ids.begin(), ids.end());
    return static_cast<int>(std::unique(ids.begin(), ids.end()) - ids.begin());
}

double critical_value(const FitOptions& opts, int dof) {
    const double p = 1.0 - 0.5 * (1.0 - opts.confidence_level);
    return opts.t_critical ? t_quantile(p, std::max(dof, 1)) : normal_quantile(p);
}

TauResult make_tau_result(const MdEstimate& est, const Eigen::VectorXd& se, double crit) {
    TauResult r;
    r.tau = est.tau;
    r.names = est.names;
    r.estimate = est.delta;
    r.se = se;
    r.ci_lo = est.delta - crit * se;
    r.ci_hi = est.delta + crit * se;
    r.w_truncated = est.w_truncated;
    return r;
}

EstimatorResult fit_clp(const GroupedPanel& panel, const FirstStageFit& fs,
                        const EstimatorSpec& spec, const FitOptions& opts) {
    EstimatorResult out;
    out.name = spec.name;
    out.kind = "clp";
    // one observation per group; robust SEs with the matching t reference
    const double q = critical_value(opts, panel.m() - panel.k2());

    std::optional<Eigen::VectorXd> iv;
    if (spec.clp_iv_z_col >= 0) iv = group_level_column(panel, spec.clp_iv_z_col);

    for (std::size_t t = 0; t < fs.taus.size(); ++t) {
        const ClpFit fit = clp_fit(fs, static_cast<int>(t), panel,
                                   iv ? &*iv : nullptr, spec.clp_iv_x2_col);
        TauResult r;
        r.tau = fit.tau;
        r.names = fit.names;
        r.estimate = fit.gamma;
        r.se = fit.se;
        r.ci_lo = fit.gamma - q * fit.se;
        r.ci_hi = fit.gamma + q * fit.se;
        out.by_tau.push_back(std::move(r));
    }
    return out;
}

EstimatorResult fit_optimal(const GroupedPanel& panel, const FirstStageFit& fs,
                            const EstimatorSpec& spec, const FitOptions& opts) {
    const bool re = spec.instruments.kind == InstrumentKind::OptimalRE;
    EstimatorResult out;
    out.name = spec.name;
    out.kind = to_string(spec.instruments.kind);

    Eigen::MatrixXd X;
    std::vector<std::string> names;
    if (re) {
        X = build_design(panel);
        names = design_names(panel);
    } else {
        X = panel.x1;
        names = panel.x1_names;
    }

    for (std::size_t t = 0; t < fs.taus.size(); ++t) {
        const int ti = static_cast<int>(t);
        const FirstStageVariance v =
            powell_first_stage_variance(panel, fs, ti, spec.powell_bandwidth);

        Eigen::MatrixXd zstar;
        if (re) {
            double s2 = spec.sigma_alpha_override;
            if (s2 < 0.0) {
                // Nerlove plug-in on intercepts net of a between fit
                const InstrumentSet between =
                    build_instruments(panel, InstrumentSpec{InstrumentKind::Between});
                const MdEstimate pre = md_fit(fs.fitted[t], build_design(panel), between.Z,
                                              Eigen::MatrixXd(), fs.taus[t]);
                const Eigen::VectorXd gamma_x2 = pre.delta.tail(panel.k2());
                s2 = nerlove_sigma_alpha(group_effect_estimates(panel, fs, ti, gamma_x2));
            }
            zstar = re_optimal_instrument(panel, v, s2, &X);
        } else {
            zstar = fe_optimal_instrument(panel, v, &X);
        }

        MdEstimate est = md_fit(fs.fitted[t], X, zstar, Eigen::MatrixXd(), fs.taus[t], names);
        Eigen::VectorXd se;
        if (opts.ci == CiMethod::Jackknife) {
            se = jackknife_covariance(panel, X, zstar, fs.fitted[t], est.W, opts.inference)
                     .diagonal().cwiseMax(0.0).cwiseSqrt();
        } else {
            const MomentVariance mv = moment_variance(panel, zstar, {est.residuals},
                                                      {fs.taus[t]}, opts.inference);
            se = sigma_hat({est}, mv).se(0);
        }
        out.by_tau.push_back(
            make_tau_result(est, se, critical_value(opts, cluster_count(panel, opts) - 1)));
        out.fits.push_back(std::move(est));
    }
    return out;
}

} // namespace

EstimatorResult fit_estimator(const GroupedPanel& panel, const FirstStageFit& fs,
                              const EstimatorSpec& spec, const FitOptions& opts) {
    if (fs.least_squares)
        throw ConfigError("fit_estimator expects a quantile first stage");
    if (spec.clp) return fit_clp(panel, fs, spec, opts);
    if (spec.instruments.kind == InstrumentKind::OptimalRE ||
        spec.instruments.kind == InstrumentKind::OptimalFE)
        return fit_optimal(panel, fs, spec, opts);

    EstimatorResult out;
    out.name = spec.name;
    out.kind = to_string(spec.instruments.kind);

    Eigen::MatrixXd X;
    std::vector<std::string> names;
    if (fe_like(spec.instruments.kind)) {
        X = panel.x1;
        names = panel.x1_names;
    } else {
        X = build_design(panel);
        names = design_names(panel);
    }
    const InstrumentSet zset = build_instruments(panel, spec.instruments);
    const bool overidentified = zset.Z.cols() > X.cols();

    std::vector<Eigen::VectorXd> residuals;
    for (std::size_t t = 0; t < fs.taus.size(); ++t) {
        MdEstimate est;
        if (!overidentified) {
            est = md_fit(fs.fitted[t], X, zset.Z, Eigen::MatrixXd(), fs.taus[t], names);
        } else if (spec.weighting == Weighting::Efficient) {
            est = md_fit_efficient(fs.fitted[t], X, zset.Z, panel, fs.taus[t], names,
                                   opts.inference);
        } else {
            est = md_fit(fs.fitted[t], X, zset.Z, spec.weighting, fs.taus[t], names);
        }
        residuals.push_back(est.residuals);
        out.fits.push_back(std::move(est));
    }

    const MomentVariance mv =
        moment_variance(panel, zset.Z, residuals, fs.taus, opts.inference);
    const CoefCovariance sig = sigma_hat(out.fits, mv);
    const double crit = critical_value(opts, cluster_count(panel, opts) - 1);
    for (std::size_t t = 0; t < fs.taus.size(); ++t) {
        Eigen::VectorXd se = sig.se(static_cast<int>(t));
        if (opts.ci == CiMethod::Jackknife)
            se = jackknife_covariance(panel, X, zset.Z, fs.fitted[t], out.fits[t].W,
                                      opts.inference)
                     .diagonal().cwiseMax(0.0).cwiseSqrt();
        TauResult r = make_tau_result(out.fits[t], se, crit);
        if (spec.run_j_test) {
            if (!overidentified)
                throw ConfigError("estimator '" + spec.name +
                                  "' is exactly identified (L = K); the "
                                  "overidentification test needs L > K");
            if (spec.weighting != Weighting::Efficient)
                throw ConfigError("the overidentification test requires efficient weighting");
            r.j = j_test(out.fits[t], panel, zset.Z, opts.inference);
        }
        out.by_tau.push_back(std::move(r));
    }
    out.sigma = sig;
    return out;
}

} // namespace qpanel
