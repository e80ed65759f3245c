#include "qpanel/instruments.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>

namespace qpanel {

InstrumentKind instrument_kind_from_string(const std::string& s) {
    if (s == "pooled") return InstrumentKind::Pooled;
    if (s == "between" || s == "be") return InstrumentKind::Between;
    if (s == "fixed_effects" || s == "fe") return InstrumentKind::FixedEffects;
    if (s == "re_gmm" || s == "random_effects_gmm") return InstrumentKind::RandomEffectsGMM;
    if (s == "hausman_taylor" || s == "ht") return InstrumentKind::HausmanTaylor;
    if (s == "external") return InstrumentKind::External;
    if (s == "re_oi" || s == "optimal_re") return InstrumentKind::OptimalRE;
    if (s == "fe_oi" || s == "optimal_fe") return InstrumentKind::OptimalFE;
    throw ConfigError("unknown estimator kind '" + s + "'");
}

std::string to_string(InstrumentKind k) {
    switch (k) {
        case InstrumentKind::Pooled: return "pooled";
        case InstrumentKind::Between: return "between";
        case InstrumentKind::FixedEffects: return "fixed_effects";
        case InstrumentKind::RandomEffectsGMM: return "re_gmm";
        case InstrumentKind::HausmanTaylor: return "hausman_taylor";
        case InstrumentKind::External: return "external";
        case InstrumentKind::OptimalRE: return "optimal_re";
        case InstrumentKind::OptimalFE: return "optimal_fe";
    }
    return "?";
}

bool fe_like(InstrumentKind k) {
    return k == InstrumentKind::FixedEffects || k == InstrumentKind::OptimalFE;
}

Eigen::MatrixXd build_design(const GroupedPanel& panel) {
    Eigen::MatrixXd X(panel.n_rows(), panel.k1() + panel.k2());
    X.leftCols(panel.k1()) = panel.x1;
    X.rightCols(panel.k2()) = panel.x2;
    return X;
}

std::vector<std::string> design_names(const GroupedPanel& panel) {
    std::vector<std::string> names = panel.x1_names;
    names.insert(names.end(), panel.x2_names.begin(), panel.x2_names.end());
    return names;
}

void check_identification(const Eigen::MatrixXd& Z, const Eigen::MatrixXd& X) {
    if (Z.cols() < X.cols())
        throw ConfigError("under-identified: L=" + std::to_string(Z.cols()) +
                          " instruments for K=" + std::to_string(X.cols()) + " regressors");
    const Eigen::MatrixXd s_zx = Z.transpose() * X / static_cast<double>(X.rows());
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(s_zx);
    const double smin = svd.singularValues().minCoeff();
    const double smax = svd.singularValues().maxCoeff();
    if (!(smin > 1e-10 * smax))
        throw NumericError("identification failure: smallest singular value of S_ZX is " +
                           std::to_string(smin) + " (largest " + std::to_string(smax) + ")");
}

namespace {

void append(Eigen::MatrixXd& Z, std::vector<std::string>& names,
            const Eigen::MatrixXd& cols, const std::vector<std::string>& cnames) {
    const auto old = Z.cols();
    Z.conservativeResize(cols.rows(), old + cols.cols());
    Z.rightCols(cols.cols()) = cols;
    names.insert(names.end(), cnames.begin(), cnames.end());
}

std::vector<std::string> tagged(const std::vector<std::string>& base, const std::string& tag,
                                const std::vector<int>* select = nullptr) {
    auto decorate = [&](const std::string& n) {
        return tag.empty() ? n : tag + "(" + n + ")";
    };
    std::vector<std::string> out;
    if (select) {
        for (int k : *select) {
            if (k < 0 || k >= static_cast<int>(base.size()))
                throw ConfigError("column index " + std::to_string(k) + " out of range");
            out.push_back(decorate(base[k]));
        }
    } else {
        for (const auto& n : base) out.push_back(decorate(n));
    }
    return out;
}

Eigen::MatrixXd select_cols(const Eigen::MatrixXd& a, const std::vector<int>& idx) {
    Eigen::MatrixXd out(a.rows(), idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
        if (idx[k] < 0 || idx[k] >= a.cols())
            throw ConfigError("column index " + std::to_string(idx[k]) + " out of range");
        out.col(k) = a.col(idx[k]);
    }
    return out;
}

std::vector<int> complement(const std::vector<int>& idx, int p) {
    std::vector<int> out;
    for (int k = 0; k < p; ++k)
        if (std::find(idx.begin(), idx.end(), k) == idx.end()) out.push_back(k);
    return out;
}

} // namespace

InstrumentSet build_instruments(const GroupedPanel& panel, const InstrumentSpec& spec) {
    const int n = panel.n_rows();
    InstrumentSet set;
    set.Z.resize(n, 0);

    switch (spec.kind) {
        case InstrumentKind::Pooled:
            append(set.Z, set.names, panel.x1, panel.x1_names);
            append(set.Z, set.names, panel.x2, panel.x2_names);
            break;
        case InstrumentKind::Between:
            append(set.Z, set.names, group_means(panel), tagged(panel.x1_names, "mean"));
            append(set.Z, set.names, panel.x2, panel.x2_names);
            break;
        case InstrumentKind::FixedEffects:
            append(set.Z, set.names, within_demean(panel), tagged(panel.x1_names, "within"));
            break;
        case InstrumentKind::RandomEffectsGMM:
            append(set.Z, set.names, within_demean(panel), tagged(panel.x1_names, "within"));
            append(set.Z, set.names, group_means(panel), tagged(panel.x1_names, "mean"));
            append(set.Z, set.names, panel.x2, panel.x2_names);
            break;
        case InstrumentKind::HausmanTaylor: {
            const auto x2_en = complement(spec.x2_exogenous, panel.k2());
            if (static_cast<int>(spec.x1_exogenous.size()) < static_cast<int>(x2_en.size()))
                throw ConfigError("Hausman-Taylor order condition failed: " +
                                  std::to_string(spec.x1_exogenous.size()) +
                                  " exogenous x1 columns cannot instrument " +
                                  std::to_string(x2_en.size()) + " endogenous x2 columns");
            append(set.Z, set.names, within_demean(panel), tagged(panel.x1_names, "within"));
            if (!spec.x1_exogenous.empty())
                append(set.Z, set.names,
                       select_cols(group_means(panel), spec.x1_exogenous),
                       tagged(panel.x1_names, "mean", &spec.x1_exogenous));
            if (!spec.x2_exogenous.empty())
                append(set.Z, set.names, select_cols(panel.x2, spec.x2_exogenous),
                       tagged(panel.x2_names, "", &spec.x2_exogenous));
            break;
        }
        case InstrumentKind::External: {
            if (spec.x1_within)
                append(set.Z, set.names, within_demean(panel), tagged(panel.x1_names, "within"));
            else
                append(set.Z, set.names, panel.x1, panel.x1_names);
            const auto x2_ex = complement(spec.x2_endogenous, panel.k2());
            if (!x2_ex.empty())
                append(set.Z, set.names, select_cols(panel.x2, x2_ex),
                       tagged(panel.x2_names, "", &x2_ex));
            if (!spec.z_ext_columns.empty()) {
                if (panel.z_ext.size() == 0)
                    throw ConfigError("external instrument spec but the panel has no z columns");
                append(set.Z, set.names, select_cols(panel.z_ext, spec.z_ext_columns),
                       tagged(panel.z_names, "", &spec.z_ext_columns));
            }
            break;
        }
        case InstrumentKind::OptimalRE:
        case InstrumentKind::OptimalFE:
            throw ConfigError("optimal instruments are quantile-specific; "
                              "use the optimal_iv constructors");
    }

    const Eigen::MatrixXd X = fe_like(spec.kind) ? panel.x1 : build_design(panel);
    check_identification(set.Z, X);
    return set;
}

std::pair<std::vector<int>, std::vector<int>>
classify_columns(const Eigen::MatrixXd& Z, const GroupedPanel& panel) {
    std::vector<int> l1, l2;
    for (int k = 0; k < Z.cols(); ++k) {
        const double scale = 1.0 + Z.col(k).cwiseAbs().mean();
        double worst = 0.0;
        for (int j = 0; j < panel.m(); ++j) {
            const double mean =
                Z.col(k).segment(panel.group_start[j], panel.n_j(j)).mean();
            worst = std::max(worst, std::fabs(mean));
        }
        if (worst <= 1e-8 * scale) l1.push_back(k);
        else l2.push_back(k);
    }
    return {l1, l2};
}

} // namespace qpanel
