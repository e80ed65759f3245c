#pragma once

#include <optional>
#include <string>
#include <vector>

#include "qpanel/inference.hpp"
#include "qpanel/instruments.hpp"
#include "qpanel/md_estimator.hpp"
#include "qpanel/optimal_iv.hpp"

namespace qpanel {

// Full second-stage recipe: instruments, weighting, and plug-in options.
struct EstimatorSpec {
    std::string name = "md";
    bool clp = false;                     // comparator instead of an MD fit
    InstrumentSpec instruments;
    Weighting weighting = Weighting::TwoStageLS; // used when overidentified
    double powell_bandwidth = 0.0;        // 0 = automatic
    double sigma_alpha_override = -1.0;   // < 0 = Nerlove estimate
    int clp_iv_z_col = -1;                // CLP: z_ext column instrumenting ...
    int clp_iv_x2_col = -1;               // ... this x2 column
    bool run_j_test = false;              // attach the J-test per tau
};

struct TauResult {
    double tau = 0.5;
    std::vector<std::string> names;
    Eigen::VectorXd estimate, se, ci_lo, ci_hi;
    std::optional<TestResult> j;
    bool w_truncated = false;
};

struct EstimatorResult {
    std::string name;
    std::string kind;
    std::vector<TauResult> by_tau;
    std::vector<MdEstimate> fits;              // empty for CLP
    std::optional<CoefCovariance> sigma;       // stacked; tau-invariant Z only
};

enum class CiMethod {
    Sigma,     // sqrt(diag(G omega/m G')) — the adaptive plug-in
    Jackknife, // delete-one-cluster (CV3); preferable with few clusters
};

struct FitOptions {
    double confidence_level = 0.95;
    InferenceOptions inference;
    CiMethod ci = CiMethod::Sigma;
    // conventional clustered-inference finite-sample practice: t critical
    // values with (clusters - 1) degrees of freedom instead of the normal
    bool t_critical = false;
    int workers = 0;
};

// End-to-end second stage on a fitted first stage.
EstimatorResult fit_estimator(const GroupedPanel& panel, const FirstStageFit& fs,
                              const EstimatorSpec& spec,
                              const FitOptions& opts = FitOptions());

// Group-level values of an external instrument column (one row per group);
// errors if the column varies within a group.
Eigen::VectorXd group_level_column(const GroupedPanel& panel, int z_col);

} // namespace qpanel
