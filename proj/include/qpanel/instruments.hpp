#pragma once

#include <Eigen/Core>
#include <string>
#include <utility>
#include <vector>

#include "qpanel/panel.hpp"

namespace qpanel {

enum class InstrumentKind {
    Pooled,           // Z = [x1, X2]
    Between,          // Z = [mean(x1), X2]
    FixedEffects,     // Z = [within(x1)], identifies beta only
    RandomEffectsGMM, // Z = [within(x1), mean(x1), X2], overidentified
    HausmanTaylor,    // Z = [within(x1), mean(x1_ex), X2_ex]
    External,         // own instruments mixed with z_ext columns
    OptimalRE,        // Eq.-style optimal instrument, built per tau elsewhere
    OptimalFE,
};

struct InstrumentSpec {
    InstrumentKind kind = InstrumentKind::Pooled;

    // Hausman-Taylor: indices of exogenous columns; the rest are treated as
    // potentially endogenous.
    std::vector<int> x1_exogenous;
    std::vector<int> x2_exogenous;

    // External: x1 instrumented by its within transform (default) or by
    // itself; x2 columns listed as endogenous are dropped from the own
    // instruments; z_ext columns are appended.
    bool x1_within = true;
    std::vector<int> x2_endogenous;
    std::vector<int> z_ext_columns;
};

InstrumentKind instrument_kind_from_string(const std::string& s);
std::string to_string(InstrumentKind k);

// Second-stage regressor matrix X = [X1 | X2] (declared column order).
Eigen::MatrixXd build_design(const GroupedPanel& panel);
std::vector<std::string> design_names(const GroupedPanel& panel);

// FixedEffects estimates only the coefficients identified through within
// variation, so its design is X1 alone.
bool fe_like(InstrumentKind k);

struct InstrumentSet {
    Eigen::MatrixXd Z;
    std::vector<std::string> names;
};

// Materialize Z for a constructed spec and verify identification:
// S_ZX = Z'X/N must have smallest singular value > 1e-10 * largest.
InstrumentSet build_instruments(const GroupedPanel& panel, const InstrumentSpec& spec);

// Diagnostic split into fast (exact zero group means, L1) and slow (L2)
// instrument columns; inference never requires this classification.
std::pair<std::vector<int>, std::vector<int>>
classify_columns(const Eigen::MatrixXd& Z, const GroupedPanel& panel);

void check_identification(const Eigen::MatrixXd& Z, const Eigen::MatrixXd& X);

} // namespace qpanel
