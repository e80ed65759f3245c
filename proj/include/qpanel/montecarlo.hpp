#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qpanel/estimators.hpp"
#include "qpanel/panel.hpp"

namespace qpanel {

enum class DgpKind { Grouped1, Grouped2, Grouped3, Panel };

DgpKind dgp_kind_from_string(const std::string& s);
std::string to_string(DgpKind k);

struct DgpSpec {
    DgpKind kind = DgpKind::Grouped1;
    int m = 25;
    int n = 25;
    double lambda = 0.0;  // Panel only: corr(h_j, alpha_j)
    std::uint64_t seed = 0;
};

// Quantile coefficient paths of the grouped designs: beta0 = tau/2,
// beta = gamma = sqrt(tau); group effect alpha(u) = u*eta - u/2.
double grouped_beta0(double tau);
double grouped_beta(double tau);
double grouped_gamma(double tau);
double grouped_alpha(double u, double eta);

// Panel design truth: beta(tau) = 1 + 0.1 * Phi^{-1}(tau).
double panel_beta(double tau);

// Name of the coefficient the simulation tables track, and its truth.
std::string dgp_target(DgpKind kind);
double dgp_truth(DgpKind kind, double tau);

// Replication r draws from the independent stream (seed, r).
GroupedPanel draw_grouped(const DgpSpec& spec, std::uint64_t rep);
GroupedPanel draw_panel(const DgpSpec& spec, std::uint64_t rep);
GroupedPanel draw_dgp(const DgpSpec& spec, std::uint64_t rep);

// The estimator menus of the simulation studies.
EstimatorSpec mc_estimator(DgpKind kind, const std::string& name);

struct McCell {
    std::string estimator;
    double tau = 0.5;
    double truth = 0.0;
    double bias = 0.0;
    double sd = 0.0;
    double mse = 0.0;
    double rel_mse = 0.0;          // NaN when no reference estimator ran
    double coverage_95 = 0.0;
    double ci_median_length = 0.0;
    double rejection_rate = 0.0;   // z-test of the true value at 5%
    double j_rejection_rate = 0.0; // NaN unless the J-test was attached
    int reps_used = 0;
    int failed = 0;
};

struct McReport {
    DgpSpec spec;
    std::vector<std::string> estimators;
    std::vector<double> taus;
    int reps = 0;
    int workers_hint = 0;   // informational; never serialized
    std::string rng;
    std::string target;
    double confidence_level = 0.95;
    std::vector<McCell> cells;

    std::string to_json() const;   // canonical bytes, worker-independent
    std::string to_csv() const;    // flat table export
};

struct McOptions {
    int workers = 0;               // <= 0: OpenMP default
    std::string reference;         // rel_mse denominator; "" → clp if present
    double confidence_level = 0.95;
    // conventional clustered-inference practice for the simulation tables:
    // delete-one-cluster jackknife CIs with t(m-1) critical values
    bool small_sample = true;
    InferenceOptions inference;
};

McReport run_mc(const DgpSpec& spec, const std::vector<EstimatorSpec>& estimators,
                const QuantileGrid& grid, int reps, const McOptions& opts = McOptions());

// Size/power table of the overidentification test on the RE-GMM moments.
struct HausmanRow {
    double lambda = 0.0;
    int m = 0, n = 0;
    double tau = 0.5;
    double rejection_rate = 0.0;
    int reps_used = 0;
    int failed = 0;
};

std::vector<HausmanRow> hausman_power_study(const std::vector<double>& lambdas,
                                            const std::vector<std::pair<int, int>>& cells,
                                            const QuantileGrid& grid, int reps,
                                            std::uint64_t seed,
                                            const McOptions& opts = McOptions());

// Deterministic pairwise summation over a fixed-order array.
double pairwise_sum(const double* data, std::size_t n);

} // namespace qpanel
