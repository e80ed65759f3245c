#pragma once

#include <Eigen/Core>
#include <optional>
#include <string>
#include <vector>

#include "qpanel/error.hpp"

namespace qpanel {

// Immutable grouped dataset. Rows are sorted by group (first-appearance
// order of the labels) and are contiguous per group; within a group the
// original file/row order is preserved.
struct GroupedPanel {
    Eigen::VectorXd y;       // N
    Eigen::MatrixXd x1;      // N x K1, individual-level regressors
    Eigen::MatrixXd x2;      // N x K2, group-level (constant within group);
                             // column 0 is the intercept when has_intercept
    Eigen::MatrixXd z_ext;   // N x L_ext external instruments (may be empty)

    std::vector<int> group;              // N, dense index in [0, m)
    std::vector<int> group_start;        // m+1 row offsets
    std::vector<std::string> group_labels;

    std::vector<std::string> x1_names, x2_names, z_names;
    bool has_intercept = true;

    // optional coarser clustering declared at load time; empty means one
    // cluster per group
    std::vector<int> cluster_of_group;

    int n_rows() const { return static_cast<int>(y.size()); }
    int m() const { return static_cast<int>(group_labels.size()); }
    int n_j(int j) const { return group_start[j + 1] - group_start[j]; }
    int k1() const { return static_cast<int>(x1.cols()); }
    int k2() const { return static_cast<int>(x2.cols()); }

    auto y_block(int j) const { return y.segment(group_start[j], n_j(j)); }
    auto x1_block(int j) const { return x1.middleRows(group_start[j], n_j(j)); }
    auto x2_row(int j) const { return x2.row(group_start[j]); }
};

struct QuantileGrid {
    std::vector<double> taus;

    QuantileGrid() = default;
    explicit QuantileGrid(std::vector<double> t);

    int size() const { return static_cast<int>(taus.size()); }
    double operator[](int i) const { return taus[i]; }
};

// Column-role mapping for CSV ingestion; mirrors the JSON config keys.
struct ColumnConfig {
    std::string outcome;
    std::string group;
    std::vector<std::string> x1;
    std::vector<std::string> x2;
    std::vector<std::string> instruments;
    std::string cluster;  // optional column at or above the group level
    bool add_intercept = true;
    int min_dof = 25;
};

// Assemble and validate a panel from in-memory columns. group_ids are
// arbitrary labels; rows are re-sorted by first appearance of the label.
GroupedPanel make_panel(const Eigen::VectorXd& y,
                        const Eigen::MatrixXd& x1,
                        const Eigen::MatrixXd& x2,
                        const std::vector<std::string>& group_ids,
                        const Eigen::MatrixXd& z_ext = Eigen::MatrixXd(),
                        bool add_intercept = true,
                        std::vector<std::string> x1_names = {},
                        std::vector<std::string> x2_names = {},
                        std::vector<std::string> z_names = {},
                        const std::vector<std::string>* cluster_ids = nullptr);

GroupedPanel load_csv(const std::string& path, const ColumnConfig& config);

struct FilterReport {
    std::vector<std::string> dropped_groups;
    std::vector<int> dropped_sizes;
};

// Drop groups with fewer than min_dof degrees of freedom, where
// dof_j = n_j - (K1_effective,j + 1) and K1_effective,j counts x1 columns
// that vary within group j.
GroupedPanel filter_min_dof(const GroupedPanel& panel, int min_dof,
                            FilterReport* report = nullptr);

// Group-wise transformations; x1 = within_demean + group_means exactly.
Eigen::MatrixXd within_demean(const GroupedPanel& panel);
Eigen::MatrixXd group_means(const GroupedPanel& panel);

// Same transforms for an arbitrary N x p matrix aligned with panel rows.
Eigen::MatrixXd within_demean(const GroupedPanel& panel, const Eigen::MatrixXd& a);
Eigen::MatrixXd group_means(const GroupedPanel& panel, const Eigen::MatrixXd& a);

void validate_panel(const GroupedPanel& panel);

} // namespace qpanel
