#include "qpanel/panel.hpp"

#include <algorithm>
#include <cmath>
#include <cctype>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace qpanel {

QuantileGrid::QuantileGrid(std::vector<double> t) : taus(std::move(t)) {
    if (taus.empty()) throw ConfigError("quantile grid is empty");
    for (std::size_t i = 0; i < taus.size(); ++i) {
        if (!(taus[i] > 0.0 && taus[i] < 1.0))
            throw ConfigError("quantile index " + std::to_string(taus[i]) +
                              " outside (0,1)");
        if (i > 0 && !(taus[i] > taus[i - 1]))
            throw ConfigError("quantile grid must be strictly increasing");
    }
}

namespace {

double column_scale(const Eigen::VectorXd& col) {
    return 1.0 + col.cwiseAbs().mean();
}

} // namespace

void validate_panel(const GroupedPanel& panel) {
    const int n = panel.n_rows();
    const int m = panel.m();
    if (m < 2) throw DataError("panel needs at least 2 groups, got " + std::to_string(m));
    if (static_cast<int>(panel.group.size()) != n ||
        static_cast<int>(panel.group_start.size()) != m + 1)
        throw DataError("inconsistent group index structure");
    if (panel.x1.rows() != n || panel.x2.rows() != n)
        throw DataError("regressor row count does not match outcome");
    if (!panel.y.allFinite() || !panel.x1.allFinite() || !panel.x2.allFinite())
        throw DataError("non-finite values in panel");
    if (panel.z_ext.size() > 0 && (!panel.z_ext.allFinite() || panel.z_ext.rows() != n))
        throw DataError("invalid external instrument matrix");

    for (int j = 0; j < m; ++j) {
        if (panel.n_j(j) < 1) throw DataError("empty group " + panel.group_labels[j]);
        // x2 must be exactly constant within each group
        const auto block = panel.x2.middleRows(panel.group_start[j], panel.n_j(j));
        for (int k = 0; k < panel.k2(); ++k) {
            if ((block.col(k).array() != block(0, k)).any())
                throw DataError("group-level column '" + panel.x2_names[k] +
                                "' varies within group " + panel.group_labels[j]);
        }
    }
    // x1 columns may be constant within some groups but not globally
    for (int k = 0; k < panel.k1(); ++k) {
        if ((panel.x1.col(k).array() == panel.x1(0, k)).all())
            throw DataError("individual-level column '" + panel.x1_names[k] +
                            "' is globally constant; the intercept lives in x2");
    }
}

GroupedPanel make_panel(const Eigen::VectorXd& y,
                        const Eigen::MatrixXd& x1,
                        const Eigen::MatrixXd& x2,
                        const std::vector<std::string>& group_ids,
                        const Eigen::MatrixXd& z_ext,
                        bool add_intercept,
                        std::vector<std::string> x1_names,
                        std::vector<std::string> x2_names,
                        std::vector<std::string> z_names,
                        const std::vector<std::string>* cluster_ids) {
    const int n = static_cast<int>(y.size());
    if (static_cast<int>(group_ids.size()) != n)
        throw DataError("group id count does not match outcome length");
    if (cluster_ids && static_cast<int>(cluster_ids->size()) != n)
        throw DataError("cluster id count does not match outcome length");

    // dense group index in first-appearance order
    std::unordered_map<std::string, int> index;
    std::vector<std::string> labels;
    std::vector<int> gidx(n);
    for (int i = 0; i < n; ++i) {
        auto it = index.find(group_ids[i]);
        if (it == index.end()) {
            it = index.emplace(group_ids[i], static_cast<int>(labels.size())).first;
            labels.push_back(group_ids[i]);
        }
        gidx[i] = it->second;
    }
    const int m = static_cast<int>(labels.size());

    // stable sort by group, preserving original order within a group
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::stable_sort(perm.begin(), perm.end(),
                     [&](int a, int b) { return gidx[a] < gidx[b]; });

    GroupedPanel p;
    p.y.resize(n);
    p.x1.resize(n, x1.cols());
    const int k2_in = static_cast<int>(x2.cols());
    p.x2.resize(n, k2_in + (add_intercept ? 1 : 0));
    p.z_ext.resize(z_ext.size() > 0 ? n : 0, z_ext.cols());
    p.group.resize(n);
    p.has_intercept = add_intercept;

    for (int i = 0; i < n; ++i) {
        const int src = perm[i];
        p.y(i) = y(src);
        p.x1.row(i) = x1.row(src);
        if (add_intercept) {
            p.x2(i, 0) = 1.0;
            if (k2_in > 0) p.x2.row(i).tail(k2_in) = x2.row(src);
        } else {
            p.x2.row(i) = x2.row(src);
        }
        if (p.z_ext.size() > 0) p.z_ext.row(i) = z_ext.row(src);
        p.group[i] = gidx[src];
    }

    p.group_labels = std::move(labels);
    p.group_start.assign(m + 1, 0);
    for (int i = 0; i < n; ++i) p.group_start[p.group[i] + 1]++;
    for (int j = 0; j < m; ++j) p.group_start[j + 1] += p.group_start[j];

    if (x1_names.empty())
        for (int k = 0; k < x1.cols(); ++k) x1_names.push_back("x1_" + std::to_string(k + 1));
    p.x1_names = std::move(x1_names);
    if (x2_names.empty())
        for (int k = 0; k < k2_in; ++k) x2_names.push_back("x2_" + std::to_string(k + 1));
    if (add_intercept) x2_names.insert(x2_names.begin(), "(intercept)");
    p.x2_names = std::move(x2_names);
    if (z_names.empty())
        for (int k = 0; k < z_ext.cols(); ++k) z_names.push_back("z_" + std::to_string(k + 1));
    p.z_names = std::move(z_names);

    if (cluster_ids) {
        // cluster labels must be constant within each group (weakly higher level)
        std::unordered_map<std::string, int> cindex;
        p.cluster_of_group.assign(m, -1);
        for (int i = 0; i < n; ++i) {
            const std::string& lab = (*cluster_ids)[perm[i]];
            auto it = cindex.find(lab);
            if (it == cindex.end())
                it = cindex.emplace(lab, static_cast<int>(cindex.size())).first;
            const int j = p.group[i];
            if (p.cluster_of_group[j] == -1) p.cluster_of_group[j] = it->second;
            else if (p.cluster_of_group[j] != it->second)
                throw DataError("cluster label varies within group " + p.group_labels[j] +
                                "; clusters must sit at or above the group level");
        }
    }

    validate_panel(p);
    return p;
}

namespace {

// RFC-4180 style row splitter: quoted fields, embedded commas and quotes.
std::vector<std::string> split_csv_row(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    fields.push_back(cur);
    return fields;
}

double parse_number(const std::string& s, int row, const std::string& col) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw DataError("non-numeric value '" + s + "' at row " + std::to_string(row) +
                        ", column '" + col + "'");
    }
}

} // namespace

GroupedPanel load_csv(const std::string& path, const ColumnConfig& config) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open CSV file: " + path);

    std::string line;
    if (!std::getline(in, line)) throw DataError("empty CSV file: " + path);
    const std::vector<std::string> header = split_csv_row(line);

    auto find_col = [&](const std::string& name) {
        for (std::size_t k = 0; k < header.size(); ++k)
            if (header[k] == name) return static_cast<int>(k);
        throw ConfigError("column '" + name + "' not found in CSV header");
    };

    const int c_y = find_col(config.outcome);
    const int c_g = find_col(config.group);
    const int c_cl = config.cluster.empty() ? -1 : find_col(config.cluster);
    std::vector<int> c_x1, c_x2, c_z;
    for (const auto& n : config.x1) c_x1.push_back(find_col(n));
    for (const auto& n : config.x2) c_x2.push_back(find_col(n));
    for (const auto& n : config.instruments) c_z.push_back(find_col(n));

    std::vector<double> ys;
    std::vector<std::vector<double>> x1s, x2s, zs;
    std::vector<std::string> gids, clids;
    int row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
        const auto f = split_csv_row(line);
        if (f.size() != header.size())
            throw DataError("row " + std::to_string(row) + " has " +
                            std::to_string(f.size()) + " fields, expected " +
                            std::to_string(header.size()));
        for (const auto& cell : f)
            if (cell.empty())
                throw DataError("missing value at row " + std::to_string(row));
        ys.push_back(parse_number(f[c_y], row, config.outcome));
        gids.push_back(f[c_g]);
        if (c_cl >= 0) clids.push_back(f[c_cl]);
        std::vector<double> r1, r2, rz;
        for (std::size_t k = 0; k < c_x1.size(); ++k)
            r1.push_back(parse_number(f[c_x1[k]], row, config.x1[k]));
        for (std::size_t k = 0; k < c_x2.size(); ++k)
            r2.push_back(parse_number(f[c_x2[k]], row, config.x2[k]));
        for (std::size_t k = 0; k < c_z.size(); ++k)
            rz.push_back(parse_number(f[c_z[k]], row, config.instruments[k]));
        x1s.push_back(std::move(r1));
        x2s.push_back(std::move(r2));
        zs.push_back(std::move(rz));
    }
    const int n = static_cast<int>(ys.size());
    if (n == 0) throw DataError("CSV has a header but no data rows: " + path);

    Eigen::VectorXd y(n);
    Eigen::MatrixXd x1(n, c_x1.size()), x2(n, c_x2.size()), z(c_z.empty() ? 0 : n, c_z.size());
    for (int i = 0; i < n; ++i) {
        y(i) = ys[i];
        for (std::size_t k = 0; k < c_x1.size(); ++k) x1(i, k) = x1s[i][k];
        for (std::size_t k = 0; k < c_x2.size(); ++k) x2(i, k) = x2s[i][k];
        for (std::size_t k = 0; k < c_z.size(); ++k) z(i, k) = zs[i][k];
    }
    return make_panel(y, x1, x2, gids, z, config.add_intercept,
                      config.x1, config.x2, config.instruments,
                      c_cl >= 0 ? &clids : nullptr);
}

namespace {

// number of x1 columns that vary within group j
int k1_effective(const GroupedPanel& p, int j) {
    const auto block = p.x1_block(j);
    int k_eff = 0;
    for (int k = 0; k < p.k1(); ++k)
        if ((block.col(k).array() != block(0, k)).any()) ++k_eff;
    return k_eff;
}

} // namespace

GroupedPanel filter_min_dof(const GroupedPanel& panel, int min_dof, FilterReport* report) {
    if (min_dof < 0) throw ConfigError("min_dof must be nonnegative");

    std::vector<char> keep(panel.m(), 1);
    FilterReport rep;
    for (int j = 0; j < panel.m(); ++j) {
        const int dof = panel.n_j(j) - (k1_effective(panel, j) + 1);
        if (dof < min_dof) {
            keep[j] = 0;
            rep.dropped_groups.push_back(panel.group_labels[j]);
            rep.dropped_sizes.push_back(panel.n_j(j));
        }
    }
    if (report) *report = rep;
    if (rep.dropped_groups.empty()) return panel;

    std::vector<int> rows;
    for (int i = 0; i < panel.n_rows(); ++i)
        if (keep[panel.group[i]]) rows.push_back(i);
    if (rows.empty())
        throw DataError("min_dof filter dropped all " + std::to_string(panel.m()) + " groups");

    const int n = static_cast<int>(rows.size());
    Eigen::VectorXd y(n);
    Eigen::MatrixXd x1(n, panel.k1());
    // strip the intercept; make_panel re-appends it
    const int k2_raw = panel.k2() - (panel.has_intercept ? 1 : 0);
    Eigen::MatrixXd x2(n, k2_raw);
    Eigen::MatrixXd z(panel.z_ext.size() > 0 ? n : 0, panel.z_ext.cols());
    std::vector<std::string> gids(n), clids(n);
    for (int i = 0; i < n; ++i) {
        const int src = rows[i];
        y(i) = panel.y(src);
        x1.row(i) = panel.x1.row(src);
        x2.row(i) = panel.x2.row(src).tail(k2_raw);
        if (z.size() > 0) z.row(i) = panel.z_ext.row(src);
        gids[i] = panel.group_labels[panel.group[src]];
        if (!panel.cluster_of_group.empty())
            clids[i] = "c" + std::to_string(panel.cluster_of_group[panel.group[src]]);
    }
    std::vector<std::string> x2n(panel.x2_names.begin() + (panel.has_intercept ? 1 : 0),
                                 panel.x2_names.end());
    return make_panel(y, x1, x2, gids, z, panel.has_intercept,
                      panel.x1_names, x2n, panel.z_names,
                      panel.cluster_of_group.empty() ? nullptr : &clids);
}

Eigen::MatrixXd group_means(const GroupedPanel& panel, const Eigen::MatrixXd& a) {
    if (a.rows() != panel.n_rows()) throw DataError("row count mismatch in group_means");
    Eigen::MatrixXd out(a.rows(), a.cols());
    for (int j = 0; j < panel.m(); ++j) {
        const int s = panel.group_start[j], nj = panel.n_j(j);
        const Eigen::RowVectorXd mean = a.middleRows(s, nj).colwise().mean();
        out.middleRows(s, nj) = mean.replicate(nj, 1);
    }
    return out;
}

Eigen::MatrixXd within_demean(const GroupedPanel& panel, const Eigen::MatrixXd& a) {
    Eigen::MatrixXd out = a - group_means(panel, a);
    // second pass removes the last bits of rounding so group means are
    // exactly zero at working tolerance
    for (int j = 0; j < panel.m(); ++j) {
        const int s = panel.group_start[j], nj = panel.n_j(j);
        const Eigen::RowVectorXd mean = out.middleRows(s, nj).colwise().mean();
        out.middleRows(s, nj).rowwise() -= mean;
    }
    return out;
}

Eigen::MatrixXd group_means(const GroupedPanel& panel) { return group_means(panel, panel.x1); }
Eigen::MatrixXd within_demean(const GroupedPanel& panel) { return within_demean(panel, panel.x1); }

} // namespace qpanel
