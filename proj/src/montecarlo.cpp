#include "qpanel/montecarlo.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "qpanel/rng.hpp"
#include "qpanel/version.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace qpanel {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

DgpKind dgp_kind_from_string(const std::string& s) {
    if (s == "grouped1") return DgpKind::Grouped1;
    if (s == "grouped2") return DgpKind::Grouped2;
    if (s == "grouped3") return DgpKind::Grouped3;
    if (s == "panel") return DgpKind::Panel;
    throw ConfigError("unknown DGP '" + s + "' (grouped1|grouped2|grouped3|panel)");
}

std::string to_string(DgpKind k) {
    switch (k) {
        case DgpKind::Grouped1: return "grouped1";
        case DgpKind::Grouped2: return "grouped2";
        case DgpKind::Grouped3: return "grouped3";
        case DgpKind::Panel: return "panel";
    }
    return "?";
}

double grouped_beta0(double tau) { return 0.5 * tau; }
double grouped_beta(double tau) { return std::sqrt(tau); }
double grouped_gamma(double tau) { return std::sqrt(tau); }
double grouped_alpha(double u, double eta) { return u * eta - 0.5 * u; }
double panel_beta(double tau) { return 1.0 + 0.1 * Philox::normal_icdf(tau); }

std::string dgp_target(DgpKind kind) { return kind == DgpKind::Panel ? "x1" : "x2"; }

double dgp_truth(DgpKind kind, double tau) {
    return kind == DgpKind::Panel ? panel_beta(tau) : grouped_gamma(tau);
}

GroupedPanel draw_grouped(const DgpSpec& spec, std::uint64_t rep) {
    if (spec.kind == DgpKind::Panel) throw ConfigError("grouped draw on a panel spec");
    Philox rng(spec.seed, rep);
    const int m = spec.m, n = spec.n, N = m * n;

    Eigen::VectorXd y(N);
    Eigen::MatrixXd x1(N, 1), x2(N, 1);
    Eigen::MatrixXd z(spec.kind == DgpKind::Grouped3 ? N : 0, 1);
    std::vector<std::string> gid(N);

    int row = 0;
    for (int j = 0; j < m; ++j) {
        double eta = 0.0, x2j, zj = 0.0;
        if (spec.kind == DgpKind::Grouped1) {
            x2j = std::exp(0.25 * rng.normal());
        } else if (spec.kind == DgpKind::Grouped2) {
            eta = rng.uniform();
            x2j = std::exp(0.25 * rng.normal());
        } else {
            eta = rng.uniform();
            zj = std::exp(0.25 * rng.normal());
            const double nu = std::exp(0.25 * rng.normal());
            x2j = zj + eta + nu;
        }
        const std::string label = "g" + std::to_string(j + 1);
        for (int i = 0; i < n; ++i, ++row) {
            const double x = std::exp(0.25 * rng.normal());
            const double u = rng.uniform_open();
            double yi = grouped_beta0(u) + x * grouped_beta(u) + x2j * grouped_gamma(u);
            if (spec.kind != DgpKind::Grouped1) yi += grouped_alpha(u, eta);
            y(row) = yi;
            x1(row, 0) = x;
            x2(row, 0) = x2j;
            if (z.size() > 0) z(row, 0) = zj;
            gid[row] = label;
        }
    }
    return make_panel(y, x1, x2, gid, z, true, {"x1"}, {"x2"},
                      z.size() > 0 ? std::vector<std::string>{"z"} : std::vector<std::string>{});
}

GroupedPanel draw_panel(const DgpSpec& spec, std::uint64_t rep) {
    if (spec.kind != DgpKind::Panel) throw ConfigError("panel draw on a grouped spec");
    if (!(std::fabs(spec.lambda) < 1.0))
        throw ConfigError("|lambda| must be below 1");
    Philox rng(spec.seed, rep);
    const int m = spec.m, n = spec.n, N = m * n;

    Eigen::VectorXd y(N);
    Eigen::MatrixXd x1(N, 1);
    const Eigen::MatrixXd x2(N, 0);
    std::vector<std::string> gid(N);

    const double lam = spec.lambda;
    const double rest = std::sqrt(1.0 - lam * lam);
    int row = 0;
    for (int j = 0; j < m; ++j) {
        const double h = rng.normal();
        const double alpha = lam * h + rest * rng.normal();
        const std::string label = "g" + std::to_string(j + 1);
        for (int i = 0; i < n; ++i, ++row) {
            const double x = h + 0.5 * rng.normal();
            const double nu = rng.normal();
            y(row) = x + alpha + (1.0 + 0.1 * x) * nu;
            x1(row, 0) = x;
            gid[row] = label;
        }
    }
    return make_panel(y, x1, x2, gid, Eigen::MatrixXd(), true, {"x1"}, {});
}

GroupedPanel draw_dgp(const DgpSpec& spec, std::uint64_t rep) {
    return spec.kind == DgpKind::Panel ? draw_panel(spec, rep) : draw_grouped(spec, rep);
}

EstimatorSpec mc_estimator(DgpKind kind, const std::string& name) {
    EstimatorSpec spec;
    spec.name = name;
    if (kind == DgpKind::Panel) {
        if (name == "pooled") {
            spec.instruments.kind = InstrumentKind::Pooled;
        } else if (name == "between" || name == "be") {
            spec.instruments.kind = InstrumentKind::Between;
        } else if (name == "fe" || name == "fixed_effects") {
            spec.instruments.kind = InstrumentKind::FixedEffects;
        } else if (name == "re_gmm") {
            spec.instruments.kind = InstrumentKind::RandomEffectsGMM;
            spec.weighting = Weighting::Efficient;
        } else if (name == "re_gmm_2sls") {
            spec.instruments.kind = InstrumentKind::RandomEffectsGMM;
            spec.weighting = Weighting::TwoStageLS;
        } else if (name == "re_oi") {
            spec.instruments.kind = InstrumentKind::OptimalRE;
        } else if (name == "hausman") {
            spec.instruments.kind = InstrumentKind::RandomEffectsGMM;
            spec.weighting = Weighting::Efficient;
            spec.run_j_test = true;
        } else {
            throw ConfigError("unknown panel estimator '" + name + "'");
        }
        return spec;
    }
    if (name == "md") {
        if (kind == DgpKind::Grouped3) {
            // endogenous x2 instrumented by the external z
            spec.instruments.kind = InstrumentKind::External;
            spec.instruments.x1_within = true;
            spec.instruments.x2_endogenous = {1};
            spec.instruments.z_ext_columns = {0};
        } else {
            // within x1 plus own group-level instruments (exactly identified)
            spec.instruments.kind = InstrumentKind::HausmanTaylor;
            spec.instruments.x2_exogenous = {0, 1};
        }
    } else if (name == "clp") {
        spec.clp = true;
        if (kind == DgpKind::Grouped3) {
            spec.clp_iv_z_col = 0;
            spec.clp_iv_x2_col = 1;
        }
    } else if (name == "re_gmm") {
        spec.instruments.kind = InstrumentKind::RandomEffectsGMM;
        spec.weighting = Weighting::Efficient;
    } else {
        throw ConfigError("unknown grouped estimator '" + name + "'");
    }
    return spec;
}

double pairwise_sum(const double* data, std::size_t n) {
    if (n == 0) return 0.0;
    if (n <= 8) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += data[i];
        return s;
    }
    const std::size_t half = n / 2;
    return pairwise_sum(data, half) + pairwise_sum(data + half, n - half);
}

namespace {

double pairwise_mean(const std::vector<double>& v) {
    return v.empty() ? kNaN : pairwise_sum(v.data(), v.size()) / static_cast<double>(v.size());
}

double median_of(std::vector<double> v) {
    if (v.empty()) return kNaN;
    std::sort(v.begin(), v.end());
    const std::size_t h = v.size() / 2;
    return v.size() % 2 == 1 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

struct RepRecord {
    double est = 0.0;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
    bool ok = false;
    bool j_reject = false;
    bool has_j = false;
};

} // namespace

McReport run_mc(const DgpSpec& spec, const std::vector<EstimatorSpec>& estimators,
                const QuantileGrid& grid, int reps, const McOptions& opts) {
    if (reps < 1) throw ConfigError("reps must be at least 1");
    if (estimators.empty()) throw ConfigError("no estimators requested");

    const int E = static_cast<int>(estimators.size());
    const int T = grid.size();
    const std::string target = dgp_target(spec.kind);

    // slot per (rep, estimator, tau); written independently, aggregated in
    // fixed order afterwards so worker count cannot change the result
    std::vector<RepRecord> rec(static_cast<std::size_t>(reps) * E * T);
    auto slot = [&](int r, int e, int t) -> RepRecord& {
        return rec[(static_cast<std::size_t>(r) * E + e) * T + t];
    };

    FitOptions fopts;
    fopts.confidence_level = opts.confidence_level;
    fopts.inference = opts.inference;
    if (opts.small_sample) {
        fopts.ci = CiMethod::Jackknife;
        fopts.t_critical = true;
    }

#ifdef _OPENMP
    const int threads = opts.workers > 0 ? opts.workers : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic) num_threads(threads)
#endif
    for (int r = 0; r < reps; ++r) {
        GroupedPanel panel;
        FirstStageFit fs;
        bool draw_ok = true;
        try {
            panel = draw_dgp(spec, static_cast<std::uint64_t>(r));
            fs = fit_first_stage_serial(panel, grid);
        } catch (const std::exception&) {
            draw_ok = false; // leaves every estimator cell failed for this rep
        }
        if (!draw_ok) continue;

        for (int e = 0; e < E; ++e) {
            try {
                const EstimatorResult res = fit_estimator(panel, fs, estimators[e], fopts);
                for (int t = 0; t < T; ++t) {
                    const auto& names = res.by_tau[t].names;
                    int idx = -1;
                    for (std::size_t k = 0; k < names.size(); ++k)
                        if (names[k] == target) idx = static_cast<int>(k);
                    if (idx < 0) throw ConfigError("target coefficient '" + target +
                                                   "' missing from estimator output");
                    RepRecord& s = slot(r, e, t);
                    s.est = res.by_tau[t].estimate(idx);
                    s.ci_lo = res.by_tau[t].ci_lo(idx);
                    s.ci_hi = res.by_tau[t].ci_hi(idx);
                    s.ok = std::isfinite(s.est) && std::isfinite(s.ci_lo) &&
                           std::isfinite(s.ci_hi);
                    if (res.by_tau[t].j) {
                        s.has_j = true;
                        s.j_reject = res.by_tau[t].j->reject_05;
                    }
                }
            } catch (const std::exception&) {
                for (int t = 0; t < T; ++t) slot(r, e, t).ok = false;
            }
        }
    }

    McReport report;
    report.spec = spec;
    for (const auto& e : estimators) report.estimators.push_back(e.name);
    report.taus = grid.taus;
    report.reps = reps;
    report.workers_hint = opts.workers;
    report.rng = kRngName;
    report.target = target;
    report.confidence_level = opts.confidence_level;

    // reference estimator for the relative MSE column
    std::string ref = opts.reference;
    if (ref.empty())
        for (const auto& e : estimators)
            if (e.name == "clp") ref = "clp";

    std::vector<std::vector<double>> mse_by_cell(E, std::vector<double>(T, kNaN));
    for (int e = 0; e < E; ++e) {
        for (int t = 0; t < T; ++t) {
            const double truth = dgp_truth(spec.kind, grid[t]);
            std::vector<double> err, sq, lens;
            int covered = 0, rejected = 0, jrej = 0, jcount = 0, used = 0;
            for (int r = 0; r < reps; ++r) {
                const RepRecord& s = slot(r, e, t);
                if (!s.ok) continue;
                ++used;
                err.push_back(s.est - truth);
                sq.push_back((s.est - truth) * (s.est - truth));
                lens.push_back(s.ci_hi - s.ci_lo);
                const bool inside = s.ci_lo <= truth && truth <= s.ci_hi;
                if (inside) ++covered;
                else ++rejected;
                if (s.has_j) {
                    ++jcount;
                    if (s.j_reject) ++jrej;
                }
            }
            McCell cell;
            cell.estimator = estimators[e].name;
            cell.tau = grid[t];
            cell.truth = truth;
            cell.reps_used = used;
            cell.failed = reps - used;
            if (used > 0) {
                cell.bias = pairwise_mean(err);
                cell.mse = pairwise_mean(sq);
                std::vector<double> dev(err.size());
                for (std::size_t i = 0; i < err.size(); ++i)
                    dev[i] = (err[i] - cell.bias) * (err[i] - cell.bias);
                cell.sd = used > 1
                              ? std::sqrt(pairwise_sum(dev.data(), dev.size()) / (used - 1))
                              : 0.0;
                cell.coverage_95 = static_cast<double>(covered) / used;
                cell.rejection_rate = static_cast<double>(rejected) / used;
                cell.ci_median_length = median_of(lens);
                cell.j_rejection_rate =
                    jcount > 0 ? static_cast<double>(jrej) / jcount : kNaN;
            } else {
                cell.bias = cell.sd = cell.mse = kNaN;
                cell.coverage_95 = cell.rejection_rate = cell.ci_median_length = kNaN;
                cell.j_rejection_rate = kNaN;
            }
            cell.rel_mse = kNaN;
            mse_by_cell[e][t] = cell.mse;
            report.cells.push_back(std::move(cell));
        }
    }

    if (!ref.empty()) {
        int ref_idx = -1;
        for (int e = 0; e < E; ++e)
            if (estimators[e].name == ref) ref_idx = e;
        if (ref_idx >= 0)
            for (int e = 0; e < E; ++e)
                for (int t = 0; t < T; ++t) {
                    auto& cell = report.cells[e * T + t];
                    const double denom = mse_by_cell[ref_idx][t];
                    if (e != ref_idx && std::isfinite(cell.mse) && denom > 0.0)
                        cell.rel_mse = cell.mse / denom;
                }
    }
    return report;
}

std::vector<HausmanRow> hausman_power_study(const std::vector<double>& lambdas,
                                            const std::vector<std::pair<int, int>>& cells,
                                            const QuantileGrid& grid, int reps,
                                            std::uint64_t seed, const McOptions& opts) {
    std::vector<HausmanRow> rows;
    for (const double lam : lambdas) {
        for (const auto& [m, n] : cells) {
            DgpSpec spec;
            spec.kind = DgpKind::Panel;
            spec.m = m;
            spec.n = n;
            spec.lambda = lam;
            spec.seed = seed;
            const McReport rep =
                run_mc(spec, {mc_estimator(DgpKind::Panel, "hausman")}, grid, reps, opts);
            for (const auto& cell : rep.cells) {
                HausmanRow row;
                row.lambda = lam;
                row.m = m;
                row.n = n;
                row.tau = cell.tau;
                row.rejection_rate = cell.j_rejection_rate;
                row.reps_used = cell.reps_used;
                row.failed = cell.failed;
                rows.push_back(row);
            }
        }
    }
    return rows;
}

namespace {

nlohmann::ordered_json cell_json(const McCell& c) {
    auto num = [](double v) {
        return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr);
    };
    nlohmann::ordered_json j;
    j["estimator"] = c.estimator;
    j["tau"] = c.tau;
    j["truth"] = c.truth;
    j["bias"] = num(c.bias);
    j["sd"] = num(c.sd);
    j["mse"] = num(c.mse);
    j["rel_mse"] = num(c.rel_mse);
    j["coverage_95"] = num(c.coverage_95);
    j["ci_median_length"] = num(c.ci_median_length);
    j["rejection_rate"] = num(c.rejection_rate);
    j["j_rejection_rate"] = num(c.j_rejection_rate);
    j["reps_used"] = c.reps_used;
    j["failed"] = c.failed;
    return j;
}

} // namespace

std::string McReport::to_json() const {
    nlohmann::ordered_json j;
    j["tool"] = "qpanel";
    j["version"] = kVersion;
    j["rng"] = rng;
    j["dgp"] = {{"kind", to_string(spec.kind)},
                {"m", spec.m},
                {"n", spec.n},
                {"lambda", spec.lambda}};
    j["seed"] = spec.seed;
    j["reps"] = reps;
    j["taus"] = taus;
    j["estimators"] = estimators;
    j["target"] = target;
    j["confidence_level"] = confidence_level;
    j["cells"] = nlohmann::ordered_json::array();
    for (const auto& c : cells) j["cells"].push_back(cell_json(c));
    return j.dump(2) + "\n";
}

std::string McReport::to_csv() const {
    std::ostringstream os;
    os.precision(12);
    os << "estimator,tau,truth,bias,sd,mse,rel_mse,coverage_95,ci_median_length,"
          "rejection_rate,j_rejection_rate,reps_used,failed\n";
    for (const auto& c : cells) {
        os << c.estimator << ',' << c.tau << ',' << c.truth << ',' << c.bias << ',' << c.sd
           << ',' << c.mse << ',' << c.rel_mse << ',' << c.coverage_95 << ','
           << c.ci_median_length << ',' << c.rejection_rate << ',' << c.j_rejection_rate
           << ',' << c.reps_used << ',' << c.failed << '\n';
    }
    return os.str();
}

} // namespace qpanel
