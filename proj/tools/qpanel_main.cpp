// qpanel command line: `estimate` fits the two-stage estimator on a CSV,
// `simulate` runs the seeded Monte Carlo harness, `overid` reports the
// J/Hausman overidentification test. Results go to stdout or --out as JSON;
// progress and errors go to stderr.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "qpanel/estimators.hpp"
#include "qpanel/montecarlo.hpp"
#include "qpanel/rng.hpp"
#include "qpanel/version.hpp"

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const qpanel::ConfigError*>(&e)) return 2;
    if (dynamic_cast<const qpanel::DataError*>(&e)) return 3;
    if (dynamic_cast<const qpanel::NumericError*>(&e)) return 4;
    return 1;
}

const char* error_type(int code) {
    switch (code) {
        case 2: return "config";
        case 3: return "data";
        case 4: return "numeric";
        default: return "internal";
    }
}

void emit_error(const std::exception& e, int code) {
    ordered_json err;
    err["error"] = {{"type", error_type(code)}, {"message", e.what()}};
    std::cerr << err.dump() << std::endl;
}

void write_result(const std::string& text, const std::string& out_path) {
    if (out_path.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw qpanel::DataError("cannot write output file: " + out_path);
    out << text;
}

int resolve_workers(int flag_value) {
    if (flag_value > 0) return flag_value;
    if (const char* env = std::getenv("QPANEL_WORKERS")) {
        const int w = std::atoi(env);
        if (w > 0) return w;
    }
    return 0;
}

json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw qpanel::DataError("cannot open config file: " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw qpanel::ConfigError("config is not valid JSON: " + std::string(e.what()));
    }
}

std::vector<double> parse_taus(const std::string& csv) {
    std::vector<double> taus;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            taus.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw qpanel::ConfigError("invalid quantile '" + item + "'");
        }
    }
    return taus;
}

int name_index(const std::vector<std::string>& names, const std::string& want,
               const std::string& what) {
    for (std::size_t k = 0; k < names.size(); ++k)
        if (names[k] == want) return static_cast<int>(k);
    throw qpanel::ConfigError("unknown " + what + " column '" + want + "'");
}

struct EstimateSetup {
    qpanel::ColumnConfig columns;
    std::string data_path;
    std::vector<double> taus;
    qpanel::EstimatorSpec spec;
    qpanel::FitOptions fit;
    std::vector<std::string> targets;
    json echo;
};

EstimateSetup parse_estimate_config(const json& cfg) {
    EstimateSetup s;
    if (!cfg.contains("data")) throw qpanel::ConfigError("config needs a 'data' path");
    s.data_path = cfg.at("data").get<std::string>();
    if (!cfg.contains("outcome") || !cfg.contains("group"))
        throw qpanel::ConfigError("config needs 'outcome' and 'group' column names");
    s.columns.outcome = cfg.at("outcome").get<std::string>();
    s.columns.group = cfg.at("group").get<std::string>();
    s.columns.x1 = cfg.value("x1", std::vector<std::string>{});
    s.columns.x2 = cfg.value("x2", std::vector<std::string>{});
    s.columns.instruments = cfg.value("instruments", std::vector<std::string>{});
    s.columns.cluster = cfg.value("cluster", std::string{});
    s.columns.add_intercept = cfg.value("add_intercept", true);
    s.columns.min_dof = cfg.value("min_dof", 25);
    s.taus = cfg.value("taus", std::vector<double>{0.5});

    const json est = cfg.value("estimator", json::object());
    const std::string kind = est.value("kind", std::string("pooled"));
    s.spec.name = est.value("name", kind);
    if (kind == "clp") {
        s.spec.clp = true;
    } else {
        s.spec.instruments.kind = qpanel::instrument_kind_from_string(kind);
    }
    s.spec.weighting =
        qpanel::weighting_from_string(est.value("weighting", std::string("efficient")));
    s.spec.powell_bandwidth = est.value("powell_bandwidth", 0.0);
    s.spec.sigma_alpha_override = est.value("sigma_alpha_override", -1.0);
    s.spec.run_j_test = est.value("overid_test", false);

    // column-name based partitions
    auto to_indices = [&](const char* key, const std::vector<std::string>& names,
                          const std::string& what) {
        std::vector<int> idx;
        for (const auto& n : est.value(key, std::vector<std::string>{}))
            idx.push_back(name_index(names, n, what));
        return idx;
    };
    std::vector<std::string> x2_names = s.columns.x2;
    if (s.columns.add_intercept) x2_names.insert(x2_names.begin(), "(intercept)");
    s.spec.instruments.x1_exogenous = to_indices("x1_exogenous", s.columns.x1, "x1");
    s.spec.instruments.x2_exogenous = to_indices("x2_exogenous", x2_names, "x2");
    if (s.spec.instruments.kind == qpanel::InstrumentKind::HausmanTaylor &&
        s.spec.instruments.x2_exogenous.empty() && s.columns.add_intercept)
        s.spec.instruments.x2_exogenous.push_back(0); // the intercept is exogenous
    s.spec.instruments.x2_endogenous = to_indices("x2_endogenous", x2_names, "x2");
    s.spec.instruments.z_ext_columns =
        to_indices("z_columns", s.columns.instruments, "instrument");
    s.spec.instruments.x1_within = est.value("x1_within", true);
    if (s.spec.clp) {
        if (est.contains("clp_instrument")) {
            s.spec.clp_iv_z_col = name_index(s.columns.instruments,
                                             est.at("clp_instrument").get<std::string>(),
                                             "instrument");
            s.spec.clp_iv_x2_col = name_index(
                x2_names, est.at("clp_instrumented_x2").get<std::string>(), "x2");
        }
    }
    s.targets = est.value("targets", std::vector<std::string>{});

    const json inf = cfg.value("inference", json::object());
    s.fit.confidence_level = inf.value("confidence_level", 0.95);
    if (!(s.fit.confidence_level > 0.0 && s.fit.confidence_level < 1.0))
        throw qpanel::ConfigError("confidence_level must be in (0,1)");
    s.fit.inference.dof_correction = inf.value("dof_correction", false);
    const std::string ci = inf.value("ci", std::string("sigma"));
    if (ci == "jackknife") s.fit.ci = qpanel::CiMethod::Jackknife;
    else if (ci != "sigma") throw qpanel::ConfigError("inference.ci must be sigma|jackknife");
    s.fit.t_critical = inf.value("t_critical", false);

    // config echo excludes runtime-only knobs so output bytes are a pure
    // function of the statistical problem
    s.echo = cfg;
    s.echo.erase("out");
    s.echo.erase("workers");
    return s;
}

ordered_json tau_result_json(const qpanel::TauResult& r) {
    ordered_json jt;
    jt["tau"] = r.tau;
    jt["coefficients"] = ordered_json::array();
    for (std::size_t k = 0; k < r.names.size(); ++k) {
        ordered_json c;
        c["name"] = r.names[k];
        c["estimate"] = r.estimate(static_cast<int>(k));
        c["se"] = r.se(static_cast<int>(k));
        c["ci_lo"] = r.ci_lo(static_cast<int>(k));
        c["ci_hi"] = r.ci_hi(static_cast<int>(k));
        jt["coefficients"].push_back(c);
    }
    if (r.w_truncated) jt["weighting_truncated"] = true;
    if (r.j) {
        jt["overid_test"] = {{"statistic", r.j->statistic},
                             {"dof", r.j->dof.value_or(0)},
                             {"p_value", r.j->p_value},
                             {"reject_05", r.j->reject_05}};
    }
    return jt;
}

int run_estimate(const std::string& config_path, const std::string& out_flag, int workers,
                 bool overid_only) {
    const json cfg = load_json(config_path);
    EstimateSetup setup = parse_estimate_config(cfg);
    if (overid_only) setup.spec.run_j_test = true;

    qpanel::GroupedPanel panel = qpanel::load_csv(setup.data_path, setup.columns);
    qpanel::FilterReport filter;
    panel = qpanel::filter_min_dof(panel, setup.columns.min_dof, &filter);
    if (!panel.cluster_of_group.empty())
        setup.fit.inference.cluster_of_group = panel.cluster_of_group;

    const qpanel::QuantileGrid grid{setup.taus};
    std::cerr << "qpanel: first stage over " << panel.m() << " groups x " << grid.size()
              << " quantiles\n";
    const qpanel::FirstStageFit fs =
        qpanel::fit_first_stage(panel, grid, resolve_workers(workers));
    const qpanel::EstimatorResult res = qpanel::fit_estimator(panel, fs, setup.spec, setup.fit);

    for (const auto& target : setup.targets)
        name_index(res.by_tau.front().names, target, "target");

    ordered_json out;
    out["tool"] = "qpanel";
    out["version"] = qpanel::kVersion;
    out["rng"] = qpanel::kRngName;
    out["seed"] = cfg.value("seed", 0);
    out["config"] = setup.echo;
    out["filter"] = {{"min_dof", setup.columns.min_dof},
                     {"dropped_groups", filter.dropped_groups},
                     {"groups_retained", panel.m()}};
    out["estimator"] = {{"name", res.name}, {"kind", res.kind}};
    if (overid_only) {
        out["tests"] = ordered_json::array();
        for (const auto& r : res.by_tau) {
            ordered_json jt;
            jt["tau"] = r.tau;
            jt["statistic"] = r.j->statistic;
            jt["dof"] = r.j->dof.value_or(0);
            jt["p_value"] = r.j->p_value;
            jt["reject_05"] = r.j->reject_05;
            out["tests"].push_back(jt);
        }
    } else {
        out["results"] = ordered_json::array();
        for (const auto& r : res.by_tau) out["results"].push_back(tau_result_json(r));
    }
    write_result(out.dump(2) + "\n", out_flag.empty() ? cfg.value("out", "") : out_flag);
    return 0;
}

int run_simulate(const std::string& dgp, int m, int n, double lambda, const std::string& taus,
                 int reps, std::uint64_t seed, const std::string& estimators, int workers,
                 const std::string& out_path, const std::string& csv_path) {
    qpanel::DgpSpec spec;
    spec.kind = qpanel::dgp_kind_from_string(dgp);
    spec.m = m;
    spec.n = n;
    spec.lambda = lambda;
    spec.seed = seed;

    std::vector<qpanel::EstimatorSpec> specs;
    std::stringstream ss(estimators);
    std::string name;
    while (std::getline(ss, name, ','))
        if (!name.empty()) specs.push_back(qpanel::mc_estimator(spec.kind, name));
    if (specs.empty()) throw qpanel::ConfigError("no estimators requested");

    qpanel::McOptions opts;
    opts.workers = resolve_workers(workers);
    const qpanel::QuantileGrid grid{parse_taus(taus)};

    std::cerr << "qpanel: simulate " << dgp << " m=" << m << " n=" << n << " reps=" << reps
              << " seed=" << seed << "\n";
    const qpanel::McReport report = qpanel::run_mc(spec, specs, grid, reps, opts);
    write_result(report.to_json(), out_path);
    if (!csv_path.empty()) {
        std::ofstream csv(csv_path, std::ios::binary);
        if (!csv) throw qpanel::DataError("cannot write CSV file: " + csv_path);
        csv << report.to_csv();
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Two-stage minimum-distance estimation for quantile panel models"};
    app.require_subcommand(1);

    std::string config_path, out_path, csv_path;
    int workers = 0;

    auto* est = app.add_subcommand("estimate", "fit estimators on a CSV dataset");
    est->add_option("--config", config_path, "JSON config file")->required();
    est->add_option("--out", out_path, "output path (default stdout)");
    est->add_option("--workers", workers, "parallel workers (env QPANEL_WORKERS)");

    auto* ovr = app.add_subcommand("overid", "J/Hausman overidentification test on a dataset");
    ovr->add_option("--config", config_path, "JSON config file")->required();
    ovr->add_option("--out", out_path, "output path (default stdout)");
    ovr->add_option("--workers", workers, "parallel workers");

    std::string dgp = "grouped1", taus = "0.1,0.5,0.9", estimators = "md,clp";
    int m = 25, n = 25, reps = 100;
    double lambda = 0.0;
    std::uint64_t seed = 0;

    auto* sim = app.add_subcommand("simulate", "seeded Monte Carlo study");
    sim->add_option("--dgp", dgp, "grouped1|grouped2|grouped3|panel");
    sim->add_option("--m", m, "number of groups");
    sim->add_option("--n", n, "observations per group");
    sim->add_option("--lambda", lambda, "corr(h_j, alpha_j), panel DGP only");
    sim->add_option("--taus", taus, "comma-separated quantiles");
    sim->add_option("--reps", reps, "Monte Carlo replications");
    sim->add_option("--seed", seed, "RNG seed");
    sim->add_option("--estimators", estimators, "comma-separated estimator names");
    sim->add_option("--workers", workers, "parallel workers (env QPANEL_WORKERS)");
    sim->add_option("--out", out_path, "report path (default stdout)");
    sim->add_option("--csv", csv_path, "optional flat CSV table");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        app.exit(e);
        return 2;
    }

    try {
        if (est->parsed()) return run_estimate(config_path, out_path, workers, false);
        if (ovr->parsed()) return run_estimate(config_path, out_path, workers, true);
        return run_simulate(dgp, m, n, lambda, taus, reps, seed, estimators, workers,
                            out_path, csv_path);
    } catch (const std::exception& e) {
        const int code = exit_code_for(e);
        emit_error(e, code);
        return code;
    }
}
