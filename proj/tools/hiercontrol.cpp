// Command-line front end: hiercontrol <subcommand> --config <path> [--out <dir>] ...
//
// Exit codes: 0 success, 2 validation failure, 3 solver divergence, 1 usage
// or I/O problems. Every failure writes error.json into the output directory.

#include <chrono>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <openssl/evp.h>

#include "hiercontrol/hiercontrol.hpp"

namespace fs = std::filesystem;
using namespace hiercontrol;

namespace {

constexpr const char* kVersion = "1.0.0";

std::string sha256_hex(const std::string& data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

/// Outputs are collected in memory and written in name order at the end,
/// so the file set and bytes do not depend on worker scheduling.
struct Run {
    std::string subcommand;
    fs::path out;
    Config cfg;
    unsigned long long seed = 0;
    std::map<std::string, std::string> files;
    json summary = json::object();
    json timings = json::object();
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();

    void phase(const std::string& name) {
        const auto now = std::chrono::steady_clock::now();
        timings[name] = std::chrono::duration<double>(now - t0).count();
        t0 = now;
    }
    void add(const std::string& name, std::string text) { files[name] = std::move(text); }

    json grid_summary() const {
        return {{"L", cfg.grid.L}, {"T", cfg.grid.T}, {"Nx", cfg.grid.Nx}, {"Nt", cfg.grid.Nt}};
    }

    void flush(int status) {
        fs::create_directories(out);
        add("summary.json", summary.dump(2) + "\n");
        json inv = json::object();
        for (const auto& [name, text] : files) {
            write_text((out / name).string(), text);
            inv[name] = {{"sha256", sha256_hex(text)}, {"bytes", text.size()}};
        }
        json m = {{"software", {{"name", "hiercontrol"}, {"version", kVersion}}},
                  {"subcommand", subcommand},
                  {"status", status},
                  {"config", cfg.raw},
                  {"seeds", {{"seed", seed}}},
                  {"grid", grid_summary()},
                  {"threads", worker_count()},
                  {"timings_s", timings},
                  {"outputs", inv}};
        write_text((out / "manifest.json").string(), m.dump(2) + "\n");
    }
};

json checks_json(const std::vector<ConditionCheck>& checks) {
    json a = json::array();
    for (const auto& c : checks) a.push_back({{"name", c.name}, {"pass", c.pass}, {"measure", c.measure}, {"detail", c.detail}});
    return a;
}

json weighted_json(const WeightedNorms& w) {
    return {{"log_state_rho0", w.log_state}, {"log_control_rho1", w.log_control}, {"log_control_t_rho3", w.log_control_t},
            {"finite", w.finite()}};
}

/// json has no infinities; -inf logs (zero integrals) become null.
json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json geometry_summary(const ControlGeometry& geo) {
    auto iv = [](const Interval& i) { return json::array({i.lo(), i.hi()}); };
    json om = json::array();
    for (const auto& w : geo.omega) om.push_back(iv(w));
    return {{"case", case_name(geo.case_tag)}, {"O", iv(geo.O)},          {"O1", iv(geo.Oi[0])},
            {"O2", iv(geo.Oi[1])},           {"O1d", iv(geo.Oid[0])},     {"O2d", iv(geo.Oid[1])},
            {"O_tilde", iv(geo.O_tilde)},    {"omega", om}};
}

std::string history_csv(const std::vector<double>& h, const std::string& col) {
    CsvWriter w({"iteration", col});
    for (std::size_t k = 0; k < h.size(); ++k) w.row({static_cast<double>(k + 1), h[k]});
    return w.str();
}

NashMode mode_for(const Problem& P) { return P.model.is_linear() ? NashMode::Linear : NashMode::Nonlinear; }

// ---------------------------------------------------------------------------

void cmd_validate_geometry(Run& r) {
    const auto geo = assemble_geometry(r.cfg.geometry, r.cfg.grid);
    const auto rep = validate_geometry(geo, r.cfg.grid);
    CsvWriter w({"condition", "pass", "measure"});
    for (const auto& c : rep.checks) w.row(c.name, {c.pass ? 1.0 : 0.0, c.measure});
    r.add("geometry.csv", w.str());
    r.summary["geometry"] = geometry_summary(geo);
    r.summary["ok"] = rep.ok;
    r.summary["checks"] = checks_json(rep.checks);
    r.phase("validate");
    if (!rep.ok) throw geometry_rejected("geometry fails " + rep.first_failure());
}

void cmd_weights(Run& r) {
    const Problem P = r.cfg.problem();
    const auto w = r.cfg.weights(P);
    r.phase("build");
    const auto& g = P.grid;
    std::vector<std::string> head{"x", "t"};
    for (int k = 0; k < w.eta_count(); ++k)
        for (const char* n : {"sigma", "xi", "sigma_bar", "xi_bar"}) head.push_back(std::string(n) + std::to_string(k));
    head.push_back("beta_star");
    head.push_back("xi_star");
    for (Rho rr : all_rhos) head.push_back(std::string("log_") + rho_name(rr));
    CsvWriter out(head);
    for (int n = 1; n <= g.Nt; ++n) {
        const double t = g.tmid(n);
        for (int j = 0; j < g.nodes(); ++j) {
            std::vector<double> row{g.x(j), t};
            for (int k = 0; k < w.eta_count(); ++k) {
                row.push_back(w.sigma(k, j, t));
                row.push_back(w.xi(k, j, t));
                row.push_back(w.sigma_bar(k, j, t));
                row.push_back(w.xi_bar(k, j, t));
            }
            row.push_back(w.sel_beta_star(t));
            row.push_back(w.sel_xi_star(t));
            for (Rho rr : all_rhos) row.push_back(w.log_rho(rr, t));
            out.row(row);
        }
    }
    r.add("weights.csv", out.str());
    CsvWriter eta({"x", "eta", "deriv", "eta_index"});
    for (int k = 0; k < w.eta_count(); ++k)
        for (int j = 0; j < g.nodes(); ++j)
            eta.row({g.x(j), w.eta[static_cast<std::size_t>(k)].value[static_cast<std::size_t>(j)],
                     w.eta[static_cast<std::size_t>(k)].deriv[static_cast<std::size_t>(j)], static_cast<double>(k)});
    r.add("eta.csv", eta.str());
    const auto d = weight_report(w);
    CsvWriter ch({"relation", "log_C"});
    json chain = json::array();
    for (const auto& c : d.chain) {
        ch.row(c.name, {c.log_C});
        chain.push_back({{"relation", c.name}, {"log_C", num(c.log_C)}, {"finite", c.finite()}});
    }
    r.add("chain.csv", ch.str());
    json etas = json::array();
    for (const auto& e : w.eta)
        etas.push_back({{"kappa", e.kappa}, {"xstar", e.xstar}, {"critical_point", e.critical_point}, {"sup", e.sup_norm}});
    r.summary = {{"s", w.s},          {"lambda", w.lambda},         {"s_min", w.s_min},
                 {"case", case_name(w.tag)}, {"eta", etas},        {"chain", chain},
                 {"violations", d.violations}, {"ok", d.ok()},     {"rho0_inv_last_midtime", d.rho0_inv_last}};
    r.phase("report");
    if (!d.ok()) throw weight_inequality_violated(d.violations.front());
}

void cmd_simulate(Run& r) {
    const Problem P = r.cfg.problem();
    const StateModel sm(P.model, P.grid);
    const Field y = solve_forward(sm, P.y0, Field(P.grid), r.cfg.solver.nash.step);
    r.phase("solve");
    r.add("y.csv", field_csv(y, P.grid));
    r.summary = {{"y0_norm", norm_x(P.y0, P.grid.dx())}, {"terminal_norm", norm_x(y.level(P.grid.Nt), P.grid.dx())},
                 {"family", family_name(P.model.family())}};
}

Field leader_field(const std::string& spec, const Problem& P) {
    if (spec.empty() || spec == "zero") return Field(P.grid);
    return read_field_csv(spec, P.grid);
}

void write_nash(Run& r, const Problem& P, const NashSolution& s) {
    r.add("y.csv", field_csv(s.y, P.grid));
    r.add("p1.csv", field_csv(s.p[0], P.grid));
    r.add("p2.csv", field_csv(s.p[1], P.grid));
    r.add("v1.csv", field_csv(s.v[0], P.grid));
    r.add("v2.csv", field_csv(s.v[1], P.grid));
    r.add("convergence.csv", history_csv(s.history, "residual"));
}

void cmd_nash(Run& r, const std::string& leader) {
    const Problem P = r.cfg.problem();
    const Field f = leader_field(leader, P);
    const StateModel sm(P.model, P.grid);
    const auto lin = LinearizedOperator::at_zero(sm);
    NashSystem S{&P, &sm, &lin, mode_for(P), nullptr, nullptr, r.cfg.solver.nash.step};
    try {
        const auto s = solve_nash_fixed_point(S, f, r.cfg.solver.nash);
        r.phase("solve");
        write_nash(r, P, s);
        r.summary = {{"iterations", s.iterations}, {"residual", s.residual}, {"J1", s.J[0]}, {"J2", s.J[1]},
                     {"theta", s.theta}, {"mode", S.mode == NashMode::Linear ? "linear" : "nonlinear"}};
    } catch (const Error& e) {
        r.add("convergence.csv", history_csv(e.history(), "residual"));
        throw;
    }
}

void null_control_outputs(Run& r, const Problem& P, const CarlemanWeights& w, const NullControlResult& res) {
    const auto& g = P.grid;
    r.add("f.csv", field_csv(res.f, g));
    r.add("y.csv", field_csv(res.nash.y, g));
    r.add("convergence.csv", history_csv(res.history, "residual"));
    if (!res.eps_table.empty()) {
        CsvWriter e({"epsilon", "terminal_norm", "iterations", "control_norm", "converged"});
        for (const auto& row : res.eps_table)
            e.row({row.eps, row.terminal_norm, static_cast<double>(row.iterations), row.control_norm,
                   row.converged ? 1.0 : 0.0});
        r.add("eps_table.csv", e.str());
    }
    json s = {{"method_tag", res.method},
              {"terminal_norm", res.terminal_norm},
              {"y0_norm", res.y0_norm},
              {"terminal_ratio", res.terminal_ratio()},
              {"weighted_norms", weighted_json(res.weighted)},
              {"iterations", res.iterations},
              {"checks", checks_json(res.checks)}};
    if (res.method == "penalized_hum") s["epsilon"] = res.epsilon;
    if (res.method != "penalized_hum") {
        s["yhat_terminal_zero"] = res.yhat_terminal_zero;
        s["dropped_rhs"] = res.dropped_rhs;
        s["cg_converged"] = res.cg_converged;
    }
    if (res.method == "weighted_ls") {
        s["resim_mismatch"] = res.resim_mismatch;
        s["consistency"] = res.consistency;
        const auto est = weighted_estimate_report(P, res, w);
        auto side = [](const EstimateSide& e) {
            json t = json::object();
            for (const auto& x : e.lhs) t["lhs: " + x.name] = num(x.log_value);
            for (const auto& x : e.rhs) t["rhs: " + x.name] = num(x.log_value);
            return json{{"terms_log", t}, {"log_ratio", num(e.log_ratio())}, {"vacuous", e.vacuous}, {"finite", e.finite()}};
        };
        s["estimates"] = {{"energy_rho2_rho3", side(est.first)}, {"time_derivative_rho4_rho5", side(est.second)}};
    }
    if (res.method == "picard_nonlinear" || res.method == "trajectory") {
        s["smallness_h3_proxy"] = res.smallness;
        s["smallness_gate_passed"] = res.smallness_gate;
        // Smallness proxy for the targets: ∬ rho^2 |y_id|^2 (log).
        detail::LogSum tl;
        for (int i = 0; i < 2; ++i)
            for (int n = 1; n <= g.Nt; ++n) {
                const double q = dot_x(P.followers[i].target.cell(n), P.followers[i].target.cell(n), g.dx()) * g.dt();
                tl.add(detail::log_rho_times(w, Rho::rho, g.tmid(n), q));
            }
        s["target_smallness_log"] = num(tl.value());
    }
    r.summary = s;
}

void cmd_null_control(Run& r, const std::string& method, const std::vector<double>& sweep) {
    const Problem P = r.cfg.problem();
    const auto w = r.cfg.weights(P);
    r.phase("setup");
    const auto& sv = r.cfg.solver;
    if (!sweep.empty()) {
        if (method != "picard") throw ConfigError("--sweep", "amplitude sweeps need --method picard");
        const auto rep = amplitude_sweep(P, w, sweep, sv.y0_mode, sv.picard);
        r.phase("sweep");
        CsvWriter c({"amplitude", "converged", "iterations", "terminal_ratio", "smallness_h3_proxy"});
        json rows = json::array();
        for (const auto& row : rep.rows) {
            c.row({row.amplitude, row.converged ? 1.0 : 0.0, static_cast<double>(row.iterations), row.terminal_ratio,
                   row.smallness});
            rows.push_back({{"amplitude", row.amplitude}, {"converged", row.converged}, {"error", row.error}});
        }
        r.add("sweep.csv", c.str());
        r.summary = {{"rows", rows}, {"first_failing_amplitude", rep.first_failure ? json(*rep.first_failure) : json(nullptr)}};
        return;
    }
    NullControlResult res;
    if (method == "hum")
        res = null_control_penalized(P, w, sv.hum);
    else if (method == "wls")
        res = null_control_weighted_ls(P, w, sv.wls);
    else if (method == "picard")
        res = null_control_nonlinear_picard(P, w, sv.picard);
    else
        throw ConfigError("--method", "expected hum, wls or picard");
    r.phase("solve");
    null_control_outputs(r, P, w, res);
    r.phase("report");
}

void cmd_trajectory(Run& r, const std::string& ybar_path) {
    const Problem P = r.cfg.problem();
    const auto w = r.cfg.weights(P);
    const Field ybar = ybar_path.empty() ? Field(P.grid) : read_field_csv(ybar_path, P.grid);
    r.phase("setup");
    const auto res = null_control_trajectory(P, ybar, w, r.cfg.solver.picard);
    r.phase("solve");
    null_control_outputs(r, P, w, res);
    r.phase("report");
}

void cmd_observability(Run& r, int samples) {
    const Problem P = r.cfg.problem();
    const auto w = r.cfg.weights(P);
    r.phase("setup");
    const auto rep = observability_sample(P, w, samples, r.seed);
    r.phase("sample");
    CsvWriter c({"sample", "log_lhs", "log_rhs", "log_ratio", "log_h_terms", "log_carleman_lhs", "log_carleman_rhs",
                 "resamples"});
    for (std::size_t k = 0; k < rep.samples.size(); ++k) {
        const auto& s = rep.samples[k];
        c.row({static_cast<double>(k), s.log_lhs, s.log_rhs, s.log_ratio, s.log_h_terms, s.carleman.log_lhs,
               s.carleman.log_rhs, static_cast<double>(s.resamples)});
    }
    r.add("observability.csv", c.str());
    r.summary = {{"n_samples", rep.n_samples},         {"s", rep.s},
                 {"lambda", rep.lambda},               {"case", case_name(rep.tag)},
                 {"log_max_ratio", num(rep.log_max_ratio)}, {"log_max_carleman_C", num(rep.log_max_carleman_C)},
                 {"degenerate_resamples", rep.degenerate}, {"seed", r.seed}};
}

void cmd_equilibrium(Run& r, const std::vector<double>& mu_grid, int directions, const std::string& leader) {
    const Problem P = r.cfg.problem();
    const Field f = leader_field(leader, P);
    EquilibriumOptions eo;
    eo.mode = mode_for(P);
    eo.directions = directions;
    eo.seed = r.seed;
    const auto rep = equilibrium_second_derivative(P, f, mu_grid, eo);
    r.phase("scan");
    CsvWriter c({"mu", "direction", "form", "oracle"});
    CsvWriter m({"mu", "min_form", "max_rel_err", "nash_iterations"});
    for (const auto& row : rep.rows) {
        for (std::size_t k = 0; k < row.form.size(); ++k) c.row({row.mu, static_cast<double>(k), row.form[k], row.oracle[k]});
        m.row({row.mu, row.min_form, row.max_rel_err, static_cast<double>(row.nash_iterations)});
    }
    r.add("equilibrium.csv", c.str());
    r.add("equilibrium_min.csv", m.str());
    r.summary = {{"mu_star", rep.mu_star ? json(*rep.mu_star) : json(nullptr)},
                 {"monotone", rep.monotone},
                 {"max_rel_err", rep.max_rel_err},
                 {"directions", rep.directions},
                 {"mode", eo.mode == NashMode::Linear ? "linear" : "nonlinear"}};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hierarchic leader-follower null control of 1D parabolic equations"};
    app.require_subcommand(1);
    std::string config_path, out_dir = ".", method = "wls", leader = "zero", ybar;
    std::optional<unsigned long long> seed;
    int samples = 100, directions = 20;
    std::vector<double> mu_grid{0.01, 0.1, 1.0, 10.0, 100.0}, sweep;

    auto common = [&](CLI::App* sc) {
        sc->add_option("--config", config_path, "JSON configuration")->required()->check(CLI::ExistingFile);
        sc->add_option("--out", out_dir, "output directory");
        sc->add_option("--seed", seed, "overrides solver.seed");
    };
    auto* vg = app.add_subcommand("validate-geometry", "check the control geometry");
    auto* wt = app.add_subcommand("weights", "Carleman weights and the rho chain");
    auto* sim = app.add_subcommand("simulate", "uncontrolled forward solve");
    auto* na = app.add_subcommand("nash", "follower Nash equilibrium for a given leader control");
    auto* nc = app.add_subcommand("null-control", "leader null control");
    auto* tr = app.add_subcommand("trajectory", "drive the state onto an uncontrolled trajectory");
    auto* ob = app.add_subcommand("observability", "sample the observability inequality");
    auto* eq = app.add_subcommand("equilibrium-scan", "second-derivative test over a mu grid");
    for (auto* sc : {vg, wt, sim, na, nc, tr, ob, eq}) common(sc);
    na->add_option("--leader", leader, "field CSV or 'zero'");
    nc->add_option("--method", method, "hum | wls | picard")->check(CLI::IsMember({"hum", "wls", "picard"}));
    nc->add_option("--sweep", sweep, "amplitudes for a Picard sweep")->delimiter(',');
    tr->add_option("--ybar", ybar, "trajectory field CSV (default: zero)");
    ob->add_option("--samples", samples, "number of terminal data")->check(CLI::PositiveNumber);
    eq->add_option("--mu-grid", mu_grid, "comma separated mu_1 values")->delimiter(',');
    eq->add_option("--directions", directions, "random directions on O1")->check(CLI::PositiveNumber);
    eq->add_option("--leader", leader, "field CSV or 'zero'");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    Run r;
    r.subcommand = app.get_subcommands().front()->get_name();
    r.out = out_dir;
    int status = 0;
    try {
        r.cfg = load_config(config_path);
        r.seed = seed.value_or(r.cfg.solver.seed);
        r.phase("config");
        if (r.subcommand == "validate-geometry") cmd_validate_geometry(r);
        else if (r.subcommand == "weights") cmd_weights(r);
        else if (r.subcommand == "simulate") cmd_simulate(r);
        else if (r.subcommand == "nash") cmd_nash(r, leader);
        else if (r.subcommand == "null-control") cmd_null_control(r, method, sweep);
        else if (r.subcommand == "trajectory") cmd_trajectory(r, ybar);
        else if (r.subcommand == "observability") cmd_observability(r, samples);
        else if (r.subcommand == "equilibrium-scan") cmd_equilibrium(r, mu_grid, directions, leader);
    } catch (const Error& e) {
        status = e.exit_code();
        json err = {{"kind", e.kind()}, {"message", e.what()}, {"exit_code", status}, {"history", e.history()}};
        if (const auto* ce = dynamic_cast<const ConfigError*>(&e)) err["json_path"] = ce->path();
        r.add("error.json", err.dump(2) + "\n");
        std::cerr << e.kind() << ": " << e.what() << "\n";
    } catch (const std::exception& e) {
        status = 1;
        r.add("error.json", json{{"kind", "InternalError"}, {"message", e.what()}, {"exit_code", 1}}.dump(2) + "\n");
        std::cerr << "error: " << e.what() << "\n";
    }
    try {
        r.flush(status);
    } catch (const std::exception& e) {
        std::cerr << "cannot write outputs: " << e.what() << "\n";
        return 1;
    }
    if (status == 0) std::cout << r.summary.dump(2) << "\n";
    return status;
}
