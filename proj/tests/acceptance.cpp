// Acceptance run: one PASS/FAIL line per criterion, tolerances and time
// budgets pinned below. Exit status is nonzero if any criterion fails.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>

#include "oracles/dense.hpp"
#include "oracles/richardson.hpp"
#include "support.hpp"

using namespace hiercontrol;
namespace fs = std::filesystem;

namespace tol {
constexpr double duality = 1e-10;
constexpr double nash_vs_dense = 1e-8;
constexpr double first_order = 1e-5;
constexpr double terminal_ratio = 1e-3;
constexpr double second_variation_linear = 1e-4;
constexpr double second_variation_nonlinear = 1e-3;
constexpr double observability_spread = 0.20;
}  // namespace tol

namespace budget {
constexpr double c1 = 30, c2 = 10, c3 = 60, c4 = 300, c5 = 300, c6 = 600, c7 = 600, c8 = 5, c9 = 120, c10 = 60,
                 c11 = 600;
}

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char b[64];
    std::snprintf(b, sizeof b, f, v);
    return b;
}

int failures = 0;

void criterion(int id, double limit_s, const std::function<Verdict()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
        v = body();
    } catch (const std::exception& e) {
        v = {false, std::string("unexpected error: ") + e.what()};
    }
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = dt <= limit_s;
    const bool ok = v.pass && in_time;
    if (!ok) ++failures;
    std::printf("criterion %2d %s  %s; time %.2fs (budget %.0fs%s)\n", id, ok ? "PASS" : "FAIL", v.detail.c_str(), dt,
                limit_s, in_time ? "" : ", exceeded");
    std::fflush(stdout);
}

Config config(const std::string& name) { return load_config(testing_support::config_path(name)); }

Field leader_on_O(const Problem& P, unsigned long long seed) {
    std::mt19937_64 rng(seed);
    Field f = testing_support::random_field(P.grid, rng);
    f.apply_mask(P.B);
    return f;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string("\"") + HIERCONTROL_CLI + "\" " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

// 1 -------------------------------------------------------------------------
Verdict duality() {
    const Problem P = config("heat_same.json").problem();
    const auto& g = P.grid;
    const StateModel sm(P.model, g);
    const auto op = LinearizedOperator::at_zero(sm);
    std::mt19937_64 rng(1);
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
        const auto phiT = testing_support::random_slice(g, rng);
        const Field f = testing_support::random_field(g, rng);
        const std::vector<double> zero(static_cast<std::size_t>(g.nodes()), 0.0);
        const Field y = solve_linearized_forward(op, zero, f);
        const Field phi = solve_adjoint_backward(op, phiT, Field(g, Staging::Backward));
        const double lhs = dot_x(y.level(g.Nt), phiT, g.dx()), rhs = dot_q(f, phi, g);
        worst = std::max(worst, std::abs(lhs - rhs) / std::max({std::abs(lhs), std::abs(rhs), 1e-300}));
    }
    return {worst <= tol::duality, "heat 64x64, 100 pairs, max rel gap " + fmt("%.3g", worst) + " (<= 1e-10)"};
}

// 2 -------------------------------------------------------------------------
Verdict nash_dense() {
    testing_support::ProblemOptions o;
    o.target = 0.5;
    const Problem P = testing_support::make_problem(o);
    const StateModel sm(P.model, P.grid);
    const auto lin = LinearizedOperator::at_zero(sm);
    const NashSystem S{&P, &sm, &lin, NashMode::Linear, nullptr, nullptr, {}};
    NashOptions no;
    no.tol = 1e-13;
    no.max_sweeps = 2000;
    const Field f = leader_on_O(P, 2);
    const auto sol = solve_nash_fixed_point(S, f, no);
    const auto ref = oracle::dense_solve_optimality(P, f);
    const double d = std::max({oracle::rel_diff(sol.y, ref.y), oracle::rel_diff(sol.p[0], ref.p1),
                               oracle::rel_diff(sol.p[1], ref.p2)});
    return {d <= tol::nash_vs_dense, "16x16 alpha 1 mu 100, rel diff " + fmt("%.3g", d) + " (<= 1e-8)"};
}

// 3 -------------------------------------------------------------------------
Verdict first_order() {
    double worst = 0.0;
    std::string which;
    for (const char* name : {"heat_same.json", "sine_small.json", "rational.json", "sine_equilibrium.json"}) {
        const Config c = config(name);
        const Problem P = c.problem();
        const StateModel sm(P.model, P.grid);
        const auto lin = LinearizedOperator::at_zero(sm);
        const NashSystem S{&P, &sm, &lin, P.model.is_linear() ? NashMode::Linear : NashMode::Nonlinear, nullptr, nullptr,
                           c.solver.nash.step};
        const Field f = leader_on_O(P, 3);
        const auto sol = solve_nash_fixed_point(S, f, c.solver.nash);
        const auto rep = verify_quasi_equilibrium(S, sol, f, 20, 3);
        if (rep.max_normalized >= worst) {
            worst = rep.max_normalized;
            which = name;
        }
    }
    return {worst <= tol::first_order,
            "4 configs x 20 directions, max |J_i'| " + fmt("%.3g", worst) + " on " + which + " (<= 1e-5)"};
}

// 4 -------------------------------------------------------------------------
Verdict hum() {
    const Config c = config("heat_same.json");
    const Problem P = c.problem();
    const auto res = null_control_penalized(P, c.weights(P), c.solver.hum);
    const bool mono = PenalizedHum::monotone(res.eps_table);
    const double eps_min = res.eps_table.empty() ? 1.0 : res.eps_table.back().eps;
    const double r = res.terminal_ratio();
    return {mono && eps_min <= 1e-8 && r <= tol::terminal_ratio,
            "heat 64x64, eps down to " + fmt("%.0e", eps_min) + ", ||y(T)||/||y0|| " + fmt("%.3g", r) +
                " (<= 1e-3), monotone " + (mono ? "yes" : "no")};
}

// 5 -------------------------------------------------------------------------
Verdict wls() {
    const Config c = config("heat_same.json");
    const Problem P = c.problem();
    const auto w = c.weights(P);
    const auto res = null_control_weighted_ls(P, w, c.solver.wls);
    const bool finite = std::isfinite(res.weighted.log_state) && std::isfinite(res.weighted.log_control) &&
                        std::isfinite(res.weighted.log_control_t);
    const double r = res.terminal_ratio();
    return {res.yhat_terminal_zero && r <= tol::terminal_ratio && finite,
            std::string("heat 64x64, yhat(T) == 0 ") + (res.yhat_terminal_zero ? "yes" : "no") +
                ", re-simulated ratio " + fmt("%.3g", r) + " (<= 1e-3), weighted norms finite " +
                (finite ? "yes" : "no")};
}

// 6 -------------------------------------------------------------------------
Verdict nonlinear() {
    const Config c = config("sine_small.json");
    Problem P = c.problem();
    const auto w = c.weights(P);
    P.y0 = sine_profile(P.grid, 1e-2);
    const auto small = null_control_nonlinear_picard(P, w, c.solver.picard);
    const double r = small.terminal_ratio();
    std::string large = "converged";
    bool graceful = false;
    P.y0 = sine_profile(P.grid, 10.0);
    try {
        const auto big = null_control_nonlinear_picard(P, w, c.solver.picard);
        large = "converged in " + std::to_string(big.iterations) + " iterations, ratio " + fmt("%.3g", big.terminal_ratio());
    } catch (const Error& e) {
        large = e.kind();
        graceful = e.kind() == "OuterDiverged";
    }
    return {r <= tol::terminal_ratio && graceful,
            "amplitude 1e-2 ratio " + fmt("%.3g", r) + " (<= 1e-3); amplitude 10 " + large + " (expected OuterDiverged)"};
}

// 7 -------------------------------------------------------------------------
double max_oracle_error(const Problem& P, NashMode mode, const NashOptions& base, const std::vector<double>& mu_grid,
                        int directions, std::optional<double>* mu_star) {
    const auto& g = P.grid;
    std::mt19937_64 rng(7);
    std::vector<Field> dirs;
    for (int k = 0; k < directions; ++k) dirs.push_back(random_direction(g, P.Bi[0], rng));
    double worst = 0.0;
    std::vector<double> minima;
    for (double mu : mu_grid) {
        Problem Pm = P;
        Pm.followers[0].mu = mu;
        const StateModel sm(Pm.model, g);
        const auto lin = LinearizedOperator::at_zero(sm);
        const NashSystem S{&Pm, &sm, &lin, mode, nullptr, nullptr, base.step};
        const Field f(g);
        const auto sol = solve_nash_fixed_point(S, f, base);
        double lo = kInf;
        for (const auto& w : dirs) {
            const auto sv = second_variation(S, f, sol.v, w);
            const auto est = oracle::fd_second_derivative(
                [&](double s) {
                    auto v = sol.v;
                    v[0].axpy(s, w);
                    return follower_cost(S, f, 0, v);
                },
                1e-2, follower_cost(S, f, 0, sol.v));
            worst = std::max(worst, std::abs(sv.form - est.value) / std::max(std::abs(est.value), 1e-300));
            lo = std::min(lo, sv.form / sv.w_norm_sq);
        }
        minima.push_back(lo);
    }
    mu_star->reset();
    for (std::size_t r = minima.size(); r-- > 0;) {
        if (!(minima[r] > 0.0)) break;
        *mu_star = mu_grid[r];
    }
    return worst;
}

Verdict equilibrium() {
    const std::vector<double> grid{0.01, 0.1, 1.0, 10.0, 100.0};
    NashOptions no;
    no.tol = 1e-12;
    no.max_sweeps = 2000;
    no.step = {1e-14, 100, 1e-13};

    const Config cn = config("sine_equilibrium.json");
    std::optional<double> star_n;
    const double err_n = max_oracle_error(cn.problem(), NashMode::Nonlinear, no, grid, 20, &star_n);
    EquilibriumOptions eo;
    eo.seed = 7;
    const auto lib = equilibrium_second_derivative(cn.problem(), Field(cn.problem().grid), grid, eo);
    const bool agree = lib.mu_star == star_n;

    testing_support::ProblemOptions lo;
    lo.Nx = 32;
    lo.Nt = 32;
    lo.geometry = GeometrySpec{};
    lo.target = 1.0;
    std::optional<double> star_l;
    const double err_l = max_oracle_error(testing_support::make_problem(lo), NashMode::Linear, no, grid, 20, &star_l);

    const bool ok = star_n.has_value() && agree && err_n <= tol::second_variation_nonlinear &&
                    err_l <= tol::second_variation_linear;
    return {ok, "nonlinear mu* " + (star_n ? fmt("%g", *star_n) : std::string("none")) + " (library " +
                    (lib.mu_star ? fmt("%g", *lib.mu_star) : std::string("none")) + "), oracle rel err " +
                    fmt("%.3g", err_n) + " (<= 1e-3); linear oracle rel err " + fmt("%.3g", err_l) + " (<= 1e-4)"};
}

// 8 -------------------------------------------------------------------------
Verdict weights() {
    int n = 0, bad = 0;
    for (const auto& e : fs::directory_iterator(HIERCONTROL_CONFIG_DIR)) {
        if (e.path().extension() != ".json") continue;
        ++n;
        const Config c = load_config(e.path().string());
        const Problem P = c.problem();
        const auto w = c.weights(P);
        const auto d = weight_report(w);
        bool ok = d.ok() && !w.check_sandwich().has_value() && !d.chain.empty();
        for (const auto& ch : d.chain) ok = ok && ch.finite();
        if (!ok) ++bad;
    }
    return {n >= 5 && bad == 0, std::to_string(n) + " shipped configs, " + std::to_string(bad) + " with violations"};
}

// 9 -------------------------------------------------------------------------
Verdict observability() {
    double full[2], half[2];
    const char* names[2] = {"heat_full_O.json", "heat_half_O.json"};
    for (int c = 0; c < 2; ++c) {
        const Config cfg = config(names[c]);
        const Problem P = cfg.problem();
        const auto w = cfg.weights(P);
        for (int s = 0; s < 2; ++s) {
            const auto rep = observability_sample(P, w, 100, static_cast<unsigned long long>(s + 1));
            (c == 0 ? full : half)[s] = rep.log_max_ratio;
        }
    }
    const double spread_full = std::exp(std::abs(full[0] - full[1])) - 1.0;
    const double spread_half = std::exp(std::abs(half[0] - half[1])) - 1.0;
    const bool no_drop = half[0] >= full[0] && half[1] >= full[1];
    return {spread_full <= tol::observability_spread && spread_half <= tol::observability_spread && no_drop,
            "seed spread " + fmt("%.3g", spread_full) + " (full O), " + fmt("%.3g", spread_half) +
                " (half O) (<= 0.2); half-O log max ratio " + fmt("%.4g", std::max(half[0], half[1])) +
                " vs full " + fmt("%.4g", std::max(full[0], full[1])) + (no_drop ? ", no decrease" : ", DECREASED")};
}

// 10 ------------------------------------------------------------------------
Verdict trajectory() {
    const Config c = config("sine_small.json");
    const Problem P = c.problem();
    const auto w = c.weights(P);
    const auto a = null_control_nonlinear_picard(P, w, c.solver.picard);
    const auto b = null_control_trajectory(P, Field(P.grid), w, c.solver.picard);
    const bool same = a.f.data() == b.f.data() && a.yhat.data() == b.yhat.data() && a.nash.y.data() == b.nash.y.data();

    const Config cr = config("rational.json");
    const Problem Pr = cr.problem();
    Field steep(Pr.grid);
    for (int n = 0; n <= Pr.grid.Nt; ++n) steep(n, Pr.grid.Nx / 2) = 10.0;
    std::string detected = "not detected";
    try {
        null_control_trajectory(Pr, steep, cr.weights(Pr), cr.solver.picard);
    } catch (const Error& e) {
        detected = e.kind();
    }
    const bool caught = detected == "TrajectoryConditionViolated";
    return {same && caught, std::string("ybar = 0 bit-identical ") + (same ? "yes" : "no") +
                                "; steep ybar on rational config: " + detected};
}

// 11 ------------------------------------------------------------------------
Verdict determinism() {
    struct Job {
        std::string args, config;
    };
    const std::vector<Job> jobs{{"validate-geometry", "heat_disjoint.json"},
                                {"weights", "heat_nested.json"},
                                {"simulate", "rational.json"},
                                {"nash", "sine_small.json"},
                                {"null-control --method hum", "heat_same.json"},
                                {"null-control --method wls", "heat_same.json"},
                                {"null-control --method picard", "sine_small.json"},
                                {"trajectory", "sine_small.json"},
                                {"observability --samples 20", "heat_full_O.json"},
                                {"equilibrium-scan --directions 5", "sine_equilibrium.json"}};
    const fs::path root = fs::temp_directory_path() / "hiercontrol_acceptance";
    fs::remove_all(root);
    int compared = 0;
    std::string bad;
    for (std::size_t k = 0; k < jobs.size(); ++k) {
        fs::path out[2];
        for (int r = 0; r < 2; ++r) {
            out[r] = root / (std::to_string(k) + (r ? "b" : "a"));
            const int rc = run_cli(jobs[k].args + " --config \"" + testing_support::config_path(jobs[k].config) +
                                   "\" --seed 11 --out \"" + out[r].string() + "\"");
            if (rc != 0) bad += " [" + jobs[k].args + " exit " + std::to_string(rc) + "]";
        }
        for (const auto& e : fs::directory_iterator(out[0]))
            if (e.path().extension() == ".csv") {
                ++compared;
                if (slurp(e.path()) != slurp(out[1] / e.path().filename()))
                    bad += " [" + jobs[k].args + " " + e.path().filename().string() + "]";
            }
    }
    return {bad.empty() && compared > 0, std::to_string(jobs.size()) + " subcommand runs, " + std::to_string(compared) +
                                             " CSVs compared" + (bad.empty() ? ", all identical" : ", mismatches:" + bad)};
}

}  // namespace

int main() {
    criterion(1, budget::c1, duality);
    criterion(2, budget::c2, nash_dense);
    criterion(3, budget::c3, first_order);
    criterion(4, budget::c4, hum);
    criterion(5, budget::c5, wls);
    criterion(6, budget::c6, nonlinear);
    criterion(7, budget::c7, equilibrium);
    criterion(8, budget::c8, weights);
    criterion(9, budget::c9, observability);
    criterion(10, budget::c10, trajectory);
    criterion(11, budget::c11, determinism);
    std::printf("acceptance: %d of 11 criteria passed\n", 11 - failures);
    return failures == 0 ? 0 : 1;
}
