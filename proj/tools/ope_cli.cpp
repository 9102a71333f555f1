#include <CLI11.hpp>

#include "ope/diagnostics.hpp"
#include "ope/harness.hpp"

#include <cstdio>
#include <string>
#include <vector>

using namespace ope;

namespace {

Vector parse_vector(const std::string& text, const char* what) {
    std::vector<double> vals;
    std::istringstream in(text);
    std::string tok;
    while (std::getline(in, tok, ',')) {
        try {
            std::size_t used = 0;
            vals.push_back(std::stod(tok, &used));
            while (used < tok.size() && std::isspace(static_cast<unsigned char>(tok[used])))
                ++used;
            if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::exception&) {
            throw input_error(std::string(what) + ": expected comma-separated numbers, got '" +
                              text + "'");
        }
    }
    if (vals.empty()) throw input_error(std::string(what) + ": empty coordinate list");
    return Eigen::Map<const Vector>(vals.data(), static_cast<Eigen::Index>(vals.size()));
}

BasisSpec square_spec(BasisFamily family, int degree, int per_dim, const Box& sa_box) {
    BasisSpec spec;
    spec.family = family;
    spec.degree = degree;
    spec.per_dim.assign(sa_box.size(), per_dim);
    spec.domain = sa_box;
    return spec;
}

Box joint_box(const MdpSpec& mdp) {
    Box sa = mdp.state_box;
    sa.insert(sa.end(), mdp.action_box.begin(), mdp.action_box.end());
    return sa;
}

struct SimulateArgs {
    std::string recipe = "benchmark-2d";
    double gamma = 0.9;
    double noise_sd = 0.25;
    long n_traj = 0;
    long horizon = 0;
    long burn_in = 200;
    std::uint64_t seed = 0;
    std::string out;
};

int run_simulate(const SimulateArgs& a) {
    const Recipe r = make_recipe(a.recipe, a.gamma, a.noise_sd);
    const Dataset data = sample_trajectories(r.designed.mdp, r.designed.mdp.behavior, a.n_traj,
                                             a.horizon, static_cast<int>(a.burn_in), a.seed);
    write_dataset_csv(data, a.out);
    std::printf("wrote %ld transitions (%ld trajectories of length %ld) to %s\n",
                static_cast<long>(data.rows()), a.n_traj, a.horizon, a.out.c_str());
    return 0;
}

struct OracleArgs {
    std::string recipe = "benchmark-2d";
    double gamma = 0.9;
    std::string method = "designed";
    int grid = 201;
    double tol = 1e-8;
    int state_nodes = 64;
    std::string out;
};

int run_oracle(const OracleArgs& a) {
    const Recipe r = make_recipe(a.recipe, a.gamma, 0.0);
    OracleQ q;
    if (a.method == "designed") {
        q = tabulate_q(r.designed.mdp.state_box, r.designed.mdp.action_box, r.designed.q_star,
                       a.grid);
    } else if (a.method == "fixed-point") {
        const QuadratureRule srule =
            tensor_gauss_rule(r.designed.mdp.state_box, a.state_nodes);
        q = fixed_point_oracle(r.designed.mdp, r.designed.mdp.target, a.grid, srule, a.tol);
    } else {
        throw input_error("oracle: method must be 'designed' or 'fixed-point'");
    }
    write_oracle_json(q, a.out);
    std::printf("wrote %s oracle on a %d-per-dim grid to %s\n", q.provenance.c_str(), a.grid,
                a.out.c_str());
    if (q.provenance == "fixed-point")
        std::printf("iterations %d, final change %.3g, residual bound %.3g\n", q.iterations,
                    q.final_change, q.residual);
    return 0;
}

struct FitArgs {
    std::string data;
    std::string recipe = "benchmark-2d";
    double gamma = 0.9;
    std::string psi_family = "cosine";
    std::string b_family;
    int degree = 3;
    int per_dim = 0;
    int b_per_dim = 0;
    std::string out;
};

int run_fit(const FitArgs& a) {
    const Dataset data = read_dataset_csv(a.data);
    const Recipe r = make_recipe(a.recipe, a.gamma, 0.0);
    const MdpSpec& mdp = r.designed.mdp;
    const Box sa_box = joint_box(mdp);
    const BasisFamily psi_fam = family_from_name(a.psi_family);
    const BasisFamily b_fam =
        a.b_family.empty() ? psi_fam : family_from_name(a.b_family);
    const int b_per = a.b_per_dim > 0 ? a.b_per_dim : a.per_dim;
    const BasisSpec psi_spec = square_spec(psi_fam, a.degree, a.per_dim, sa_box);
    const BasisSpec b_spec = square_spec(b_fam, a.degree, b_per, sa_box);
    const QuadratureRule arule = tensor_gauss_rule(mdp.action_box, 32);
    const AssembledSystem sys = assemble(data, psi_spec, b_spec, mdp.target, a.gamma, arule);
    const SieveFit fit = fit_2sls(sys);
    write_fit_json(fit, a.out);
    std::printf("fit %ld coefficients with %ld instruments on %ld rows, wrote %s\n",
                static_cast<long>(sys.n_coef()), static_cast<long>(sys.n_instruments()),
                static_cast<long>(sys.rows()), a.out.c_str());
    std::printf("projected condition %.3g, gradient norm %.3g%s\n", fit.diag.cond_projected,
                fit.diag.grad_norm, fit.diag.rank_deficient ? ", rank deficient" : "");
    return 0;
}

struct DiagnoseArgs {
    std::string recipe = "benchmark-2d";
    double gamma = 0.9;
    double noise_sd = 0.25;
    std::string family = "cosine";
    int degree = 3;
    int psi_per_dim = 0;
    int b_per_dim = 0;
    long mc_points = 20000;
    std::uint64_t seed = 0;
    int sup_grid = 0;
    int cov_grid = 0;
    std::string out;
};

int run_diagnose(const DiagnoseArgs& a) {
    const Recipe r = make_recipe(a.recipe, a.gamma, a.noise_sd);
    const MdpSpec& mdp = r.designed.mdp;
    const Box sa_box = joint_box(mdp);
    const BasisFamily fam = family_from_name(a.family);
    const int b_per = a.b_per_dim > 0 ? a.b_per_dim : a.psi_per_dim;
    const BasisSpec psi_spec = square_spec(fam, a.degree, a.psi_per_dim, sa_box);
    const BasisSpec b_spec = square_spec(fam, a.degree, b_per, sa_box);
    const IllPosednessReport rep =
        compute_report(mdp, mdp.target, psi_spec, b_spec, static_cast<int>(a.mc_points),
                       a.seed, 64, 32, a.sup_grid, a.cov_grid);
    std::printf("%-14s %ld\n", "j", static_cast<long>(rep.j));
    std::printf("%-14s %ld\n", "k", static_cast<long>(rep.k));
    std::printf("%-14s %.6g\n", "gamma", rep.gamma);
    std::printf("%-14s %.6g  (se %.2g)\n", "e_j", rep.e_j, rep.se_e_j);
    std::printf("%-14s %.6g  (se %.2g)\n", "omega_j", rep.omega_j, rep.se_omega_j);
    std::printf("%-14s %.6g  (se %.2g)\n", "s_jk", rep.s_jk, rep.se_s_jk);
    std::printf("%-14s %.6g  (se %.2g)\n", "tau_j", rep.tau_j, rep.se_tau_j);
    std::printf("%-14s %.6g\n", "tau_bound", rep.tau_bound);
    std::printf("%-14s %.6g\n", "zeta_b", rep.zeta_b);
    std::printf("%-14s %.6g\n", "zeta_kappa", rep.zeta_kappa);
    std::printf("%-14s %.6g\n", "xi_psi", rep.xi_psi);
    std::printf("%-14s %.6g\n", "p_min", rep.p_min);
    std::printf("%-14s %.6g\n", "p_max", rep.p_max);
    std::printf("%-14s %.6g\n", "proj_residual", rep.proj_residual);
    std::printf("%-14s %s\n", "singular_flag", rep.singular_flag ? "true" : "false");
    std::printf("%-14s %d\n", "mc_points", rep.mc_points);
    std::printf("%-14s %d\n", "sup_grid", rep.sup_grid);
    if (!a.out.empty()) {
        write_report_json(rep, a.out);
        std::printf("wrote %s\n", a.out.c_str());
    }
    const EjBoundCheck ej = check_ej_bound(rep);
    std::printf("%-14s %s  (margin %.3g)\n", "e_j bound", ej.pass ? "pass" : "FAIL",
                ej.margin_chain);
    return 0;
}

struct StudyArgs {
    std::string config;
};

int run_rate_study(const StudyArgs& a) {
    const StudyConfig cfg = study_config_from_file(a.config);
    const RateStudyResult res = run_study(cfg);
    std::printf("%-10s %-8s %-12s %-12s\n", "nt", "j", "mean_l2", "mean_sup");
    for (std::size_t li = 0; li < cfg.ladder.size(); ++li) {
        Eigen::Index j_used = 0;
        for (const auto& rr : res.reps)
            if (rr.ladder_idx == static_cast<int>(li) && !rr.failed) j_used = rr.j_used;
        std::printf("%-10ld %-8ld %-12.5g %-12.5g\n",
                    static_cast<long>(cfg.ladder[li].nt()), static_cast<long>(j_used),
                    res.mean_l2[li], res.mean_sup[li]);
    }
    auto show_slope = [](const char* name, const SlopeFit& s) {
        if (s.valid)
            std::printf("%s slope %.4f (se %.4f, %d points)\n", name, s.slope, s.se, s.points);
        else
            std::printf("%s slope not fitted\n", name);
    };
    show_slope("l2", res.slope_l2);
    show_slope("sup", res.slope_sup);
    for (std::size_t i = 0; i < res.slope_deriv_l2.size(); ++i) {
        std::string tag = "d";
        for (int k : cfg.deriv_orders[i]) tag += std::to_string(k);
        show_slope((tag + " l2").c_str(), res.slope_deriv_l2[i]);
        show_slope((tag + " sup").c_str(), res.slope_deriv_sup[i]);
    }
    if (res.failures > 0)
        std::printf("failures: %d of %zu cells\n", res.failures,
                    cfg.ladder.size() * static_cast<std::size_t>(cfg.replications));
    if (!cfg.out_csv.empty()) std::printf("wrote %s\n", cfg.out_csv.c_str());
    if (!cfg.out_json.empty()) std::printf("wrote %s\n", cfg.out_json.c_str());
    if (res.study_failed) {
        std::fprintf(stderr, "error: more than 20%% of replications failed\n");
        return 2;
    }
    return 0;
}

struct ValueArgs {
    std::string fit;
    std::string recipe = "benchmark-2d";
    std::string s0;
    std::string a0;
    std::string data;
    int n_boot = 200;
    std::uint64_t seed = 0;
    int instrument_extra = 0;
};

int run_value(const ValueArgs& a) {
    const SieveFit fit = read_fit_json(a.fit);
    const Recipe r = make_recipe(a.recipe, fit.gamma, 0.0);
    const MdpSpec& mdp = r.designed.mdp;

    InitialDist init;
    init.point = true;
    init.location = parse_vector(a.s0, "--s0");
    if (init.location.size() != mdp.state_dims())
        throw input_error("value: --s0 must have one coordinate per state dimension");

    PolicyDensity target = mdp.target;
    if (!a.a0.empty()) {
        const Vector a0 = parse_vector(a.a0, "--a0");
        if (a0.size() != mdp.action_dims())
            throw input_error("value: --a0 must have one coordinate per action dimension");
        target = point_mass_policy(mdp.action_box, [a0](const Vector&) { return a0; });
    }

    const QuadratureRule srule = tensor_gauss_rule(mdp.state_box, 64);
    const QuadratureRule arule = tensor_gauss_rule(mdp.action_box, 32);
    if (a.data.empty()) {
        const double v = plugin_value(fit, target, init, srule, arule);
        std::printf("value = %.12g\n", v);
        return 0;
    }
    const Dataset data = read_dataset_csv(a.data);
    BasisSpec b_spec = fit.psi_spec;
    for (int& m : b_spec.per_dim) m += a.instrument_extra;
    const AssembledSystem sys =
        assemble(data, fit.psi_spec, b_spec, target, fit.gamma, arule);
    const BootstrapValue bv =
        bootstrap_value(sys, target, init, srule, arule, a.n_boot, a.seed);
    std::printf("value = %.12g\n", bv.value);
    std::printf("bootstrap_se = %.6g\n", bv.se);
    std::printf("replicates = %ld\n", static_cast<long>(bv.replicates.size()));
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"sieve two-stage-least-squares toolkit for off-policy evaluation"};
    app.require_subcommand(1);

    SimulateArgs sim_args;
    CLI::App* sim = app.add_subcommand("simulate", "sample trajectories from a recipe");
    sim->add_option("--recipe", sim_args.recipe, "recipe id")->capture_default_str();
    sim->add_option("--gamma", sim_args.gamma, "discount factor")->capture_default_str();
    sim->add_option("--noise-sd", sim_args.noise_sd, "reward noise scale")
        ->capture_default_str();
    sim->add_option("--n-traj", sim_args.n_traj, "number of trajectories")->required();
    sim->add_option("--horizon", sim_args.horizon, "steps per trajectory")->required();
    sim->add_option("--burn-in", sim_args.burn_in, "steps discarded before recording")
        ->capture_default_str();
    sim->add_option("--seed", sim_args.seed, "rng seed")->capture_default_str();
    sim->add_option("--out", sim_args.out, "output csv path")->required();

    OracleArgs ora_args;
    CLI::App* ora = app.add_subcommand("oracle", "tabulate the ground-truth q on a grid");
    ora->add_option("--recipe", ora_args.recipe, "recipe id")->capture_default_str();
    ora->add_option("--gamma", ora_args.gamma, "discount factor")->capture_default_str();
    ora->add_option("--method", ora_args.method, "designed or fixed-point")
        ->capture_default_str();
    ora->add_option("--grid", ora_args.grid, "grid points per dimension")
        ->capture_default_str();
    ora->add_option("--tol", ora_args.tol, "fixed-point stopping tolerance")
        ->capture_default_str();
    ora->add_option("--state-nodes", ora_args.state_nodes,
                    "quadrature nodes per state dimension")
        ->capture_default_str();
    ora->add_option("--out", ora_args.out, "output json path")->required();

    FitArgs fit_args;
    CLI::App* fitc = app.add_subcommand("fit", "fit the sieve estimator to a dataset");
    fitc->add_option("--data", fit_args.data, "dataset csv")->required();
    fitc->add_option("--recipe", fit_args.recipe, "recipe id for the target policy")
        ->capture_default_str();
    fitc->add_option("--gamma", fit_args.gamma, "discount factor")->capture_default_str();
    fitc->add_option("--psi-family", fit_args.psi_family, "cosine, legendre, or bspline")
        ->capture_default_str();
    fitc->add_option("--b-family", fit_args.b_family, "instrument family (default: psi's)");
    fitc->add_option("--degree", fit_args.degree, "spline degree")->capture_default_str();
    fitc->add_option("--per-dim", fit_args.per_dim, "basis functions per dimension")
        ->required();
    fitc->add_option("--b-per-dim", fit_args.b_per_dim,
                     "instrument functions per dimension (default: --per-dim)");
    fitc->add_option("--out", fit_args.out, "output fit json")->required();

    DiagnoseArgs diag_args;
    CLI::App* diag =
        app.add_subcommand("diagnose", "estimate the ill-posedness spectrum of a design");
    diag->add_option("--recipe", diag_args.recipe, "recipe id")->capture_default_str();
    diag->add_option("--gamma", diag_args.gamma, "discount factor")->capture_default_str();
    diag->add_option("--noise-sd", diag_args.noise_sd, "reward noise scale")
        ->capture_default_str();
    diag->add_option("--family", diag_args.family, "basis family for psi and b")
        ->capture_default_str();
    diag->add_option("--degree", diag_args.degree, "spline degree")->capture_default_str();
    diag->add_option("--psi-per-dim", diag_args.psi_per_dim, "basis functions per dimension")
        ->required();
    diag->add_option("--b-per-dim", diag_args.b_per_dim,
                     "instrument functions per dimension (default: --psi-per-dim)");
    diag->add_option("--mc-points", diag_args.mc_points, "monte carlo sample size")
        ->capture_default_str();
    diag->add_option("--seed", diag_args.seed, "rng seed")->capture_default_str();
    diag->add_option("--sup-grid", diag_args.sup_grid,
                     "scan grid per dimension for the sup constants (0 = auto)")
        ->capture_default_str();
    diag->add_option("--cov-grid", diag_args.cov_grid,
                     "scan grid per dimension for coverage bounds (0 = auto)")
        ->capture_default_str();
    diag->add_option("--out", diag_args.out, "report json path");

    StudyArgs study_args;
    CLI::App* study = app.add_subcommand("rate-study", "run a convergence-rate study");
    study->add_option("--config", study_args.config, "study config file")->required();

    ValueArgs val_args;
    CLI::App* val = app.add_subcommand("value", "evaluate a fitted q as a policy value");
    val->add_option("--fit", val_args.fit, "fit json from the fit subcommand")->required();
    val->add_option("--recipe", val_args.recipe, "recipe id for the target policy")
        ->capture_default_str();
    val->add_option("--s0", val_args.s0, "initial state, comma separated")->required();
    val->add_option("--a0", val_args.a0,
                    "fixed action; replaces the target policy with a point mass");
    val->add_option("--data", val_args.data, "dataset csv, enables the bootstrap se");
    val->add_option("--boot", val_args.n_boot, "bootstrap replicates")->capture_default_str();
    val->add_option("--seed", val_args.seed, "bootstrap seed")->capture_default_str();
    val->add_option("--instrument-extra", val_args.instrument_extra,
                    "extra instrument functions per dimension when refitting")
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (sim->parsed()) return run_simulate(sim_args);
        if (ora->parsed()) return run_oracle(ora_args);
        if (fitc->parsed()) return run_fit(fit_args);
        if (diag->parsed()) return run_diagnose(diag_args);
        if (study->parsed()) return run_rate_study(study_args);
        if (val->parsed()) return run_value(val_args);
    } catch (const input_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const config_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const capability_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const convergence_error& e) {
        std::fprintf(stderr, "numerical failure: %s (residual %.3g)\n", e.what(), e.residual);
        return 2;
    } catch (const generation_error& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 2;
    }
    return 0;
}
