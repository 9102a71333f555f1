#include "ope/harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace ope {

namespace {

void atomic_write(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw input_error("cannot open for writing: " + tmp);
        out << text;
        if (!out.good()) throw input_error("write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        throw input_error("rename failed for: " + path);
    }
}

std::string fmt_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

std::string alpha_tag(const MultiIndex& alpha) {
    std::string t = "d";
    for (int k : alpha) t += std::to_string(k);
    return t;
}

std::string sanitize_msg(std::string msg) {
    for (char& c : msg) {
        if (c == ',' || c == '\n' || c == '\r') c = ';';
    }
    return msg;
}

int clamp_per_dim(BasisFamily family, int degree, int m) {
    if (family == BasisFamily::BSpline) return std::max(m, degree + 1);
    return m;
}

std::vector<LadderPoint> parse_ladder(const std::string& text, const std::string& origin) {
    std::vector<LadderPoint> out;
    std::istringstream in(text);
    std::string tok;
    while (std::getline(in, tok, ',')) {
        const std::size_t x = tok.find('x');
        if (x == std::string::npos || tok.find('x', x + 1) != std::string::npos)
            throw config_error(origin + ": ladder entries must look like NxT, got '" + tok + "'");
        try {
            LadderPoint pt;
            pt.n_traj = std::stol(tok.substr(0, x));
            pt.horizon = std::stol(tok.substr(x + 1));
            out.push_back(pt);
        } catch (const std::exception&) {
            throw config_error(origin + ": bad ladder entry '" + tok + "'");
        }
    }
    if (out.empty()) throw config_error(origin + ": ladder is empty");
    return out;
}

std::vector<MultiIndex> parse_deriv_orders(const std::string& text, const std::string& origin) {
    std::vector<MultiIndex> out;
    if (text.empty()) return out;
    std::istringstream in(text);
    std::string tok;
    while (std::getline(in, tok, ',')) {
        MultiIndex alpha;
        std::istringstream dims(tok);
        std::string part;
        while (std::getline(dims, part, ':')) {
            try {
                alpha.push_back(std::stoi(part));
            } catch (const std::exception&) {
                throw config_error(origin + ": bad derivative order '" + tok + "'");
            }
        }
        if (alpha.empty())
            throw config_error(origin + ": empty derivative order entry");
        out.push_back(alpha);
    }
    return out;
}

// uniform inclusive tensor grid rows, last dimension fastest
Matrix interior_grid(const Box& box, int per_dim) {
    const int d = static_cast<int>(box.size());
    double total = 1.0;
    for (int k = 0; k < d; ++k) total *= per_dim;
    if (total > 2e6)
        throw capability_error("measurement grid too large; lower grid_per_dim");
    const Eigen::Index n = static_cast<Eigen::Index>(total);
    Matrix pts(n, d);
    for (Eigen::Index r = 0; r < n; ++r) {
        Eigen::Index rem = r;
        for (int dim = d - 1; dim >= 0; --dim) {
            const Eigen::Index idx = rem % per_dim;
            rem /= per_dim;
            pts(r, dim) = box[dim].lo + (box[dim].hi - box[dim].lo) *
                                            static_cast<double>(idx) / (per_dim - 1);
        }
    }
    return pts;
}

nlohmann::json slope_json(const SlopeFit& s) {
    nlohmann::json j;
    j["slope"] = s.slope;
    j["se"] = s.se;
    j["points"] = s.points;
    j["valid"] = s.valid;
    return j;
}

} // namespace

StudyConfig study_config_from_map(ConfigMap& cfg) {
    StudyConfig sc;
    sc.recipe_id = cfg.get_string("recipe", sc.recipe_id);
    sc.gamma = cfg.get_double("gamma", sc.gamma);
    sc.noise_sd = cfg.get_double("noise_sd", sc.noise_sd);
    sc.psi_family = family_from_name(cfg.get_string("psi_family", "cosine"));
    sc.b_family = cfg.has("b_family") ? family_from_name(cfg.get_string("b_family"))
                                      : sc.psi_family;
    sc.bspline_degree = static_cast<int>(cfg.get_int("bspline_degree", 3));
    sc.ladder = parse_ladder(cfg.get_string("ladder"), cfg.origin());
    sc.j_rule = cfg.get_string("j_rule", "l2");
    sc.j_multiplier = cfg.get_double("j_multiplier", 1.0);
    sc.smoothness = cfg.get_double("smoothness", 2.0);
    sc.replications = static_cast<int>(cfg.get_int("replications", 10));
    sc.deriv_orders = parse_deriv_orders(cfg.get_string("deriv_orders", ""), cfg.origin());
    sc.seed = cfg.get_u64("seed", 0);
    sc.burn_in = static_cast<int>(cfg.get_int("burn_in", 200));
    sc.instrument_extra = static_cast<int>(cfg.get_int("instrument_extra", 0));
    sc.grid_per_dim = static_cast<int>(cfg.get_int("grid_per_dim", 201));
    sc.out_csv = cfg.get_string("out_csv", "");
    sc.out_json = cfg.get_string("out_json", "");
    cfg.finish();
    validate_study_config(sc);
    return sc;
}

StudyConfig study_config_from_file(const std::string& path) {
    ConfigMap cfg = ConfigMap::from_file(path);
    return study_config_from_map(cfg);
}

void validate_study_config(const StudyConfig& cfg) {
    if (cfg.recipe_id.empty()) throw config_error("study config: recipe must be set");
    if (!(cfg.gamma >= 0.0 && cfg.gamma < 1.0))
        throw config_error("study config: gamma must lie in [0,1)");
    if (!(cfg.noise_sd >= 0.0)) throw config_error("study config: noise_sd must be >= 0");
    if (cfg.bspline_degree < 1) throw config_error("study config: bspline_degree must be >= 1");
    if (cfg.ladder.empty()) throw config_error("study config: ladder is empty");
    Eigen::Index prev_nt = 0;
    for (const auto& pt : cfg.ladder) {
        if (pt.n_traj < 1 || pt.horizon < 1)
            throw config_error("study config: ladder entries need N >= 1 and T >= 1");
        if (pt.nt() <= prev_nt)
            throw config_error("study config: ladder must be strictly increasing in N*T");
        prev_nt = pt.nt();
    }
    if (cfg.j_rule != "l2" && cfg.j_rule != "sup")
        throw config_error("study config: j_rule must be 'l2' or 'sup'");
    if (!(cfg.j_multiplier > 0.0)) throw config_error("study config: j_multiplier must be > 0");
    if (!(cfg.smoothness > 0.0)) throw config_error("study config: smoothness must be > 0");
    if (cfg.replications < 1) throw config_error("study config: replications must be >= 1");
    for (const auto& alpha : cfg.deriv_orders) {
        for (int k : alpha)
            if (k < 0) throw config_error("study config: derivative orders must be nonnegative");
    }
    if (cfg.burn_in < 0) throw config_error("study config: burn_in must be >= 0");
    if (cfg.instrument_extra < 0)
        throw config_error("study config: instrument_extra must be >= 0");
    if (cfg.grid_per_dim < 8) throw config_error("study config: grid_per_dim must be >= 8");
}

SlopeFit fit_loglog_slope(const std::vector<std::pair<double, double>>& points) {
    if (points.size() < 4) throw input_error("fit_loglog_slope: need at least 4 points");
    const int n = static_cast<int>(points.size());
    Vector lx(n), ly(n);
    for (int i = 0; i < n; ++i) {
        if (!(points[i].first > 0.0))
            throw input_error("fit_loglog_slope: x values must be positive");
        if (!(points[i].second > 0.0))
            throw input_error("fit_loglog_slope: errors must be positive");
        lx(i) = std::log(points[i].first);
        ly(i) = std::log(points[i].second);
    }
    const double mx = lx.mean();
    const double my = ly.mean();
    const double sxx = (lx.array() - mx).square().sum();
    if (!(sxx > 0.0)) throw input_error("fit_loglog_slope: x values must be distinct");
    const double sxy = ((lx.array() - mx) * (ly.array() - my)).sum();
    SlopeFit out;
    out.slope = sxy / sxx;
    const double intercept = my - out.slope * mx;
    const Vector resid = ly - (out.slope * lx.array() + intercept).matrix();
    const double rss = resid.squaredNorm();
    out.se = n > 2 ? std::sqrt(std::max(0.0, rss / (n - 2)) / sxx) : 0.0;
    out.points = n;
    out.valid = true;
    return out;
}

double ladder_x(const StudyConfig& cfg, const LadderPoint& pt) {
    const double nt = static_cast<double>(pt.nt());
    if (cfg.j_rule == "sup") {
        if (nt < 2.0) throw input_error("ladder_x: sup rule needs N*T >= 2");
        return nt / std::log(nt);
    }
    return nt;
}

RateStudyResult run_study(const StudyConfig& cfg) {
    validate_study_config(cfg);
    const Recipe recipe = make_recipe(cfg.recipe_id, cfg.gamma, cfg.noise_sd);
    const MdpSpec& mdp = recipe.designed.mdp;
    const int ds = mdp.state_dims();
    const int da = mdp.action_dims();
    const int dims = ds + da;
    for (const auto& alpha : cfg.deriv_orders) {
        if (static_cast<int>(alpha.size()) != dims)
            throw config_error("study config: derivative orders must have one entry per dimension");
    }
    const int n_alpha = static_cast<int>(cfg.deriv_orders.size());
    const int n_ladder = static_cast<int>(cfg.ladder.size());

    std::vector<JChoice> jcs(n_ladder);
    for (int li = 0; li < n_ladder; ++li)
        jcs[li] = choose_J(cfg.ladder[li].nt(), cfg.smoothness, dims, cfg.j_rule,
                           cfg.j_multiplier);

    Box sa_box = mdp.state_box;
    sa_box.insert(sa_box.end(), mdp.action_box.begin(), mdp.action_box.end());

    const StationaryDensity stat = estimate_stationary(mdp, mdp.behavior);
    const QuadratureRule arule = tensor_gauss_rule(mdp.action_box, 32);
    const Eigen::Index n_s = stat.state_rule.size();
    const Eigen::Index n_a = arule.size();

    // occupation-weighted quadrature points for L2 norms and residuals
    const bool pm_behavior = mdp.behavior.point_mass();
    const Eigen::Index n_l2 = pm_behavior ? n_s : n_s * n_a;
    Matrix l2_pts(n_l2, dims);
    Vector l2_w(n_l2);
    for (Eigen::Index i = 0; i < n_s; ++i) {
        const Vector si = stat.state_rule.nodes.row(i).transpose();
        const double base = stat.state_rule.weights(i) * stat.f(i);
        if (pm_behavior) {
            l2_pts.row(i).head(ds) = si.transpose();
            l2_pts.row(i).tail(da) = mdp.behavior.point_location(si).transpose();
            l2_w(i) = base;
        } else {
            for (Eigen::Index l = 0; l < n_a; ++l) {
                const Vector al = arule.nodes.row(l).transpose();
                const Eigen::Index r = i * n_a + l;
                l2_pts.row(r).head(ds) = si.transpose();
                l2_pts.row(r).tail(da) = al.transpose();
                l2_w(r) = base * arule.weights(l) * mdp.behavior.density(si, al);
            }
        }
    }

    // sup-error grid: interior by one knot span of the coarsest sieve
    // (capped at a quarter width so degenerate spans keep a usable window)
    Box interior = sa_box;
    {
        const int m0 = clamp_per_dim(cfg.psi_family, cfg.bspline_degree, jcs[0].per_dim);
        const int spans0 =
            cfg.psi_family == BasisFamily::BSpline ? std::max(1, m0 - cfg.bspline_degree) : m0;
        for (auto& iv : interior) {
            const double w = iv.width();
            const double off = std::min(w / 4.0, w / spans0);
            iv.lo += off;
            iv.hi -= off;
        }
    }
    const Matrix grid_pts = interior_grid(interior, cfg.grid_per_dim);

    auto qstar_at = [&](const Matrix& pts) {
        Vector v(pts.rows());
        for (Eigen::Index r = 0; r < pts.rows(); ++r)
            v(r) = recipe.designed.q_star(pts.row(r).head(ds).transpose(),
                                          pts.row(r).tail(da).transpose());
        return v;
    };
    auto deriv_at = [&](const Matrix& pts, const MultiIndex& alpha) {
        Vector v(pts.rows());
        for (Eigen::Index r = 0; r < pts.rows(); ++r)
            v(r) = recipe.q_star_deriv(pts.row(r).head(ds).transpose(),
                                       pts.row(r).tail(da).transpose(), alpha);
        return v;
    };
    const Vector qstar_grid = qstar_at(grid_pts);
    const Vector qstar_l2 = qstar_at(l2_pts);
    std::vector<Vector> deriv_grid_true(n_alpha), deriv_l2_true(n_alpha);
    for (int a = 0; a < n_alpha; ++a) {
        deriv_grid_true[a] = deriv_at(grid_pts, cfg.deriv_orders[a]);
        deriv_l2_true[a] = deriv_at(l2_pts, cfg.deriv_orders[a]);
    }

    // ground-truth value of the target policy under the recipe's initial law
    double v_oracle = 0.0;
    {
        auto pi_q = [&](const Vector& s) {
            if (mdp.target.point_mass())
                return recipe.designed.q_star(s, mdp.target.point_location(s));
            double acc = 0.0;
            for (Eigen::Index l = 0; l < n_a; ++l) {
                const Vector al = arule.nodes.row(l).transpose();
                acc += arule.weights(l) * mdp.target.density(s, al) *
                       recipe.designed.q_star(s, al);
            }
            return acc;
        };
        if (recipe.init.point) {
            v_oracle = pi_q(recipe.init.location);
        } else {
            for (Eigen::Index i = 0; i < n_s; ++i) {
                const Vector si = stat.state_rule.nodes.row(i).transpose();
                v_oracle += stat.state_rule.weights(i) * recipe.init.density(si) * pi_q(si);
            }
        }
    }

    RateStudyResult out;
    out.cfg = cfg;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    out.mean_l2.assign(n_ladder, nan);
    out.mean_sup.assign(n_ladder, nan);
    out.mean_deriv_sup.assign(n_alpha, std::vector<double>(n_ladder, nan));
    out.mean_deriv_l2.assign(n_alpha, std::vector<double>(n_ladder, nan));

    for (int li = 0; li < n_ladder; ++li) {
        const LadderPoint pt = cfg.ladder[li];
        double acc_l2 = 0.0, acc_sup = 0.0;
        std::vector<double> acc_dsup(n_alpha, 0.0), acc_dl2(n_alpha, 0.0);
        int ok = 0;
        for (int rep = 0; rep < cfg.replications; ++rep) {
            RepResult rr;
            rr.ladder_idx = li;
            rr.rep_idx = rep;
            rr.n_traj = pt.n_traj;
            rr.horizon = pt.horizon;
            const auto t0 = std::chrono::steady_clock::now();
            try {
                const std::uint64_t cell_seed =
                    mix_seed(cfg.seed, static_cast<std::uint64_t>(li) * 1000 +
                                           static_cast<std::uint64_t>(rep));
                const Dataset data = sample_trajectories(mdp, mdp.behavior, pt.n_traj,
                                                         pt.horizon, cfg.burn_in, cell_seed);
                const int m_psi =
                    clamp_per_dim(cfg.psi_family, cfg.bspline_degree, jcs[li].per_dim);
                const int m_b = clamp_per_dim(cfg.b_family, cfg.bspline_degree,
                                              m_psi + cfg.instrument_extra);
                BasisSpec psi_spec;
                psi_spec.family = cfg.psi_family;
                psi_spec.degree = cfg.bspline_degree;
                psi_spec.per_dim.assign(dims, m_psi);
                psi_spec.domain = sa_box;
                BasisSpec b_spec;
                b_spec.family = cfg.b_family;
                b_spec.degree = cfg.bspline_degree;
                b_spec.per_dim.assign(dims, m_b);
                b_spec.domain = sa_box;

                const AssembledSystem sys =
                    assemble(data, psi_spec, b_spec, mdp.target, cfg.gamma, arule);
                const SieveFit fit = fit_2sls(sys);
                rr.j_used = psi_spec.size();

                const Vector qhat_grid = predict_q(fit, grid_pts);
                rr.sup_err = (qhat_grid - qstar_grid).cwiseAbs().maxCoeff();
                const Vector qhat_l2 = predict_q(fit, l2_pts);
                rr.l2_err = std::sqrt(
                    (l2_w.array() * (qhat_l2 - qstar_l2).array().square()).sum());
                for (int a = 0; a < n_alpha; ++a) {
                    const Vector dg = predict_q_deriv(fit, grid_pts, cfg.deriv_orders[a]);
                    rr.deriv_sup_err.push_back(
                        (dg - deriv_grid_true[a]).cwiseAbs().maxCoeff());
                    const Vector dl = predict_q_deriv(fit, l2_pts, cfg.deriv_orders[a]);
                    rr.deriv_l2_err.push_back(std::sqrt(
                        (l2_w.array() * (dl - deriv_l2_true[a]).array().square()).sum()));
                }
                const BellmanResidual bn = bellman_residual_norms(fit, mdp, mdp.target, l2_pts,
                                                                  l2_w, stat.state_rule, 32);
                rr.bellman_sup = bn.sup;
                rr.bellman_l2 = bn.l2;
                const double vhat =
                    plugin_value(fit, mdp.target, recipe.init, stat.state_rule, arule);
                rr.value_err = std::abs(vhat - v_oracle);
            } catch (const std::exception& e) {
                rr.failed = true;
                rr.error_msg = e.what();
            }
            rr.deriv_sup_err.resize(n_alpha, nan);
            rr.deriv_l2_err.resize(n_alpha, nan);
            const auto t1 = std::chrono::steady_clock::now();
            rr.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
            if (!rr.failed) {
                ++ok;
                acc_l2 += rr.l2_err;
                acc_sup += rr.sup_err;
                for (int a = 0; a < n_alpha; ++a) {
                    acc_dsup[a] += rr.deriv_sup_err[a];
                    acc_dl2[a] += rr.deriv_l2_err[a];
                }
            } else {
                ++out.failures;
            }
            out.reps.push_back(std::move(rr));
        }
        if (ok > 0) {
            out.mean_l2[li] = acc_l2 / ok;
            out.mean_sup[li] = acc_sup / ok;
            for (int a = 0; a < n_alpha; ++a) {
                out.mean_deriv_sup[a][li] = acc_dsup[a] / ok;
                out.mean_deriv_l2[a][li] = acc_dl2[a] / ok;
            }
        }
    }

    const int total = n_ladder * cfg.replications;
    out.study_failed = out.failures * 5 > total;

    for (int li = 0; li + 1 < n_ladder; ++li) {
        if (std::isfinite(out.mean_l2[li]) && std::isfinite(out.mean_l2[li + 1]) &&
            out.mean_l2[li + 1] > out.mean_l2[li])
            ++out.l2_inversions;
    }

    auto slope_of = [&](const std::vector<double>& means) {
        SlopeFit s;
        if (n_ladder < 4) return s;
        std::vector<std::pair<double, double>> pts;
        for (int li = 0; li < n_ladder; ++li) {
            if (!(std::isfinite(means[li]) && means[li] > 0.0)) return s;
            pts.emplace_back(ladder_x(cfg, cfg.ladder[li]), means[li]);
        }
        return fit_loglog_slope(pts);
    };
    out.slope_l2 = slope_of(out.mean_l2);
    out.slope_sup = slope_of(out.mean_sup);
    out.slope_deriv_sup.resize(n_alpha);
    out.slope_deriv_l2.resize(n_alpha);
    for (int a = 0; a < n_alpha; ++a) {
        out.slope_deriv_sup[a] = slope_of(out.mean_deriv_sup[a]);
        out.slope_deriv_l2[a] = slope_of(out.mean_deriv_l2[a]);
    }

    if (!cfg.out_csv.empty()) write_study_csv(out, cfg.out_csv);
    if (!cfg.out_json.empty()) write_study_json(out, cfg.out_json);
    return out;
}

std::string study_csv(const RateStudyResult& result) {
    std::ostringstream out;
    out << "ladder_idx,rep,n_traj,horizon,nt,j,sup_err,l2_err";
    for (const auto& alpha : result.cfg.deriv_orders) {
        const std::string tag = alpha_tag(alpha);
        out << "," << tag << "_sup," << tag << "_l2";
    }
    out << ",bellman_sup,bellman_l2,value_err,failed,error\n";
    for (const auto& rr : result.reps) {
        out << rr.ladder_idx << "," << rr.rep_idx << "," << rr.n_traj << "," << rr.horizon << ","
            << (rr.n_traj * rr.horizon) << "," << rr.j_used << "," << fmt_double(rr.sup_err)
            << "," << fmt_double(rr.l2_err);
        for (std::size_t a = 0; a < result.cfg.deriv_orders.size(); ++a)
            out << "," << fmt_double(rr.deriv_sup_err[a]) << ","
                << fmt_double(rr.deriv_l2_err[a]);
        out << "," << fmt_double(rr.bellman_sup) << "," << fmt_double(rr.bellman_l2) << ","
            << fmt_double(rr.value_err) << "," << (rr.failed ? 1 : 0) << ","
            << sanitize_msg(rr.error_msg) << "\n";
    }
    return out.str();
}

void write_study_csv(const RateStudyResult& result, const std::string& path) {
    atomic_write(path, study_csv(result));
}

std::string study_to_json(const RateStudyResult& result) {
    const StudyConfig& cfg = result.cfg;
    nlohmann::json j;
    j["schema_version"] = 1;

    nlohmann::json jc;
    jc["recipe"] = cfg.recipe_id;
    jc["gamma"] = cfg.gamma;
    jc["noise_sd"] = cfg.noise_sd;
    jc["psi_family"] = family_name(cfg.psi_family);
    jc["b_family"] = family_name(cfg.b_family);
    jc["bspline_degree"] = cfg.bspline_degree;
    jc["ladder"] = nlohmann::json::array();
    for (const auto& pt : cfg.ladder) jc["ladder"].push_back({pt.n_traj, pt.horizon});
    jc["j_rule"] = cfg.j_rule;
    jc["j_multiplier"] = cfg.j_multiplier;
    jc["smoothness"] = cfg.smoothness;
    jc["replications"] = cfg.replications;
    jc["deriv_orders"] = cfg.deriv_orders;
    jc["seed"] = cfg.seed;
    jc["burn_in"] = cfg.burn_in;
    jc["instrument_extra"] = cfg.instrument_extra;
    jc["grid_per_dim"] = cfg.grid_per_dim;
    j["config"] = jc;

    j["replications"] = nlohmann::json::array();
    for (const auto& rr : result.reps) {
        nlohmann::json r;
        r["ladder_idx"] = rr.ladder_idx;
        r["rep"] = rr.rep_idx;
        r["n_traj"] = rr.n_traj;
        r["horizon"] = rr.horizon;
        r["j"] = rr.j_used;
        r["sup_err"] = rr.sup_err;
        r["l2_err"] = rr.l2_err;
        for (std::size_t a = 0; a < cfg.deriv_orders.size(); ++a) {
            const std::string tag = alpha_tag(cfg.deriv_orders[a]);
            r[tag + "_sup"] = rr.deriv_sup_err[a];
            r[tag + "_l2"] = rr.deriv_l2_err[a];
        }
        r["bellman_sup"] = rr.bellman_sup;
        r["bellman_l2"] = rr.bellman_l2;
        r["value_err"] = rr.value_err;
        r["wall_seconds"] = rr.wall_seconds;
        r["failed"] = rr.failed;
        if (rr.failed) r["error"] = rr.error_msg;
        j["replications"].push_back(std::move(r));
    }

    j["ladder"] = nlohmann::json::array();
    for (std::size_t li = 0; li < cfg.ladder.size(); ++li) {
        nlohmann::json l;
        l["n_traj"] = cfg.ladder[li].n_traj;
        l["horizon"] = cfg.ladder[li].horizon;
        l["nt"] = cfg.ladder[li].nt();
        l["x"] = ladder_x(cfg, cfg.ladder[li]);
        l["mean_l2"] = result.mean_l2[li];
        l["mean_sup"] = result.mean_sup[li];
        for (std::size_t a = 0; a < cfg.deriv_orders.size(); ++a) {
            const std::string tag = alpha_tag(cfg.deriv_orders[a]);
            l["mean_" + tag + "_sup"] = result.mean_deriv_sup[a][li];
            l["mean_" + tag + "_l2"] = result.mean_deriv_l2[a][li];
        }
        j["ladder"].push_back(std::move(l));
    }

    nlohmann::json slopes;
    slopes["l2"] = slope_json(result.slope_l2);
    slopes["sup"] = slope_json(result.slope_sup);
    for (std::size_t a = 0; a < cfg.deriv_orders.size(); ++a) {
        const std::string tag = alpha_tag(cfg.deriv_orders[a]);
        slopes[tag + "_sup"] = slope_json(result.slope_deriv_sup[a]);
        slopes[tag + "_l2"] = slope_json(result.slope_deriv_l2[a]);
    }
    j["slopes"] = slopes;

    j["failures"] = result.failures;
    j["study_failed"] = result.study_failed;
    j["l2_inversions"] = result.l2_inversions;
    return j.dump(2);
}

void write_study_json(const RateStudyResult& result, const std::string& path) {
    atomic_write(path, study_to_json(result) + "\n");
}

void write_oracle_json(const OracleQ& q, const std::string& path) {
    nlohmann::json j;
    j["schema_version"] = 1;
    auto box_json = [](const Box& box) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& iv : box) arr.push_back({iv.lo, iv.hi});
        return arr;
    };
    j["state_box"] = box_json(q.state_box);
    j["action_box"] = box_json(q.action_box);
    j["grid_per_dim"] = q.grid_per_dim;
    j["axes"] = q.axes;
    j["values"] = std::vector<double>(q.values.data(), q.values.data() + q.values.size());
    j["provenance"] = q.provenance;
    j["tol"] = q.tol;
    j["iterations"] = q.iterations;
    j["final_change"] = q.final_change;
    j["residual"] = q.residual;
    atomic_write(path, j.dump(2) + "\n");
}

OracleQ read_oracle_json(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw input_error("cannot open oracle file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw input_error("oracle file parse failure: " + std::string(e.what()));
    }
    try {
        OracleQ q;
        auto box_from = [](const nlohmann::json& arr) {
            Box box;
            for (const auto& iv : arr) box.push_back({iv.at(0).get<double>(), iv.at(1).get<double>()});
            return box;
        };
        q.state_box = box_from(j.at("state_box"));
        q.action_box = box_from(j.at("action_box"));
        q.grid_per_dim = j.at("grid_per_dim").get<std::vector<int>>();
        q.axes = j.at("axes").get<std::vector<std::vector<double>>>();
        const auto vals = j.at("values").get<std::vector<double>>();
        q.values = Eigen::Map<const Vector>(vals.data(), static_cast<Eigen::Index>(vals.size()));
        q.provenance = j.at("provenance").get<std::string>();
        q.tol = j.at("tol").get<double>();
        q.iterations = j.at("iterations").get<int>();
        q.final_change = j.at("final_change").get<double>();
        q.residual = j.at("residual").get<double>();

        const std::size_t dims = q.state_box.size() + q.action_box.size();
        if (q.grid_per_dim.size() != dims || q.axes.size() != dims)
            throw input_error("oracle file: inconsistent dimension counts");
        Eigen::Index total = 1;
        for (std::size_t d = 0; d < dims; ++d) {
            if (q.grid_per_dim[d] < 2 ||
                q.axes[d].size() != static_cast<std::size_t>(q.grid_per_dim[d]))
                throw input_error("oracle file: axis length mismatch");
            total *= q.grid_per_dim[d];
        }
        if (q.values.size() != total) throw input_error("oracle file: value count mismatch");
        return q;
    } catch (const nlohmann::json::exception& e) {
        throw input_error("oracle file field failure: " + std::string(e.what()));
    }
}

} // namespace ope
