#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "ope/config.hpp"
#include "ope/npiv.hpp"
#include "ope/recipes.hpp"

namespace ope {

struct LadderPoint {
    Eigen::Index n_traj = 0;
    Eigen::Index horizon = 0;
    Eigen::Index nt() const { return n_traj * horizon; }
};

// Full description of a convergence-rate experiment: which recipe, which
// bases, the sample-size ladder, how J scales, and what to measure.
struct StudyConfig {
    std::string recipe_id = "benchmark-2d";
    double gamma = 0.9;
    double noise_sd = 0.25;
    BasisFamily psi_family = BasisFamily::Cosine;
    BasisFamily b_family = BasisFamily::Cosine;
    int bspline_degree = 3;
    std::vector<LadderPoint> ladder; // strictly increasing in N*T
    std::string j_rule = "l2";       // "l2" or "sup"
    double j_multiplier = 1.0;
    double smoothness = 2.0; // design smoothness p driving the J exponent
    int replications = 10;
    std::vector<MultiIndex> deriv_orders;
    std::uint64_t seed = 0;
    int burn_in = 200;
    int instrument_extra = 0; // instrument per-dim count above psi's
    int grid_per_dim = 201;   // sup-error measurement grid
    std::string out_csv;      // empty = do not write
    std::string out_json;
};

// Reads the flat key=value study format; unknown keys are hard errors.
StudyConfig study_config_from_map(ConfigMap& cfg);
StudyConfig study_config_from_file(const std::string& path);
void validate_study_config(const StudyConfig& cfg);

struct RepResult {
    int ladder_idx = 0;
    int rep_idx = 0;
    Eigen::Index n_traj = 0;
    Eigen::Index horizon = 0;
    Eigen::Index j_used = 0;
    double sup_err = std::numeric_limits<double>::quiet_NaN();
    double l2_err = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> deriv_sup_err; // aligned with cfg.deriv_orders
    std::vector<double> deriv_l2_err;
    double bellman_sup = std::numeric_limits<double>::quiet_NaN();
    double bellman_l2 = std::numeric_limits<double>::quiet_NaN();
    double value_err = std::numeric_limits<double>::quiet_NaN();
    double wall_seconds = 0.0; // reported in JSON only, never in the CSV
    bool failed = false;
    std::string error_msg;
};

struct SlopeFit {
    double slope = 0.0;
    double se = 0.0;
    int points = 0;
    bool valid = false;
};

struct RateStudyResult {
    StudyConfig cfg;
    std::vector<RepResult> reps; // (ladder index, replication index) order
    // per-ladder means over successful replications
    std::vector<double> mean_l2;
    std::vector<double> mean_sup;
    std::vector<std::vector<double>> mean_deriv_sup; // [alpha][ladder]
    std::vector<std::vector<double>> mean_deriv_l2;
    SlopeFit slope_l2;
    SlopeFit slope_sup;
    std::vector<SlopeFit> slope_deriv_sup;
    std::vector<SlopeFit> slope_deriv_l2;
    int failures = 0;
    bool study_failed = false; // more than 20% of replications aborted
    int l2_inversions = 0;     // ladder steps where the mean L2 error rose
};

// Simulate, choose J, fit, and score every (ladder, replication) cell.
// Deterministic given the config: the cell seed is derived from
// (cfg.seed, ladder*1000 + replication). A failed cell is recorded and the
// study continues. Writes cfg.out_csv / cfg.out_json when set.
RateStudyResult run_study(const StudyConfig& cfg);

// OLS of log(err) on log(x): needs >= 4 points with positive x and err.
SlopeFit fit_loglog_slope(const std::vector<std::pair<double, double>>& points);

// x the slope is fitted against: NT for the l2 rule, NT/log(NT) for sup.
double ladder_x(const StudyConfig& cfg, const LadderPoint& pt);

std::string study_csv(const RateStudyResult& result);
void write_study_csv(const RateStudyResult& result, const std::string& path);
std::string study_to_json(const RateStudyResult& result);
void write_study_json(const RateStudyResult& result, const std::string& path);

// Tabulated-Q file round trip used by the oracle subcommand.
void write_oracle_json(const OracleQ& q, const std::string& path);
OracleQ read_oracle_json(const std::string& path);

} // namespace ope
