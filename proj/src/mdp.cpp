#include "ope/mdp.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ope {

namespace {

// All file writers go through a temp file plus rename so readers never see a
// half-written result.
void atomic_rename(const std::string& tmp, const std::string& path) {
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        throw input_error("could not move temporary file onto " + path);
    }
}

std::string fmt_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

std::vector<double> linspace(const Interval& iv, int n) {
    std::vector<double> xs(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        xs[static_cast<size_t>(i)] = iv.lo + iv.width() * i / (n - 1.0);
    xs.front() = iv.lo;
    xs.back() = iv.hi;
    return xs;
}

} // namespace

void check_policy_normalization(const PolicyDensity& policy, const Matrix& probe_states,
                                const QuadratureRule& rule, double tol) {
    if (policy.point_mass()) return;
    if (rule.dims() != policy.action_dims())
        throw input_error("policy normalization: rule/action dimension mismatch");
    std::vector<Vector> nodes(static_cast<size_t>(rule.size()));
    for (Eigen::Index l = 0; l < rule.size(); ++l) nodes[static_cast<size_t>(l)] = rule.nodes.row(l);
    for (Eigen::Index i = 0; i < probe_states.rows(); ++i) {
        const Vector s = probe_states.row(i);
        double mass = 0.0;
        for (Eigen::Index l = 0; l < rule.size(); ++l) {
            const double d = policy.density(s, nodes[static_cast<size_t>(l)]);
            if (d < 0.0) throw input_error("policy normalization: negative density");
            mass += rule.weights(l) * d;
        }
        if (std::abs(mass - 1.0) > tol)
            throw input_error("policy density integrates to " + std::to_string(mass) +
                              " at probe state " + std::to_string(i) + ", expected 1 within " +
                              std::to_string(tol));
    }
}

TransitionKernel truncated_normal_transition(
    Box state_box, std::function<Vector(const Vector&, const Vector&)> mean_fn, double sd) {
    TransitionKernel k;
    k.state_box = std::move(state_box);
    auto box = k.state_box;
    k.density = [box, mean_fn, sd](const Vector& s, const Vector& a, const Vector& sp) {
        const Vector m = mean_fn(s, a);
        double d = 1.0;
        for (Eigen::Index i = 0; i < sp.size(); ++i) {
            const auto& iv = box[static_cast<size_t>(i)];
            d *= TruncatedNormal{m(i), sd, iv.lo, iv.hi}.density(sp(i));
        }
        return d;
    };
    k.sampler = [box, mean_fn, sd](const Vector& s, const Vector& a, SeededStream& rng) {
        const Vector m = mean_fn(s, a);
        Vector sp(static_cast<Eigen::Index>(box.size()));
        for (size_t i = 0; i < box.size(); ++i)
            sp(static_cast<Eigen::Index>(i)) =
                TruncatedNormal{m(static_cast<Eigen::Index>(i)), sd, box[i].lo, box[i].hi}.sample(rng);
        return sp;
    };
    return k;
}

void validate_mdp(const MdpSpec& mdp, int probe_per_dim, int action_nodes) {
    if (!(mdp.gamma >= 0.0 && mdp.gamma < 1.0))
        throw input_error("mdp: discount must lie in [0, 1)");
    if (mdp.state_box.empty() || mdp.action_box.empty())
        throw input_error("mdp: empty state or action box");

    const auto probe_rule = tensor_gauss_rule(mdp.state_box, probe_per_dim);
    const auto action_rule = tensor_gauss_rule(mdp.action_box, action_nodes);
    check_policy_normalization(mdp.target, probe_rule.nodes, action_rule);
    check_policy_normalization(mdp.behavior, probe_rule.nodes, action_rule);

    // Reward bound scan over a coarse tensor grid of (s, a, s').
    const auto a_probe = tensor_gauss_rule(mdp.action_box, probe_per_dim);
    double worst = 0.0;
    for (Eigen::Index i = 0; i < probe_rule.size(); ++i) {
        const Vector s = probe_rule.nodes.row(i);
        for (Eigen::Index j = 0; j < a_probe.size(); ++j) {
            const Vector a = a_probe.nodes.row(j);
            for (Eigen::Index k = 0; k < probe_rule.size(); ++k) {
                const Vector sp = probe_rule.nodes.row(k);
                const double r = mdp.reward_fn(s, a, sp);
                if (!std::isfinite(r)) throw input_error("mdp: reward is not finite");
                worst = std::max(worst, std::abs(r));
            }
        }
    }
    if (worst + 4.0 * mdp.noise_sd > mdp.r_max + 1e-9)
        throw input_error("mdp: rewards reach " + std::to_string(worst + 4.0 * mdp.noise_sd) +
                          ", above the declared bound " + std::to_string(mdp.r_max));
}

Dataset sample_trajectories(const MdpSpec& mdp, const PolicyDensity& behavior,
                            Eigen::Index n_traj, Eigen::Index horizon, int burn_in,
                            std::uint64_t seed) {
    if (n_traj < 1 || horizon < 1) throw input_error("sample_trajectories: need N >= 1, T >= 1");
    if (burn_in < 0) throw input_error("sample_trajectories: negative burn-in");

    const int ds = mdp.state_dims();
    const int da = mdp.action_dims();
    Dataset out;
    out.state_dims = ds;
    out.action_dims = da;
    out.n_traj = n_traj;
    out.horizon = horizon;
    out.seed = seed;
    out.burn_in = burn_in;
    const Eigen::Index nt = n_traj * horizon;
    out.s.resize(nt, ds);
    out.a.resize(nt, da);
    out.r.resize(nt);
    out.sp.resize(nt, ds);

    for (Eigen::Index i = 0; i < n_traj; ++i) {
        SeededStream rng(seed, static_cast<std::uint64_t>(i) + 1);
        Vector s(ds);
        for (int k = 0; k < ds; ++k) {
            const auto& iv = mdp.state_box[static_cast<size_t>(k)];
            s(k) = rng.uniform(iv.lo, iv.hi);
        }
        for (int b = 0; b < burn_in; ++b) {
            const Vector a = behavior.sampler(s, rng);
            s = mdp.transition.sampler(s, a, rng);
            if (!box_contains(mdp.state_box, s))
                throw generation_error("trajectory " + std::to_string(i) +
                                       " left the state box during burn-in step " +
                                       std::to_string(b));
        }
        for (Eigen::Index t = 0; t < horizon; ++t) {
            const Vector a = behavior.sampler(s, rng);
            const Vector sp = mdp.transition.sampler(s, a, rng);
            if (!box_contains(mdp.state_box, sp))
                throw generation_error("trajectory " + std::to_string(i) +
                                       " left the state box at step " + std::to_string(t));
            double reward = mdp.reward_fn(s, a, sp);
            if (mdp.noise_sd > 0.0) reward += mdp.noise_sd * rng.clipped_normal(4.0);
            const Eigen::Index row = i * horizon + t;
            out.s.row(row) = s;
            out.a.row(row) = a;
            out.r(row) = reward;
            out.sp.row(row) = sp;
            s = sp;
        }
    }
    return out;
}

void check_chain_consistency(const Dataset& data) {
    for (Eigen::Index i = 0; i < data.n_traj; ++i) {
        for (Eigen::Index t = 0; t + 1 < data.horizon; ++t) {
            const Eigen::Index row = i * data.horizon + t;
            if ((data.sp.row(row) - data.s.row(row + 1)).cwiseAbs().maxCoeff() != 0.0)
                throw input_error("dataset: next-state mismatch in trajectory " +
                                  std::to_string(i) + " at step " + std::to_string(t));
        }
    }
}

void write_dataset_csv(const Dataset& data, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp);
        if (!f) throw input_error("cannot open " + tmp + " for writing");
        f << "traj,t";
        for (int k = 1; k <= data.state_dims; ++k) f << ",s_" << k;
        for (int k = 1; k <= data.action_dims; ++k) f << ",a_" << k;
        f << ",r";
        for (int k = 1; k <= data.state_dims; ++k) f << ",sp_" << k;
        f << "\n";
        for (Eigen::Index i = 0; i < data.n_traj; ++i) {
            for (Eigen::Index t = 0; t < data.horizon; ++t) {
                const Eigen::Index row = i * data.horizon + t;
                f << i << "," << t;
                for (int k = 0; k < data.state_dims; ++k) f << "," << fmt_double(data.s(row, k));
                for (int k = 0; k < data.action_dims; ++k) f << "," << fmt_double(data.a(row, k));
                f << "," << fmt_double(data.r(row));
                for (int k = 0; k < data.state_dims; ++k) f << "," << fmt_double(data.sp(row, k));
                f << "\n";
            }
        }
        if (!f.good()) throw input_error("write failure on " + tmp);
    }
    atomic_rename(tmp, path);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

double parse_double_strict(const std::string& tok, const std::string& what) {
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0')
        throw input_error("dataset csv: malformed " + what + " value '" + tok + "'");
    return v;
}

} // namespace

Dataset read_dataset_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw input_error("cannot open " + path);
    std::string line;
    if (!std::getline(f, line)) throw input_error("dataset csv: empty file " + path);
    const auto header = split_csv_line(line);
    if (header.size() < 5 || header[0] != "traj" || header[1] != "t")
        throw input_error("dataset csv: unexpected header in " + path);
    int ds = 0, da = 0;
    size_t pos = 2;
    while (pos < header.size() && header[pos] == "s_" + std::to_string(ds + 1)) {
        ++ds;
        ++pos;
    }
    while (pos < header.size() && header[pos] == "a_" + std::to_string(da + 1)) {
        ++da;
        ++pos;
    }
    if (ds == 0 || da == 0 || pos >= header.size() || header[pos] != "r")
        throw input_error("dataset csv: unexpected header in " + path);
    ++pos;
    for (int k = 1; k <= ds; ++k, ++pos)
        if (pos >= header.size() || header[pos] != "sp_" + std::to_string(k))
            throw input_error("dataset csv: unexpected header in " + path);
    if (pos != header.size()) throw input_error("dataset csv: trailing header columns in " + path);

    std::vector<std::array<double, 2>> ids;
    std::vector<double> nums;
    const size_t row_len = header.size();
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto toks = split_csv_line(line);
        if (toks.size() != row_len)
            throw input_error("dataset csv: row with " + std::to_string(toks.size()) +
                              " fields, expected " + std::to_string(row_len));
        ids.push_back({parse_double_strict(toks[0], "traj"), parse_double_strict(toks[1], "t")});
        for (size_t k = 2; k < toks.size(); ++k)
            nums.push_back(parse_double_strict(toks[k], header[k]));
    }
    const Eigen::Index nt = static_cast<Eigen::Index>(ids.size());
    if (nt == 0) throw input_error("dataset csv: no data rows in " + path);
    Eigen::Index n_traj = 0, horizon = 0;
    for (const auto& id : ids) {
        n_traj = std::max(n_traj, static_cast<Eigen::Index>(id[0]) + 1);
        horizon = std::max(horizon, static_cast<Eigen::Index>(id[1]) + 1);
    }
    if (n_traj * horizon != nt)
        throw input_error("dataset csv: rows do not form a complete N x T panel");

    Dataset out;
    out.state_dims = ds;
    out.action_dims = da;
    out.n_traj = n_traj;
    out.horizon = horizon;
    out.s.resize(nt, ds);
    out.a.resize(nt, da);
    out.r.resize(nt);
    out.sp.resize(nt, ds);
    const size_t vals_per_row = static_cast<size_t>(2 * ds + da + 1);
    for (Eigen::Index r = 0; r < nt; ++r) {
        const Eigen::Index want =
            static_cast<Eigen::Index>(ids[static_cast<size_t>(r)][0]) * horizon +
            static_cast<Eigen::Index>(ids[static_cast<size_t>(r)][1]);
        if (want != r)
            throw input_error("dataset csv: rows are not (traj, t)-lexicographic");
        const double* v = nums.data() + static_cast<size_t>(r) * vals_per_row;
        for (int k = 0; k < ds; ++k) out.s(r, k) = v[k];
        for (int k = 0; k < da; ++k) out.a(r, k) = v[ds + k];
        out.r(r) = v[ds + da];
        for (int k = 0; k < ds; ++k) out.sp(r, k) = v[ds + da + 1 + k];
    }
    return out;
}

namespace {
constexpr char kBinMagic[8] = {'O', 'P', 'E', 'D', 'S', '0', '0', '1'};
}

void write_dataset_binary(const Dataset& data, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw input_error("cannot open " + tmp + " for writing");
        f.write(kBinMagic, 8);
        const std::int32_t ds = data.state_dims, da = data.action_dims, burn = data.burn_in;
        const std::int64_t n = data.n_traj, t = data.horizon;
        const std::uint64_t seed = data.seed;
        f.write(reinterpret_cast<const char*>(&ds), 4);
        f.write(reinterpret_cast<const char*>(&da), 4);
        f.write(reinterpret_cast<const char*>(&n), 8);
        f.write(reinterpret_cast<const char*>(&t), 8);
        f.write(reinterpret_cast<const char*>(&seed), 8);
        f.write(reinterpret_cast<const char*>(&burn), 4);
        std::vector<double> row(static_cast<size_t>(2 * ds + da + 1));
        for (Eigen::Index r = 0; r < data.rows(); ++r) {
            size_t j = 0;
            for (int k = 0; k < ds; ++k) row[j++] = data.s(r, k);
            for (int k = 0; k < da; ++k) row[j++] = data.a(r, k);
            row[j++] = data.r(r);
            for (int k = 0; k < ds; ++k) row[j++] = data.sp(r, k);
            f.write(reinterpret_cast<const char*>(row.data()),
                    static_cast<std::streamsize>(row.size() * sizeof(double)));
        }
        if (!f.good()) throw input_error("write failure on " + tmp);
    }
    atomic_rename(tmp, path);
}

Dataset read_dataset_binary(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw input_error("cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f.good() || std::memcmp(magic, kBinMagic, 8) != 0)
        throw input_error("dataset binary: bad magic in " + path);
    std::int32_t ds = 0, da = 0, burn = 0;
    std::int64_t n = 0, t = 0;
    std::uint64_t seed = 0;
    f.read(reinterpret_cast<char*>(&ds), 4);
    f.read(reinterpret_cast<char*>(&da), 4);
    f.read(reinterpret_cast<char*>(&n), 8);
    f.read(reinterpret_cast<char*>(&t), 8);
    f.read(reinterpret_cast<char*>(&seed), 8);
    f.read(reinterpret_cast<char*>(&burn), 4);
    if (!f.good() || ds < 1 || da < 1 || n < 1 || t < 1)
        throw input_error("dataset binary: corrupt header in " + path);
    Dataset out;
    out.state_dims = ds;
    out.action_dims = da;
    out.n_traj = n;
    out.horizon = t;
    out.seed = seed;
    out.burn_in = burn;
    const Eigen::Index nt = static_cast<Eigen::Index>(n) * static_cast<Eigen::Index>(t);
    out.s.resize(nt, ds);
    out.a.resize(nt, da);
    out.r.resize(nt);
    out.sp.resize(nt, ds);
    std::vector<double> row(static_cast<size_t>(2 * ds + da + 1));
    for (Eigen::Index r = 0; r < nt; ++r) {
        f.read(reinterpret_cast<char*>(row.data()),
               static_cast<std::streamsize>(row.size() * sizeof(double)));
        if (!f.good()) throw input_error("dataset binary: truncated file " + path);
        size_t j = 0;
        for (int k = 0; k < ds; ++k) out.s(r, k) = row[j++];
        for (int k = 0; k < da; ++k) out.a(r, k) = row[j++];
        out.r(r) = row[j++];
        for (int k = 0; k < ds; ++k) out.sp(r, k) = row[j++];
    }
    return out;
}

double OracleQ::operator()(const Vector& s, const Vector& a) const {
    const int ds = static_cast<int>(state_box.size());
    const int d = ds + static_cast<int>(action_box.size());
    if (s.size() != ds || a.size() + s.size() != d)
        throw input_error("oracle q: point dimension mismatch");
    if (d > 8) throw capability_error("oracle q: supports at most 8 total dimensions");

    // Per-dimension cell index and interpolation fraction.
    int idx[8];
    double frac[8];
    for (int k = 0; k < d; ++k) {
        const double x = k < ds ? s(k) : a(k - ds);
        const auto& ax = axes[static_cast<size_t>(k)];
        const int n = static_cast<int>(ax.size());
        const double lo = ax.front(), hi = ax.back();
        if (x < lo - 1e-12 || x > hi + 1e-12)
            throw input_error("oracle q: point outside the tabulated box in dimension " +
                              std::to_string(k));
        double u = (x - lo) / (hi - lo) * (n - 1);
        int i = static_cast<int>(std::floor(u));
        i = std::min(std::max(i, 0), n - 2);
        idx[k] = i;
        frac[k] = std::min(std::max(u - i, 0.0), 1.0);
    }

    // Strides for the lexicographic layout (last dimension fastest).
    Eigen::Index stride[8];
    stride[d - 1] = 1;
    for (int k = d - 2; k >= 0; --k)
        stride[k] = stride[k + 1] * grid_per_dim[static_cast<size_t>(k + 1)];

    double acc = 0.0;
    for (int corner = 0; corner < (1 << d); ++corner) {
        double w = 1.0;
        Eigen::Index flat = 0;
        for (int k = 0; k < d; ++k) {
            const bool hi_side = corner & (1 << k);
            w *= hi_side ? frac[k] : 1.0 - frac[k];
            flat += stride[k] * (idx[k] + (hi_side ? 1 : 0));
        }
        acc += w * values(flat);
    }
    return acc;
}

namespace {

struct TensorGrid {
    std::vector<std::vector<double>> axes;
    std::vector<int> per_dim;
    Eigen::Index total = 1;

    Vector point(Eigen::Index flat) const {
        const int d = static_cast<int>(per_dim.size());
        Vector x(d);
        for (int k = d - 1; k >= 0; --k) {
            const int n = per_dim[static_cast<size_t>(k)];
            x(k) = axes[static_cast<size_t>(k)][static_cast<size_t>(flat % n)];
            flat /= n;
        }
        return x;
    }
};

TensorGrid make_grid(const Box& state_box, const Box& action_box, int grid_per_dim) {
    if (grid_per_dim < 2) throw input_error("tensor grid needs at least 2 nodes per dimension");
    if (state_box.size() + action_box.size() > 8)
        throw capability_error("tensor grid supports at most 8 total dimensions");
    TensorGrid g;
    for (const auto& iv : state_box) {
        g.axes.push_back(linspace(iv, grid_per_dim));
        g.per_dim.push_back(grid_per_dim);
        g.total *= grid_per_dim;
    }
    for (const auto& iv : action_box) {
        g.axes.push_back(linspace(iv, grid_per_dim));
        g.per_dim.push_back(grid_per_dim);
        g.total *= grid_per_dim;
    }
    return g;
}

// Multilinear interpolation weights of a point on a tensor grid, returned as
// (flat index, weight) pairs over the 2^d surrounding corners.
void interp_stencil(const TensorGrid& g, const Vector& x,
                    std::vector<std::pair<Eigen::Index, double>>& out) {
    const int d = static_cast<int>(g.per_dim.size());
    int idx[8];
    double frac[8];
    for (int k = 0; k < d; ++k) {
        const auto& ax = g.axes[static_cast<size_t>(k)];
        const int n = static_cast<int>(ax.size());
        double u = (x(k) - ax.front()) / (ax.back() - ax.front()) * (n - 1);
        int i = static_cast<int>(std::floor(u));
        i = std::min(std::max(i, 0), n - 2);
        idx[k] = i;
        frac[k] = std::min(std::max(u - i, 0.0), 1.0);
    }
    Eigen::Index stride[8];
    stride[d - 1] = 1;
    for (int k = d - 2; k >= 0; --k)
        stride[k] = stride[k + 1] * g.per_dim[static_cast<size_t>(k + 1)];
    out.clear();
    for (int corner = 0; corner < (1 << d); ++corner) {
        double w = 1.0;
        Eigen::Index flat = 0;
        for (int k = 0; k < d; ++k) {
            const bool hi_side = corner & (1 << k);
            w *= hi_side ? frac[k] : 1.0 - frac[k];
            flat += stride[k] * (idx[k] + (hi_side ? 1 : 0));
        }
        if (w != 0.0) out.emplace_back(flat, w);
    }
}

} // namespace

OracleQ tabulate_q(const Box& state_box, const Box& action_box,
                   const std::function<double(const Vector&, const Vector&)>& q,
                   int grid_per_dim) {
    const TensorGrid g = make_grid(state_box, action_box, grid_per_dim);
    OracleQ out;
    out.state_box = state_box;
    out.action_box = action_box;
    out.grid_per_dim = g.per_dim;
    out.axes = g.axes;
    out.values.resize(g.total);
    out.provenance = "designed";
    const int ds = static_cast<int>(state_box.size());
    for (Eigen::Index i = 0; i < g.total; ++i) {
        const Vector x = g.point(i);
        out.values(i) = q(x.head(ds), x.tail(x.size() - ds));
    }
    return out;
}

OracleQ fixed_point_oracle(const MdpSpec& mdp, const PolicyDensity& target, int grid_per_dim,
                           const QuadratureRule& state_rule, double tol, int max_iter,
                           int action_nodes) {
    if (tol <= 0.0) throw input_error("fixed_point_oracle: tolerance must be positive");
    if (state_rule.dims() != mdp.state_dims())
        throw input_error("fixed_point_oracle: state rule dimension mismatch");
    const TensorGrid g = make_grid(mdp.state_box, mdp.action_box, grid_per_dim);
    const int ds = mdp.state_dims();
    const Eigen::Index n_nodes = g.total;
    const Eigen::Index ks = state_rule.size();

    OracleQ out;
    out.state_box = mdp.state_box;
    out.action_box = mdp.action_box;
    out.grid_per_dim = g.per_dim;
    out.axes = g.axes;
    out.provenance = "fixed-point";
    out.tol = tol;

    // Next-state quadrature nodes, shared by every (s,a) grid node.
    std::vector<Vector> sigma(static_cast<size_t>(ks));
    for (Eigen::Index k = 0; k < ks; ++k) sigma[static_cast<size_t>(k)] = state_rule.nodes.row(k);

    // D(r,k) = w_k q(sigma_k | s_r, a_r); rbar(r) = sum_k D(r,k) R(s_r,a_r,sigma_k).
    Matrix d_mat(n_nodes, ks);
    Vector rbar = Vector::Zero(n_nodes);
    for (Eigen::Index r = 0; r < n_nodes; ++r) {
        const Vector x = g.point(r);
        const Vector s = x.head(ds);
        const Vector a = x.tail(x.size() - ds);
        for (Eigen::Index k = 0; k < ks; ++k) {
            const Vector& sp = sigma[static_cast<size_t>(k)];
            const double w = state_rule.weights(k) * mdp.transition.density(s, a, sp);
            d_mat(r, k) = w;
            if (w != 0.0) rbar(r) += w * mdp.reward_fn(s, a, sp);
        }
    }

    if (mdp.gamma == 0.0) {
        out.values = rbar;
        out.iterations = 1;
        out.final_change = 0.0;
        out.residual = 0.0;
        return out;
    }

    // Policy-averaging stencil: g_k = integral pi(a'|sigma_k) Q(sigma_k, a') da',
    // expressed as a sparse map from grid values via interpolation weights.
    std::vector<std::vector<std::pair<Eigen::Index, double>>> stencil(static_cast<size_t>(ks));
    std::vector<std::pair<Eigen::Index, double>> tmp;
    if (target.point_mass()) {
        for (Eigen::Index k = 0; k < ks; ++k) {
            const Vector& sp = sigma[static_cast<size_t>(k)];
            Vector x(g.per_dim.size());
            x.head(ds) = sp;
            x.tail(x.size() - ds) = target.point_location(sp);
            interp_stencil(g, x, tmp);
            stencil[static_cast<size_t>(k)] = tmp;
        }
    } else {
        const auto action_rule = tensor_gauss_rule(mdp.action_box, action_nodes);
        std::vector<Vector> a_nodes(static_cast<size_t>(action_rule.size()));
        for (Eigen::Index l = 0; l < action_rule.size(); ++l)
            a_nodes[static_cast<size_t>(l)] = action_rule.nodes.row(l);
        for (Eigen::Index k = 0; k < ks; ++k) {
            const Vector& sp = sigma[static_cast<size_t>(k)];
            auto& row = stencil[static_cast<size_t>(k)];
            for (Eigen::Index l = 0; l < action_rule.size(); ++l) {
                const double dens = target.density(sp, a_nodes[static_cast<size_t>(l)]);
                if (dens < 0.0) throw input_error("fixed_point_oracle: negative policy density");
                if (dens == 0.0) continue;
                const double w = action_rule.weights(l) * dens;
                Vector x(g.per_dim.size());
                x.head(ds) = sp;
                x.tail(x.size() - ds) = a_nodes[static_cast<size_t>(l)];
                interp_stencil(g, x, tmp);
                for (const auto& [flat, iw] : tmp) row.emplace_back(flat, w * iw);
            }
        }
    }

    Vector q = Vector::Zero(n_nodes);
    Vector gvec(ks);
    Vector q_new(n_nodes);
    double change = 0.0;
    for (int it = 1; it <= max_iter; ++it) {
        for (Eigen::Index k = 0; k < ks; ++k) {
            double acc = 0.0;
            for (const auto& [flat, w] : stencil[static_cast<size_t>(k)]) acc += w * q(flat);
            gvec(k) = acc;
        }
        q_new = rbar + mdp.gamma * (d_mat * gvec);
        change = (q_new - q).cwiseAbs().maxCoeff();
        q.swap(q_new);
        if (change <= tol * (1.0 - mdp.gamma)) {
            out.values = q;
            out.iterations = it;
            out.final_change = change;
            out.residual = mdp.gamma * change / (1.0 - mdp.gamma);
            return out;
        }
    }
    throw convergence_error("fixed_point_oracle: no convergence after " +
                                std::to_string(max_iter) + " iterations; last change " +
                                std::to_string(change),
                            change);
}

DesignedMdp designed_q_mdp(std::function<double(const Vector&, const Vector&)> q_star,
                           TransitionKernel base_transition, Box action_box,
                           PolicyDensity target, PolicyDensity behavior, double gamma,
                           double noise_sd, int action_nodes) {
    if (!(gamma >= 0.0 && gamma < 1.0)) throw input_error("designed_q_mdp: discount in [0,1)");
    if (noise_sd < 0.0) throw input_error("designed_q_mdp: negative noise level");

    const Box state_box = base_transition.state_box;

    // Bound scan; also rejects an unusable ground truth up front.
    double q_bound = 0.0;
    {
        const auto sg = tensor_gauss_rule(state_box, 21);
        const auto ag = tensor_gauss_rule(action_box, 21);
        for (Eigen::Index i = 0; i < sg.size(); ++i) {
            const Vector s = sg.nodes.row(i);
            for (Eigen::Index j = 0; j < ag.size(); ++j) {
                const double v = q_star(s, ag.nodes.row(j));
                if (!std::isfinite(v) || std::abs(v) > 1e6)
                    throw input_error("designed_q_mdp: ground-truth Q is unbounded on the box");
                q_bound = std::max(q_bound, std::abs(v));
            }
        }
    }

    // The reward is built so the evaluation operator's fixed point is q_star:
    // R(s,a,s') = Q*(s,a) - gamma * integral pi(a'|s') Q*(s',a') da'.
    std::function<double(const Vector&)> pi_avg;
    if (target.point_mass()) {
        auto loc = target.point_location;
        auto qs = q_star;
        pi_avg = [loc, qs](const Vector& sp) { return qs(sp, loc(sp)); };
    } else {
        const auto rule = tensor_gauss_rule(action_box, action_nodes);
        std::vector<Vector> a_nodes(static_cast<size_t>(rule.size()));
        for (Eigen::Index l = 0; l < rule.size(); ++l)
            a_nodes[static_cast<size_t>(l)] = rule.nodes.row(l);
        Vector w = rule.weights;
        auto dens = target.density;
        auto qs = q_star;
        pi_avg = [a_nodes, w, dens, qs](const Vector& sp) {
            double acc = 0.0;
            for (size_t l = 0; l < a_nodes.size(); ++l) {
                const double p = dens(sp, a_nodes[l]);
                if (p != 0.0) acc += w(static_cast<Eigen::Index>(l)) * p * qs(sp, a_nodes[l]);
            }
            return acc;
        };
    }

    DesignedMdp out;
    out.q_star = q_star;
    out.mdp.state_box = state_box;
    out.mdp.action_box = std::move(action_box);
    out.mdp.transition = std::move(base_transition);
    out.mdp.gamma = gamma;
    out.mdp.noise_sd = noise_sd;
    out.mdp.r_max = (1.0 + gamma) * q_bound + 4.0 * noise_sd + 1e-9;
    out.mdp.target = std::move(target);
    out.mdp.behavior = std::move(behavior);
    auto qs = q_star;
    out.mdp.reward_fn = [qs, gamma, pi_avg](const Vector& s, const Vector& a, const Vector& sp) {
        return qs(s, a) - gamma * pi_avg(sp);
    };
    return out;
}

Vector apply_T(const MdpSpec& mdp,
               const std::function<double(const Vector&, const Vector&, const Vector&)>& f,
               const Matrix& sa_points, const QuadratureRule& state_rule) {
    const int ds = mdp.state_dims();
    const int da = mdp.action_dims();
    if (sa_points.cols() != ds + da) throw input_error("apply_T: point dimension mismatch");
    if (state_rule.dims() != ds) throw input_error("apply_T: rule dimension mismatch");
    std::vector<Vector> sigma(static_cast<size_t>(state_rule.size()));
    for (Eigen::Index k = 0; k < state_rule.size(); ++k)
        sigma[static_cast<size_t>(k)] = state_rule.nodes.row(k);

    Vector out(sa_points.rows());
    for (Eigen::Index i = 0; i < sa_points.rows(); ++i) {
        const Vector s = sa_points.row(i).head(ds);
        const Vector a = sa_points.row(i).tail(da);
        double acc = 0.0;
        for (Eigen::Index k = 0; k < state_rule.size(); ++k) {
            const Vector& sp = sigma[static_cast<size_t>(k)];
            const double w = state_rule.weights(k) * mdp.transition.density(s, a, sp);
            if (w != 0.0) acc += w * f(s, a, sp);
        }
        out(i) = acc;
    }
    return out;
}

double oracle_value(const OracleQ& q, const PolicyDensity& target, const InitialDist& init,
                    const QuadratureRule& state_rule, const QuadratureRule& action_rule) {
    auto value_at_state = [&](const Vector& s) {
        if (target.point_mass()) return q(s, target.point_location(s));
        double acc = 0.0;
        for (Eigen::Index l = 0; l < action_rule.size(); ++l) {
            const Vector a = action_rule.nodes.row(l);
            const double p = target.density(s, a);
            if (p < 0.0) throw input_error("oracle_value: negative policy density");
            if (p != 0.0) acc += action_rule.weights(l) * p * q(s, a);
        }
        return acc;
    };
    if (init.point) return value_at_state(init.location);
    if (!init.density) throw input_error("oracle_value: initial distribution missing a density");
    double acc = 0.0;
    for (Eigen::Index i = 0; i < state_rule.size(); ++i) {
        const Vector s = state_rule.nodes.row(i);
        const double p = init.density(s);
        if (p < 0.0) throw input_error("oracle_value: negative initial density");
        if (p != 0.0) acc += state_rule.weights(i) * p * value_at_state(s);
    }
    return acc;
}

StationaryDensity estimate_stationary(const MdpSpec& mdp, const PolicyDensity& behavior,
                                      int state_nodes, int action_nodes, double tol,
                                      int max_iter) {
    StationaryDensity out;
    out.state_rule = tensor_gauss_rule(mdp.state_box, state_nodes);
    const auto action_rule = tensor_gauss_rule(mdp.action_box, action_nodes);
    const Eigen::Index ns = out.state_rule.size();
    const Eigen::Index na = action_rule.size();

    std::vector<Vector> s_nodes(static_cast<size_t>(ns));
    for (Eigen::Index j = 0; j < ns; ++j) s_nodes[static_cast<size_t>(j)] = out.state_rule.nodes.row(j);
    std::vector<Vector> a_nodes(static_cast<size_t>(na));
    for (Eigen::Index l = 0; l < na; ++l) a_nodes[static_cast<size_t>(l)] = action_rule.nodes.row(l);

    // kw(i,j) = w_j * sum_l v_l pi_b(a_l | s_j) q(s_i | s_j, a_l)
    Matrix kw(ns, ns);
    for (Eigen::Index j = 0; j < ns; ++j) {
        const Vector& sj = s_nodes[static_cast<size_t>(j)];
        std::vector<double> pb(static_cast<size_t>(na));
        for (Eigen::Index l = 0; l < na; ++l) {
            pb[static_cast<size_t>(l)] =
                action_rule.weights(l) * behavior.density(sj, a_nodes[static_cast<size_t>(l)]);
            if (pb[static_cast<size_t>(l)] < 0.0)
                throw input_error("estimate_stationary: negative behavior density");
        }
        for (Eigen::Index i = 0; i < ns; ++i) {
            double acc = 0.0;
            for (Eigen::Index l = 0; l < na; ++l) {
                const double c = pb[static_cast<size_t>(l)];
                if (c != 0.0)
                    acc += c * mdp.transition.density(sj, a_nodes[static_cast<size_t>(l)],
                                                      s_nodes[static_cast<size_t>(i)]);
            }
            kw(i, j) = out.state_rule.weights(j) * acc;
        }
    }

    Vector f = Vector::Constant(ns, 1.0 / box_volume(mdp.state_box));
    double change = 0.0;
    int it = 1;
    for (; it <= max_iter; ++it) {
        Vector fn = kw * f;
        const double mass = out.state_rule.weights.dot(fn);
        if (!(mass > 0.0)) throw convergence_error("estimate_stationary: mass collapsed", 0.0);
        fn /= mass;
        change = (fn - f).cwiseAbs().maxCoeff();
        f = fn;
        if (change <= tol) break;
    }
    if (change > tol)
        throw convergence_error("estimate_stationary: no convergence after " +
                                    std::to_string(max_iter) + " iterations",
                                change);
    out.f = f;
    out.iterations = it;
    out.final_change = change;

    // Evaluable refresh: one kernel application against the converged node
    // values. Coefficients c_m and source points (s_j, a_l) are flattened.
    std::vector<double> coef;
    std::vector<Vector> src_s, src_a;
    coef.reserve(static_cast<size_t>(ns * na));
    for (Eigen::Index j = 0; j < ns; ++j) {
        const Vector& sj = s_nodes[static_cast<size_t>(j)];
        for (Eigen::Index l = 0; l < na; ++l) {
            const Vector& al = a_nodes[static_cast<size_t>(l)];
            const double c = out.state_rule.weights(j) * f(j) * action_rule.weights(l) *
                             behavior.density(sj, al);
            if (c != 0.0) {
                coef.push_back(c);
                src_s.push_back(sj);
                src_a.push_back(al);
            }
        }
    }
    auto qdens = mdp.transition.density;
    out.state_density = [coef, src_s, src_a, qdens](const Vector& s) {
        double acc = 0.0;
        for (size_t m = 0; m < coef.size(); ++m) acc += coef[m] * qdens(src_s[m], src_a[m], s);
        return acc;
    };
    auto sd = out.state_density;
    auto bd = behavior.density;
    out.density = [sd, bd](const Vector& s, const Vector& a) { return sd(s) * bd(s, a); };
    return out;
}

CoverageBounds coverage_bounds(const MdpSpec& mdp, const PolicyDensity& target,
                               const StationaryDensity& stat, int grid_per_dim) {
    const int d = mdp.state_dims() + mdp.action_dims();
    if (grid_per_dim <= 0) grid_per_dim = d <= 2 ? 201 : (d <= 4 ? 51 : 21);
    CoverageBounds out;
    out.grid_per_dim = grid_per_dim;

    const TensorGrid sg = make_grid(mdp.state_box, Box{}, grid_per_dim);
    const TensorGrid ag = make_grid(Box{}, mdp.action_box, grid_per_dim);

    // Occupation density range over the (s,a) product grid.
    std::vector<double> fs(static_cast<size_t>(sg.total));
    for (Eigen::Index i = 0; i < sg.total; ++i)
        fs[static_cast<size_t>(i)] = stat.state_density(sg.point(i));
    double dmin = std::numeric_limits<double>::infinity(), dmax = 0.0;
    for (Eigen::Index i = 0; i < sg.total; ++i) {
        const Vector s = sg.point(i);
        for (Eigen::Index j = 0; j < ag.total; ++j) {
            const double v = fs[static_cast<size_t>(i)] * mdp.behavior.density(s, ag.point(j));
            dmin = std::min(dmin, v);
            dmax = std::max(dmax, v);
        }
    }
    out.dbar_min = dmin;
    out.dbar_max = dmax;

    // One-step composite kernel q(s'|s,a) pi(a'|s'): for each s', the two
    // suprema factor, with the shared s' handled per grid node.
    double pair_max = 0.0;
    if (target.point_mass()) {
        // Degenerate target kernels have no bounded pair density; report the
        // transition factor alone.
        for (Eigen::Index k = 0; k < sg.total; ++k) {
            const Vector sp = sg.point(k);
            double qmax = 0.0;
            for (Eigen::Index i = 0; i < sg.total; ++i) {
                const Vector s = sg.point(i);
                for (Eigen::Index j = 0; j < ag.total; ++j)
                    qmax = std::max(qmax, mdp.transition.density(s, ag.point(j), sp));
            }
            pair_max = std::max(pair_max, qmax);
        }
    } else {
        for (Eigen::Index k = 0; k < sg.total; ++k) {
            const Vector sp = sg.point(k);
            double qmax = 0.0;
            for (Eigen::Index i = 0; i < sg.total; ++i) {
                const Vector s = sg.point(i);
                for (Eigen::Index j = 0; j < ag.total; ++j)
                    qmax = std::max(qmax, mdp.transition.density(s, ag.point(j), sp));
            }
            double pmax = 0.0;
            for (Eigen::Index j = 0; j < ag.total; ++j)
                pmax = std::max(pmax, target.density(sp, ag.point(j)));
            pair_max = std::max(pair_max, qmax * pmax);
        }
    }
    out.pair_kernel_max = pair_max;
    out.p_min = out.dbar_min;
    out.p_max = std::max(out.dbar_max, out.pair_kernel_max);
    return out;
}

} // namespace ope
