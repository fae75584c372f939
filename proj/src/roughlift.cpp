#include "rplab/roughlift.hpp"

#include <cmath>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "rplab/rng.hpp"

namespace rplab {

RoughPath::RoughPath(int dim_, int level_)
    : dim(dim_),
      level(level_),
      values(Mat::Zero(grid_points(level_), dim_)),
      level2_adj(grid_intervals(level_), Mat::Zero(dim_, dim_)) {}

Vec RoughPath::level1(int js, int jt) const {
    return (values.row(jt) - values.row(js)).transpose();
}

Mat RoughPath::level2(int js, int jt) const {
    if (js < 0 || jt > intervals() || js > jt)
        throw std::out_of_range("RoughPath::level2: bad interval");
    Mat acc = Mat::Zero(dim, dim);
    Vec inc1 = Vec::Zero(dim);
    for (int j = js; j < jt; ++j) {
        const Vec dx = (values.row(j + 1) - values.row(j)).transpose();
        acc += level2_adj[j];
        acc += inc1 * dx.transpose();
        inc1 += dx;
    }
    return acc;
}

void RoughPath::validate() const {
    if (dim <= 0 || level <= 0) throw std::invalid_argument("RoughPath: bad shape");
    if (values.rows() != points() || values.cols() != dim)
        throw std::invalid_argument("RoughPath: values shape");
    if (static_cast<int>(level2_adj.size()) != intervals())
        throw std::invalid_argument("RoughPath: level2_adj size");
    for (const Mat& t : level2_adj)
        if (t.rows() != dim || t.cols() != dim)
            throw std::invalid_argument("RoughPath: level2 tensor shape");
}

RoughPath zero_rough_path(int dim, int level) { return RoughPath(dim, level); }

RoughPath lift_pl(const CameronMartinPath& h) { return lift_pl(h, std::max(h.level, 1)); }

RoughPath lift_pl(const CameronMartinPath& h, int level) {
    const CameronMartinPath hf = h.refined(level);
    RoughPath rp(h.dim, level);
    rp.values = hf.knots;
    for (int j = 0; j < rp.intervals(); ++j) {
        const Vec dh = (hf.knots.row(j + 1) - hf.knots.row(j)).transpose();
        rp.level2_adj[j] = 0.5 * dh * dh.transpose();
    }
    return rp;
}

GridPath brownian_sample(int dim, int K, std::uint64_t seed) {
    GridPath w(dim, K);
    Rng rng(seed);
    const double sd = std::sqrt(grid_mesh(K));
    for (int j = 1; j < w.points(); ++j)
        for (int c = 0; c < dim; ++c)
            w.values(j, c) = w.values(j - 1, c) + sd * rng.gaussian();
    return w;
}

RoughPath dyadic_lift(const GridPath& w, int n) {
    if (n > w.level) throw std::invalid_argument("dyadic_lift: n exceeds the grid level");
    return lift_pl(dyadic_project(w, n), w.level);
}

RoughPath young_translate(const RoughPath& rp, const CameronMartinPath& h) {
    if (rp.dim != h.dim) throw std::invalid_argument("young_translate: dimension mismatch");
    if (h.level > rp.level)
        throw std::invalid_argument("young_translate: h is not resolvable on the grid");
    const CameronMartinPath hf = h.refined(rp.level);
    RoughPath out(rp.dim, rp.level);
    out.values = rp.values + hf.knots;
    for (int j = 0; j < rp.intervals(); ++j) {
        const Vec dw = (rp.values.row(j + 1) - rp.values.row(j)).transpose();
        const Vec dh = (hf.knots.row(j + 1) - hf.knots.row(j)).transpose();
        // w is piecewise linear within the interval, so both cross integrals
        // have the closed form (1/2) dw (x) dh and (1/2) dh (x) dw.
        out.level2_adj[j] = rp.level2_adj[j] + 0.5 * dh * dh.transpose() +
                            0.5 * (dw * dh.transpose() + dh * dw.transpose());
    }
    return out;
}

RoughPath dilate(const RoughPath& rp, double c) {
    RoughPath out(rp.dim, rp.level);
    out.values = c * rp.values;
    for (int j = 0; j < rp.intervals(); ++j) out.level2_adj[j] = (c * c) * rp.level2_adj[j];
    return out;
}

CameronMartinPath scaled(const CameronMartinPath& h, double c) {
    CameronMartinPath out = h;
    out.knots *= c;
    return out;
}

namespace {

double pow_int(double x, int p) {
    double acc = 1.0;
    double base = x;
    for (int e = p; e > 0; e >>= 1) {
        if (e & 1) acc *= base;
        base *= base;
    }
    return acc;
}

// Prefix tensors A_j = w^2_{0,j}; arbitrary pairs follow from Chen's identity
// as w^2_{s,t} = A_t - A_s - w^1_{0,s} (x) w^1_{s,t}.
std::vector<Mat> level2_prefix(const RoughPath& rp) {
    std::vector<Mat> A(rp.points(), Mat::Zero(rp.dim, rp.dim));
    Vec inc1 = Vec::Zero(rp.dim);
    for (int j = 0; j < rp.intervals(); ++j) {
        const Vec dx = (rp.values.row(j + 1) - rp.values.row(j)).transpose();
        A[j + 1] = A[j] + rp.level2_adj[j] + inc1 * dx.transpose();
        inc1 += dx;
    }
    return A;
}

}  // namespace

namespace {

// Node values shifted to start at zero, plus flattened level-2 prefixes.
struct NormWorkspace {
    Mat v;   // (n+1) x d, v(0) = 0
    Mat A;   // (n+1) x d*d row-major tensors
    explicit NormWorkspace(const RoughPath& rp)
        : v(rp.values.rowwise() - rp.values.row(0)), A(rp.points(), rp.dim * rp.dim) {
        const std::vector<Mat> pre = level2_prefix(rp);
        for (int j = 0; j < rp.points(); ++j)
            for (int p = 0; p < rp.dim; ++p)
                for (int q = 0; q < rp.dim; ++q) A(j, p * rp.dim + q) = pre[j](p, q);
    }
};

bool is_zero(const RoughPath& rp) {
    if (rp.values.cwiseAbs().maxCoeff() != 0.0) return false;
    for (const Mat& t : rp.level2_adj)
        if (t.cwiseAbs().maxCoeff() != 0.0) return false;
    return true;
}

}  // namespace

BesovSeminorms besov_seminorms(const RoughPath& a, const RoughPath& b,
                               const BesovParams& params) {
    if (a.dim != b.dim || a.level != b.level)
        throw std::invalid_argument("besov_seminorms: grid mismatch");
    const int d = a.dim;
    const int n = a.intervals();
    const double mesh = grid_mesh(a.level);
    const int fm = params.four_m();
    const int tm = 2 * params.m;
    const double wexp = 1.0 + fm * params.alpha;
    const bool b_zero = is_zero(b);

    const NormWorkspace wa(a);
    const NormWorkspace wb(b);

    double sum1 = 0.0;
    double sum2 = 0.0;
    std::vector<double> xa(d), ya(d), xb(d), yb(d);
    for (int lag = 1; lag <= n; ++lag) {
        const double weight = std::pow(lag * mesh, -wexp) * mesh * mesh;
        double acc1 = 0.0;
        double acc2 = 0.0;
        for (int s = 0; s + lag <= n; ++s) {
            const int t = s + lag;
            double n1 = 0.0;
            double n2 = 0.0;
            if (b_zero) {
                for (int c = 0; c < d; ++c) {
                    xa[c] = wa.v(s, c);
                    ya[c] = wa.v(t, c) - xa[c];
                    n1 += ya[c] * ya[c];
                }
                for (int p = 0; p < d; ++p)
                    for (int q = 0; q < d; ++q) {
                        const int pq = p * d + q;
                        const double e = wa.A(t, pq) - wa.A(s, pq) - xa[p] * ya[q];
                        n2 += e * e;
                    }
            } else {
                for (int c = 0; c < d; ++c) {
                    xa[c] = wa.v(s, c);
                    ya[c] = wa.v(t, c) - xa[c];
                    xb[c] = wb.v(s, c);
                    yb[c] = wb.v(t, c) - xb[c];
                    const double e1 = ya[c] - yb[c];
                    n1 += e1 * e1;
                }
                // Chen reconstruction per path, then the tensor difference.
                for (int p = 0; p < d; ++p)
                    for (int q = 0; q < d; ++q) {
                        const int pq = p * d + q;
                        const double ea = wa.A(t, pq) - wa.A(s, pq) - xa[p] * ya[q];
                        const double eb = wb.A(t, pq) - wb.A(s, pq) - xb[p] * yb[q];
                        const double e = ea - eb;
                        n2 += e * e;
                    }
            }
            acc1 += pow_int(n1, tm);        // |w1|^{4m} = (|w1|^2)^{2m}
            acc2 += pow_int(n2, params.m);  // |w2|^{2m} = (|w2|_F^2)^m
        }
        sum1 += weight * acc1;
        sum2 += weight * acc2;
    }
    BesovSeminorms out;
    out.level1 = std::pow(sum1, 1.0 / fm);
    out.level2 = std::pow(sum2, 1.0 / tm);
    return out;
}

double besov_distance(const RoughPath& a, const RoughPath& b, const BesovParams& params) {
    const BesovSeminorms s = besov_seminorms(a, b, params);
    return s.level1 + s.level2;
}

double homogeneous_norm(const RoughPath& rp, const BesovParams& params) {
    const BesovSeminorms s = besov_seminorms(rp, zero_rough_path(rp.dim, rp.level), params);
    return s.level1 + std::sqrt(s.level2);
}

KlResidualStats kl_residual_stats(int dim, int n, int K, int n_samples,
                                  const BesovParams& params, std::uint64_t seed, int workers) {
    if (n > K) throw std::invalid_argument("kl_residual_stats: need n <= K");
    std::vector<double> norms(n_samples, 0.0);
    auto worker = [&](int lo, int hi) {
        for (int i = lo; i < hi; ++i) {
            const GridPath w = brownian_sample(dim, K, derive_seed(seed, i));
            const RoughPath lifted = dyadic_lift(w, K);
            const CameronMartinPath skel = dyadic_project(w, n);
            norms[i] = homogeneous_norm(young_translate(lifted, scaled(skel, -1.0)), params);
        }
    };
    if (workers <= 1) {
        worker(0, n_samples);
    } else {
        std::vector<std::thread> pool;
        const int chunk = (n_samples + workers - 1) / workers;
        for (int t = 0; t < workers; ++t) {
            const int lo = t * chunk;
            const int hi = std::min(n_samples, lo + chunk);
            if (lo < hi) pool.emplace_back(worker, lo, hi);
        }
        for (auto& th : pool) th.join();
    }
    KlResidualStats stats;
    stats.n_samples = n_samples;
    double acc = 0.0;
    for (double v : norms) {
        acc += v;
        stats.max = std::max(stats.max, v);
    }
    stats.mean = acc / n_samples;
    double var = 0.0;
    for (double v : norms) var += (v - stats.mean) * (v - stats.mean);
    if (n_samples > 1) stats.std_error = std::sqrt(var / (n_samples - 1) / n_samples);
    return stats;
}

std::string rough_path_to_json(const RoughPath& rp) {
    nlohmann::json j;
    j["dim"] = rp.dim;
    j["K"] = rp.level;
    j["level1"] = nlohmann::json::array();
    for (int r = 0; r < rp.points(); ++r) {
        std::vector<double> row(rp.dim);
        for (int c = 0; c < rp.dim; ++c) row[c] = rp.values(r, c);
        j["level1"].push_back(row);
    }
    j["level2_adjacent"] = nlohmann::json::array();
    for (const Mat& t : rp.level2_adj) {
        std::vector<double> flat(rp.dim * rp.dim);
        for (int p = 0; p < rp.dim; ++p)
            for (int q = 0; q < rp.dim; ++q) flat[p * rp.dim + q] = t(p, q);
        j["level2_adjacent"].push_back(flat);
    }
    return j.dump();
}

RoughPath rough_path_from_json(const std::string& text) {
    const nlohmann::json j = nlohmann::json::parse(text);
    RoughPath rp(j.at("dim").get<int>(), j.at("K").get<int>());
    const auto& l1 = j.at("level1");
    if (static_cast<int>(l1.size()) != rp.points())
        throw std::runtime_error("rough_path_from_json: level1 size");
    for (int r = 0; r < rp.points(); ++r)
        for (int c = 0; c < rp.dim; ++c) rp.values(r, c) = l1[r][c].get<double>();
    const auto& l2 = j.at("level2_adjacent");
    if (static_cast<int>(l2.size()) != rp.intervals())
        throw std::runtime_error("rough_path_from_json: level2 size");
    for (int r = 0; r < rp.intervals(); ++r)
        for (int p = 0; p < rp.dim; ++p)
            for (int q = 0; q < rp.dim; ++q)
                rp.level2_adj[r](p, q) = l2[r][p * rp.dim + q].get<double>();
    rp.validate();
    return rp;
}

}  // namespace rplab
