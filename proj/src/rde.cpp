#include "rplab/rde.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <numeric>
#include <stdexcept>

#include "rplab/rng.hpp"

namespace rplab {

Mat VectorFieldSystem::sigma(const Vec& x) const {
    Mat s(state_dim, driver_dim);
    Vec col(state_dim);
    for (int i = 1; i <= driver_dim; ++i) {
        field(i, x, col);
        s.col(i - 1) = col;
    }
    return s;
}

Vec VectorFieldSystem::drift(const Vec& x) const {
    Vec b(state_dim);
    field(0, x, b);
    return b;
}

namespace {

// 20 Latin-hypercube points in [-2,2]^e.
std::vector<Vec> latin_hypercube_points(int e, std::uint64_t seed) {
    const int n = 20;
    Rng rng(seed);
    std::vector<Vec> pts(n, Vec::Zero(e));
    for (int c = 0; c < e; ++c) {
        std::vector<int> bins(n);
        std::iota(bins.begin(), bins.end(), 0);
        for (int j = n - 1; j > 0; --j) {
            const int k = static_cast<int>(rng.next_u64() % (j + 1));
            std::swap(bins[j], bins[k]);
        }
        for (int j = 0; j < n; ++j)
            pts[j](c) = -2.0 + 4.0 * (bins[j] + rng.uniform()) / n;
    }
    return pts;
}

}  // namespace

void validate_derivatives(const VectorFieldSystem& vf, std::uint64_t seed) {
    if (vf.state_dim < 1 || vf.driver_dim < 1)
        throw std::invalid_argument("VectorFieldSystem: dimensions must be positive");
    if (!vf.field || !vf.jacobian)
        throw std::invalid_argument("VectorFieldSystem: field and jacobian evaluators required");
    const int e = vf.state_dim;
    const double step = 1e-5;
    const double rel_tol = 1e-5;
    Vec vp(e), vm(e), col(e);
    Mat jac(e, e), jp(e, e), jm(e, e);
    std::vector<Mat> hess;
    for (const Vec& x : latin_hypercube_points(e, seed)) {
        for (int i = 0; i <= vf.driver_dim; ++i) {
            vf.jacobian(i, x, jac);
            for (int c = 0; c < e; ++c) {
                Vec xp = x, xm = x;
                xp(c) += step;
                xm(c) -= step;
                vf.field(i, xp, vp);
                vf.field(i, xm, vm);
                const Vec fd = (vp - vm) / (2.0 * step);
                const double scale = std::max(1.0, fd.cwiseAbs().maxCoeff());
                if ((fd - jac.col(c)).cwiseAbs().maxCoeff() > rel_tol * scale)
                    throw std::invalid_argument(
                        "VectorFieldSystem '" + vf.name +
                        "': jacobian disagrees with finite differences");
            }
            if (vf.has_hessian) {
                vf.hessian(i, x, hess);
                if (static_cast<int>(hess.size()) != e)
                    throw std::invalid_argument("VectorFieldSystem: hessian must have e slices");
                for (int c = 0; c < e; ++c) {
                    Vec xp = x, xm = x;
                    xp(c) += step;
                    xm(c) -= step;
                    vf.jacobian(i, xp, jp);
                    vf.jacobian(i, xm, jm);
                    const Mat fd = (jp - jm) / (2.0 * step);
                    // fd(r,p) ~ d^2 V^r / d x_p d x_c
                    for (int r = 0; r < e; ++r)
                        for (int p = 0; p < e; ++p) {
                            const double scale = std::max(1.0, std::abs(fd(r, p)));
                            if (std::abs(fd(r, p) - hess[r](p, c)) > rel_tol * scale)
                                throw std::invalid_argument(
                                    "VectorFieldSystem '" + vf.name +
                                    "': hessian disagrees with finite differences");
                        }
                }
            }
        }
    }
}

namespace {

VectorFieldSystem make_additive(int dims) {
    VectorFieldSystem vf;
    vf.state_dim = dims;
    vf.driver_dim = dims;
    vf.name = dims == 1 ? "additive" : "additive" + std::to_string(dims);
    vf.smoothness = {.order = 1000, .bounded = true};
    vf.field = [dims](int i, const Vec&, Vec& out) {
        out = Vec::Zero(dims);
        if (i >= 1) out(i - 1) = 1.0;
    };
    vf.jacobian = [dims](int, const Vec&, Mat& out) { out = Mat::Zero(dims, dims); };
    vf.hessian = [dims](int, const Vec&, std::vector<Mat>& out) {
        out.assign(dims, Mat::Zero(dims, dims));
    };
    vf.has_hessian = true;
    return vf;
}

VectorFieldSystem make_geometric() {
    VectorFieldSystem vf;
    vf.state_dim = 1;
    vf.driver_dim = 1;
    vf.name = "geometric";
    vf.smoothness = {.order = 1000, .bounded = false};
    vf.field = [](int i, const Vec& x, Vec& out) {
        out = Vec::Zero(1);
        if (i == 1) out(0) = x(0);
    };
    vf.jacobian = [](int i, const Vec&, Mat& out) {
        out = Mat::Zero(1, 1);
        if (i == 1) out(0, 0) = 1.0;
    };
    vf.hessian = [](int, const Vec&, std::vector<Mat>& out) {
        out.assign(1, Mat::Zero(1, 1));
    };
    vf.has_hessian = true;
    return vf;
}

VectorFieldSystem make_kolmogorov() {
    VectorFieldSystem vf;
    vf.state_dim = 2;
    vf.driver_dim = 1;
    vf.name = "kolmogorov";
    vf.smoothness = {.order = 1000, .bounded = false};
    vf.field = [](int i, const Vec& x, Vec& out) {
        out = Vec::Zero(2);
        if (i == 1)
            out(0) = 1.0;
        else
            out(1) = x(0);
    };
    vf.jacobian = [](int i, const Vec&, Mat& out) {
        out = Mat::Zero(2, 2);
        if (i == 0) out(1, 0) = 1.0;
    };
    vf.hessian = [](int, const Vec&, std::vector<Mat>& out) {
        out.assign(2, Mat::Zero(2, 2));
    };
    vf.has_hessian = true;
    return vf;
}

VectorFieldSystem make_heisenberg() {
    VectorFieldSystem vf;
    vf.state_dim = 3;
    vf.driver_dim = 2;
    vf.name = "heisenberg";
    vf.smoothness = {.order = 1000, .bounded = false};
    vf.field = [](int i, const Vec& x, Vec& out) {
        out = Vec::Zero(3);
        if (i == 1) {
            out(0) = 1.0;
            out(2) = -0.5 * x(1);
        } else if (i == 2) {
            out(1) = 1.0;
            out(2) = 0.5 * x(0);
        }
    };
    vf.jacobian = [](int i, const Vec&, Mat& out) {
        out = Mat::Zero(3, 3);
        if (i == 1) out(2, 1) = -0.5;
        if (i == 2) out(2, 0) = 0.5;
    };
    vf.hessian = [](int, const Vec&, std::vector<Mat>& out) {
        out.assign(3, Mat::Zero(3, 3));
    };
    vf.has_hessian = true;
    return vf;
}

VectorFieldSystem make_sine() {
    VectorFieldSystem vf;
    vf.state_dim = 1;
    vf.driver_dim = 1;
    vf.name = "sine";
    vf.smoothness = {.order = 1000, .bounded = true};
    vf.field = [](int i, const Vec& x, Vec& out) {
        out = Vec::Zero(1);
        out(0) = i == 1 ? std::sin(x(0)) + 2.0 : 0.5 * std::cos(x(0));
    };
    vf.jacobian = [](int i, const Vec& x, Mat& out) {
        out = Mat::Zero(1, 1);
        out(0, 0) = i == 1 ? std::cos(x(0)) : -0.5 * std::sin(x(0));
    };
    vf.hessian = [](int i, const Vec& x, std::vector<Mat>& out) {
        out.assign(1, Mat::Zero(1, 1));
        out[0](0, 0) = i == 1 ? -std::sin(x(0)) : -0.5 * std::cos(x(0));
    };
    vf.has_hessian = true;
    return vf;
}

}  // namespace

const VectorFieldSystem& builtin_system(const std::string& name) {
    static std::mutex mu;
    static std::map<std::string, VectorFieldSystem> cache;
    std::scoped_lock lock(mu);
    const std::string key = name == "degenerate" ? "geometric" : name;
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    VectorFieldSystem vf;
    if (key == "additive")
        vf = make_additive(1);
    else if (key == "additive2")
        vf = make_additive(2);
    else if (key == "geometric")
        vf = make_geometric();
    else if (key == "kolmogorov")
        vf = make_kolmogorov();
    else if (key == "heisenberg")
        vf = make_heisenberg();
    else if (key == "sine")
        vf = make_sine();
    else
        throw std::invalid_argument("unknown system '" + name + "'");
    validate_derivatives(vf);
    return cache.emplace(key, std::move(vf)).first->second;
}

std::vector<std::string> builtin_system_names() {
    return {"additive", "additive2", "geometric", "kolmogorov", "heisenberg", "sine",
            "degenerate"};
}

namespace {

void check_finite(const Vec& x, const char* who, double t) {
    if (!x.allFinite())
        throw std::runtime_error(std::string(who) + ": state became non-finite at t=" +
                                 std::to_string(t));
}

// Evaluations of all coefficients at one state.
struct FieldEval {
    Mat sig;             // e x d
    Vec b;               // e
    std::vector<Mat> G;  // jacobians of V_0..V_d
    std::vector<std::vector<Mat>> H;  // hessian slices of V_0..V_d (optional)

    FieldEval(int e, int d, bool with_hessian)
        : sig(e, d), b(e), G(d + 1, Mat::Zero(e, e)) {
        if (with_hessian) H.resize(d + 1);
    }
};

void eval_fields(const VectorFieldSystem& vf, const Vec& x, bool with_jacobian,
                 bool with_hessian, FieldEval& out) {
    Vec col(vf.state_dim);
    for (int i = 0; i <= vf.driver_dim; ++i) {
        vf.field(i, x, col);
        if (i == 0)
            out.b = col;
        else
            out.sig.col(i - 1) = col;
        if (with_jacobian) vf.jacobian(i, x, out.G[i]);
        if (with_hessian) vf.hessian(i, x, out.H[i]);
    }
}

// grad^2 V_i <u, v>: vector with components sum_{p,q} H_i[r](p,q) u_p v_q.
Vec hess_bilinear(const std::vector<Mat>& Hi, const Vec& u, const Vec& v) {
    Vec out(static_cast<int>(Hi.size()));
    for (int r = 0; r < out.size(); ++r) out(r) = u.dot(Hi[r] * v);
    return out;
}

// Matrix M with M v = grad^2 V_i <u, v>.
Mat hess_contract(const std::vector<Mat>& Hi, const Vec& u) {
    const int e = static_cast<int>(Hi.size());
    Mat out(e, e);
    for (int r = 0; r < e; ++r) out.row(r) = (Hi[r] * u).transpose();
    return out;
}

}  // namespace

GridPath solve_skeleton(const VectorFieldSystem& vf, const CameronMartinPath& h, const Vec& a) {
    GridPath out;
    solve_skeleton(vf, h, a, out);
    return out;
}

void solve_skeleton(const VectorFieldSystem& vf, const CameronMartinPath& h, const Vec& a,
                    GridPath& out) {
    if (vf.driver_dim != h.dim) throw std::invalid_argument("solve_skeleton: driver dim mismatch");
    if (a.size() != vf.state_dim) throw std::invalid_argument("solve_skeleton: start dim mismatch");
    const int e = vf.state_dim;
    const int d = vf.driver_dim;
    const int level = std::max(h.level, 1);
    const CameronMartinPath hf = h.refined(level);
    const int n = grid_intervals(level);
    const double dt = grid_mesh(level);

    if (out.dim != e || out.level != level) out = GridPath(e, level);
    Vec x = a;
    out.values.row(0) = x.transpose();
    Vec u(d), xs(e), col(e);
    Vec k1(e), k2(e), k3(e), k4(e);
    auto rhs = [&](const Vec& at, Vec& k) {
        vf.field(0, at, k);
        for (int i = 1; i <= d; ++i) {
            vf.field(i, at, col);
            k += u(i - 1) * col;
        }
    };
    for (int j = 0; j < n; ++j) {
        u = (hf.knots.row(j + 1) - hf.knots.row(j)).transpose() / dt;
        rhs(x, k1);
        xs = x + 0.5 * dt * k1;
        rhs(xs, k2);
        xs = x + 0.5 * dt * k2;
        rhs(xs, k3);
        xs = x + dt * k3;
        rhs(xs, k4);
        x += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        check_finite(x, "solve_skeleton", (j + 1) * dt);
        out.values.row(j + 1) = x.transpose();
    }
}

GridPath solve_rde(const VectorFieldSystem& vf, const RoughPath& rp, const Vec& a) {
    if (vf.driver_dim != rp.dim) throw std::invalid_argument("solve_rde: driver dim mismatch");
    if (vf.smoothness.order < 3)
        throw std::invalid_argument("solve_rde: coefficients must be (at least) C^3");
    const int e = vf.state_dim;
    const int d = vf.driver_dim;
    const double dt = grid_mesh(rp.level);
    GridPath out(e, rp.level);
    Vec x = a;
    out.values.row(0) = x.transpose();
    FieldEval f(e, d, false);
    Vec dw(d), xn(e);
    Mat P(e, d);
    for (int j = 0; j < rp.intervals(); ++j) {
        eval_fields(vf, x, true, false, f);
        dw = (rp.values.row(j + 1) - rp.values.row(j)).transpose();
        xn = x + f.sig * dw + f.b * dt;
        P.noalias() = f.sig * rp.level2_adj[j];
        for (int k = 1; k <= d; ++k) xn.noalias() += f.G[k] * P.col(k - 1);
        x = xn;
        check_finite(x, "solve_rde", out.t(j + 1));
        out.values.row(j + 1) = x.transpose();
    }
    return out;
}

namespace {

// State bundle for the coupled ODE/RDE systems.
struct BundleState {
    Vec x;
    Mat J;
    Mat X1;  // e x p, columns are xi1 per direction
    Mat X2;  // e x q, columns are xi2 per pair
};

struct BundleDeriv {
    Vec x;
    Mat J;
    Mat X1;
    Mat X2;
};

struct BundleProblem {
    const VectorFieldSystem* vf;
    bool with_J = true;
    int p = 0;  // directions
    int q = 0;  // pairs
    const std::vector<IndexPair>* pairs = nullptr;
};

// RHS of the coupled system at state s, with control slope u (d) and
// direction slopes Vl (d x p).
void bundle_rhs(const BundleProblem& prob, const BundleState& s, const Vec& u, const Mat& Vl,
                FieldEval& f, BundleDeriv& out) {
    const VectorFieldSystem& vf = *prob.vf;
    const int e = vf.state_dim;
    const int d = vf.driver_dim;
    const bool need_hess = prob.q > 0;
    const bool need_A = prob.with_J || prob.p > 0 || prob.q > 0;
    eval_fields(vf, s.x, need_A, need_hess, f);
    out.x = f.sig * u + f.b;
    if (!need_A) return;
    // A = sum_i grad V_i u_i + grad V_0
    Mat A = f.G[0];
    for (int i = 1; i <= d; ++i) A.noalias() += u(i - 1) * f.G[i];
    if (prob.with_J) out.J = A * s.J;
    if (prob.p > 0) out.X1 = A * s.X1 + f.sig * Vl;
    if (prob.q > 0) out.X2.resize(e, prob.q);
    for (int r = 0; r < prob.q; ++r) {
        const auto [ia, ib] = (*prob.pairs)[r];
        const Vec xa = s.X1.col(ia);
        const Vec xb = s.X1.col(ib);
        Vec rhs = A * s.X2.col(r);
        rhs += hess_bilinear(f.H[0], xa, xb);
        for (int i = 1; i <= d; ++i) rhs += u(i - 1) * hess_bilinear(f.H[i], xa, xb);
        for (int i = 1; i <= d; ++i) {
            rhs += Vl(i - 1, ia) * (f.G[i] * xb);
            rhs += Vl(i - 1, ib) * (f.G[i] * xa);
        }
        out.X2.col(r) = rhs;
    }
}

BundleState axpy(const BundleState& s, double c, const BundleDeriv& k, const BundleProblem& prob) {
    BundleState out;
    out.x = s.x + c * k.x;
    if (prob.with_J) out.J = s.J + c * k.J;
    if (prob.p > 0) out.X1 = s.X1 + c * k.X1;
    if (prob.q > 0) out.X2 = s.X2 + c * k.X2;
    return out;
}

// One classical RK4 step of length dt with constant slopes u, Vl.
void rk4_step(const BundleProblem& prob, BundleState& s, double dt, const Vec& u, const Mat& Vl,
              FieldEval& f) {
    BundleDeriv k1, k2, k3, k4;
    bundle_rhs(prob, s, u, Vl, f, k1);
    BundleState s2 = axpy(s, 0.5 * dt, k1, prob);
    bundle_rhs(prob, s2, u, Vl, f, k2);
    BundleState s3 = axpy(s, 0.5 * dt, k2, prob);
    bundle_rhs(prob, s3, u, Vl, f, k3);
    BundleState s4 = axpy(s, dt, k3, prob);
    bundle_rhs(prob, s4, u, Vl, f, k4);
    const double c = dt / 6.0;
    s.x += c * (k1.x + 2.0 * k2.x + 2.0 * k3.x + k4.x);
    if (prob.with_J) s.J += c * (k1.J + 2.0 * k2.J + 2.0 * k3.J + k4.J);
    if (prob.p > 0) s.X1 += c * (k1.X1 + 2.0 * k2.X1 + 2.0 * k3.X1 + k4.X1);
    if (prob.q > 0) s.X2 += c * (k1.X2 + 2.0 * k2.X2 + 2.0 * k3.X2 + k4.X2);
}

}  // namespace

namespace {

VariationalBundle ode_solve(const VectorFieldSystem& vf, const CameronMartinPath& h, const Vec& a,
                            const std::vector<CameronMartinPath>& directions,
                            const std::vector<IndexPair>& pairs, bool with_J) {
    if (vf.driver_dim != h.dim)
        throw std::invalid_argument("solve_variational: driver dim mismatch");
    if (a.size() != vf.state_dim)
        throw std::invalid_argument("solve_variational: start dim mismatch");
    if (!pairs.empty() && !vf.has_hessian)
        throw std::invalid_argument(
            "solve_variational: second derivatives required when pairs are requested");
    int level = std::max(h.level, 1);
    for (const auto& l : directions) {
        if (l.dim != vf.driver_dim)
            throw std::invalid_argument("solve_variational: direction dim mismatch");
        level = std::max(level, l.level);
    }
    for (const auto& [ia, ib] : pairs)
        if (ia < 0 || ib < 0 || ia >= static_cast<int>(directions.size()) ||
            ib >= static_cast<int>(directions.size()))
            throw std::invalid_argument("solve_variational: pair index out of range");

    const CameronMartinPath hf = h.refined(level);
    std::vector<CameronMartinPath> dirs;
    dirs.reserve(directions.size());
    for (const auto& l : directions) dirs.push_back(l.refined(level));

    const int e = vf.state_dim;
    const int d = vf.driver_dim;
    const int p = static_cast<int>(directions.size());
    const int q = static_cast<int>(pairs.size());
    const int n = grid_intervals(level);
    const double dt = grid_mesh(level);

    BundleProblem prob{&vf, with_J, p, q, &pairs};
    BundleState s;
    s.x = a;
    s.J = Mat::Identity(e, e);
    s.X1 = Mat::Zero(e, p);
    s.X2 = Mat::Zero(e, q);

    VariationalBundle out;
    out.base = GridPath(e, level);
    out.base.values.row(0) = a.transpose();
    if (with_J) out.jacobian.assign(n + 1, Mat::Identity(e, e));
    out.xi1.assign(p, GridPath(e, level));
    out.xi2.assign(q, GridPath(e, level));

    FieldEval f(e, d, q > 0);
    Vec u(d);
    Mat Vl(d, p);
    for (int j = 0; j < n; ++j) {
        u = (hf.knots.row(j + 1) - hf.knots.row(j)).transpose() / dt;
        for (int c = 0; c < p; ++c)
            Vl.col(c) = (dirs[c].knots.row(j + 1) - dirs[c].knots.row(j)).transpose() / dt;
        rk4_step(prob, s, dt, u, Vl, f);
        check_finite(s.x, "solve_variational", out.base.t(j + 1));
        out.base.values.row(j + 1) = s.x.transpose();
        if (with_J) out.jacobian[j + 1] = s.J;
        for (int c = 0; c < p; ++c) out.xi1[c].values.row(j + 1) = s.X1.col(c).transpose();
        for (int r = 0; r < q; ++r) out.xi2[r].values.row(j + 1) = s.X2.col(r).transpose();
    }
    return out;
}

}  // namespace

VariationalBundle solve_variational(const VectorFieldSystem& vf, const CameronMartinPath& h,
                                    const Vec& a, const std::vector<CameronMartinPath>& directions,
                                    const std::vector<IndexPair>& pairs) {
    return ode_solve(vf, h, a, directions, pairs, true);
}

namespace {

// Two-stage increment scheme along a rough driver for the coupled system
// (x, J, J^{-1}, xi1 block, xi2 block). The Heun average of the first-order
// increments supplies every symmetric second-order cross term (the grids
// carry piecewise-linear paths, whose symmetric cross integrals are half
// products, and geometric level 2 has symmetric part (1/2) w1 (x) w1); the
// antisymmetric part of w2 enters through an explicit area correction.
struct RoughState {
    Vec x;
    Mat J, Jinv, X1, X2;
};

struct RoughStepper {
    const VectorFieldSystem& vf;
    bool with_J = false;
    bool with_Jinv = false;
    int p = 0;
    int q = 0;
    const std::vector<IndexPair>* pairs = nullptr;
    bool with_hess;
    FieldEval f;

    RoughStepper(const VectorFieldSystem& vf_, bool J_, bool Jinv_, int p_, int q_,
                 const std::vector<IndexPair>* pairs_)
        : vf(vf_),
          with_J(J_),
          with_Jinv(Jinv_),
          p(p_),
          q(q_),
          pairs(pairs_),
          with_hess(vf_.has_hessian),
          f(vf_.state_dim, vf_.driver_dim, vf_.has_hessian) {}

    // First-order increment at state s: sigma dw + b dt for x, the linear
    // action for J, J^{-1}, xi1, and the xi2 sources.
    RoughState phi1(const RoughState& s, const Vec& dw, double dt, const Mat& dL) {
        const int d = vf.driver_dim;
        eval_fields(vf, s.x, true, with_hess, f);
        Mat Adw = f.G[0] * dt;
        for (int k = 1; k <= d; ++k) Adw.noalias() += dw(k - 1) * f.G[k];
        RoughState out;
        out.x = f.sig * dw + f.b * dt;
        if (with_J) out.J = Adw * s.J;
        if (with_Jinv) out.Jinv = -s.Jinv * Adw;
        if (p > 0) out.X1 = Adw * s.X1 + f.sig * dL;
        if (q > 0) {
            out.X2.resize(vf.state_dim, q);
            for (int r = 0; r < q; ++r) {
                const auto [ia, ib] = (*pairs)[r];
                const Vec xa = s.X1.col(ia);
                const Vec xb = s.X1.col(ib);
                Vec upd = Adw * s.X2.col(r);
                upd += hess_bilinear(f.H[0], xa, xb) * dt;
                for (int k = 1; k <= d; ++k) upd += dw(k - 1) * hess_bilinear(f.H[k], xa, xb);
                for (int i = 1; i <= d; ++i) {
                    upd += dL(i - 1, ia) * (f.G[i] * xb);
                    upd += dL(i - 1, ib) * (f.G[i] * xa);
                }
                out.X2.col(r) = upd;
            }
        }
        return out;
    }

    // Correction from the antisymmetric part of w2 (zero for lifts of
    // piecewise-linear paths). Third derivatives are not available, so the
    // grad^3 coefficient of the xi2 area term is dropped; it vanishes on
    // every built-in system.
    RoughState area(const RoughState& s, const Mat& w2) {
        const int e = vf.state_dim;
        const int d = vf.driver_dim;
        const Mat asym = 0.5 * (w2 - w2.transpose());
        eval_fields(vf, s.x, true, with_hess, f);
        RoughState out;
        out.x = Vec::Zero(e);
        Mat B = Mat::Zero(e, e);   // left action on J, xi1, xi2
        Mat BI = Mat::Zero(e, e);  // right action on J^{-1}
        for (int k = 1; k <= d; ++k)
            for (int i = 1; i <= d; ++i) {
                const double c2 = asym(i - 1, k - 1);
                if (c2 == 0.0) continue;
                out.x += c2 * (f.G[k] * f.sig.col(i - 1));
                Mat hm = Mat::Zero(e, e);
                if (with_hess) hm = hess_contract(f.H[k], f.sig.col(i - 1));
                B.noalias() += c2 * (hm + f.G[k] * f.G[i]);
                BI.noalias() += c2 * (f.G[i] * f.G[k] - hm);
            }
        if (with_J) out.J = B * s.J;
        if (with_Jinv) out.Jinv = s.Jinv * BI;
        if (p > 0) out.X1 = B * s.X1;
        if (q > 0) {
            out.X2.resize(e, q);
            for (int r = 0; r < q; ++r) {
                const auto [ia, ib] = (*pairs)[r];
                const Vec xa = s.X1.col(ia);
                const Vec xb = s.X1.col(ib);
                Vec upd = B * s.X2.col(r);
                if (with_hess)
                    for (int k = 1; k <= d; ++k)
                        for (int i = 1; i <= d; ++i) {
                            const double c2 = asym(i - 1, k - 1);
                            if (c2 == 0.0) continue;
                            upd += c2 * (f.G[k] * hess_bilinear(f.H[i], xa, xb));
                            upd += c2 * hess_bilinear(f.H[k], f.G[i] * xa, xb);
                            upd += c2 * hess_bilinear(f.H[k], xa, f.G[i] * xb);
                        }
                out.X2.col(r) = upd;
            }
        }
        return out;
    }

    void step(RoughState& s, const Vec& dw, double dt, const Mat& dL, const Mat& w2) {
        const RoughState k1 = phi1(s, dw, dt, dL);
        RoughState mid = s;
        mid.x += k1.x;
        if (with_J) mid.J += k1.J;
        if (with_Jinv) mid.Jinv += k1.Jinv;
        if (p > 0) mid.X1 += k1.X1;
        if (q > 0) mid.X2 += k1.X2;
        const RoughState k2 = phi1(mid, dw, dt, dL);
        const RoughState ar = area(s, w2);
        s.x += 0.5 * (k1.x + k2.x) + ar.x;
        if (with_J) s.J += 0.5 * (k1.J + k2.J) + ar.J;
        if (with_Jinv) s.Jinv += 0.5 * (k1.Jinv + k2.Jinv) + ar.Jinv;
        if (p > 0) s.X1 += 0.5 * (k1.X1 + k2.X1) + ar.X1;
        if (q > 0) s.X2 += 0.5 * (k1.X2 + k2.X2) + ar.X2;
    }
};

}  // namespace

VariationalBundle solve_variational_rough(const VectorFieldSystem& vf, const RoughPath& rp,
                                          const Vec& a,
                                          const std::vector<CameronMartinPath>& directions,
                                          const std::vector<IndexPair>& pairs) {
    if (vf.driver_dim != rp.dim)
        throw std::invalid_argument("solve_variational_rough: driver dim mismatch");
    if (a.size() != vf.state_dim)
        throw std::invalid_argument("solve_variational_rough: start dim mismatch");
    if (!pairs.empty() && !vf.has_hessian)
        throw std::invalid_argument(
            "solve_variational_rough: second derivatives required when pairs are requested");
    const int e = vf.state_dim;
    const int d = vf.driver_dim;
    const int p = static_cast<int>(directions.size());
    const int q = static_cast<int>(pairs.size());
    const int n = rp.intervals();
    const double dt = grid_mesh(rp.level);

    std::vector<CameronMartinPath> dirs;
    dirs.reserve(p);
    for (const auto& l : directions) {
        if (l.dim != d)
            throw std::invalid_argument("solve_variational_rough: direction dim mismatch");
        if (l.level > rp.level)
            throw std::invalid_argument(
                "solve_variational_rough: direction is not resolvable on the grid");
        dirs.push_back(l.refined(rp.level));
    }
    for (const auto& [ia, ib] : pairs)
        if (ia < 0 || ib < 0 || ia >= p || ib >= p)
            throw std::invalid_argument("solve_variational_rough: pair index out of range");

    VariationalBundle out;
    out.base = GridPath(e, rp.level);
    out.base.values.row(0) = a.transpose();
    out.jacobian.assign(n + 1, Mat::Identity(e, e));
    out.xi1.assign(p, GridPath(e, rp.level));
    out.xi2.assign(q, GridPath(e, rp.level));

    RoughStepper stepper(vf, true, false, p, q, &pairs);
    RoughState s;
    s.x = a;
    s.J = Mat::Identity(e, e);
    s.X1 = Mat::Zero(e, p);
    s.X2 = Mat::Zero(e, q);
    Vec dw(d);
    Mat dL(d, p);
    for (int j = 0; j < n; ++j) {
        dw = (rp.values.row(j + 1) - rp.values.row(j)).transpose();
        for (int c = 0; c < p; ++c)
            dL.col(c) = (dirs[c].knots.row(j + 1) - dirs[c].knots.row(j)).transpose();
        stepper.step(s, dw, dt, dL, rp.level2_adj[j]);
        check_finite(s.x, "solve_variational_rough", out.base.t(j + 1));
        out.base.values.row(j + 1) = s.x.transpose();
        out.jacobian[j + 1] = s.J;
        for (int c = 0; c < p; ++c) out.xi1[c].values.row(j + 1) = s.X1.col(c).transpose();
        for (int r = 0; r < q; ++r) out.xi2[r].values.row(j + 1) = s.X2.col(r).transpose();
    }
    return out;
}

RoughFlow solve_flow_rough(const VectorFieldSystem& vf, const RoughPath& rp, const Vec& a) {
    if (vf.driver_dim != rp.dim)
        throw std::invalid_argument("solve_flow_rough: driver dim mismatch");
    const int e = vf.state_dim;
    const int d = vf.driver_dim;
    const int n = rp.intervals();
    const double dt = grid_mesh(rp.level);

    RoughFlow out;
    out.base = GridPath(e, rp.level);
    out.base.values.row(0) = a.transpose();
    out.J.assign(n + 1, Mat::Identity(e, e));
    out.Jinv.assign(n + 1, Mat::Identity(e, e));

    RoughStepper stepper(vf, true, true, 0, 0, nullptr);
    RoughState s;
    s.x = a;
    s.J = Mat::Identity(e, e);
    s.Jinv = Mat::Identity(e, e);
    Vec dw(d);
    const Mat dL(d, 0);
    out.max_condition = s.J.norm() * s.Jinv.norm();
    for (int j = 0; j < n; ++j) {
        dw = (rp.values.row(j + 1) - rp.values.row(j)).transpose();
        stepper.step(s, dw, dt, dL, rp.level2_adj[j]);
        check_finite(s.x, "solve_flow_rough", (j + 1) * dt);
        out.base.values.row(j + 1) = s.x.transpose();
        out.J[j + 1] = s.J;
        out.Jinv[j + 1] = s.Jinv;
        out.max_condition = std::max(out.max_condition, s.J.norm() * s.Jinv.norm());
    }
    return out;
}

RoughFlow solve_flow_ode(const VectorFieldSystem& vf, const CameronMartinPath& h, const Vec& a,
                         int level) {
    RoughFlow out;
    solve_flow_ode(vf, h, a, level, out);
    return out;
}

void solve_flow_ode(const VectorFieldSystem& vf, const CameronMartinPath& h, const Vec& a,
                    int level, RoughFlow& out) {
    if (vf.driver_dim != h.dim) throw std::invalid_argument("solve_flow_ode: driver dim mismatch");
    if (level < h.level) throw std::invalid_argument("solve_flow_ode: level too coarse");
    const int e = vf.state_dim;
    const int d = vf.driver_dim;
    const CameronMartinPath hf = h.refined(level);
    const int n = grid_intervals(level);
    const double dt = grid_mesh(level);

    if (out.base.dim != e || out.base.level != level) out.base = GridPath(e, level);
    out.base.values.row(0) = a.transpose();
    if (static_cast<int>(out.J.size()) != n + 1) {
        out.J.assign(n + 1, Mat(e, e));
        out.Jinv.assign(n + 1, Mat(e, e));
    }
    out.J[0] = Mat::Identity(e, e);
    out.Jinv[0] = Mat::Identity(e, e);

    FieldEval f(e, d, false);
    Vec x = a;
    Mat J = Mat::Identity(e, e);
    Mat Jinv = Mat::Identity(e, e);
    out.max_condition = J.norm() * Jinv.norm();
    Vec u(d);
    // Preallocated RK4 stages.
    Vec kx[4];
    Mat kJ[4], kI[4], A(e, e);
    Vec xs(e);
    Mat Js(e, e), Is(e, e);
    for (auto& v : kx) v.resize(e);
    for (auto& m : kJ) m.resize(e, e);
    for (auto& m : kI) m.resize(e, e);
    auto rhs = [&](int stage) {
        eval_fields(vf, xs, true, false, f);
        A = f.G[0];
        for (int i = 1; i <= d; ++i) A.noalias() += u(i - 1) * f.G[i];
        kx[stage] = f.b;
        kx[stage].noalias() += f.sig * u;
        kJ[stage].noalias() = A * Js;
        kI[stage].noalias() = -Is * A;
    };
    for (int j = 0; j < n; ++j) {
        u = (hf.knots.row(j + 1) - hf.knots.row(j)).transpose() / dt;
        xs = x;
        Js = J;
        Is = Jinv;
        rhs(0);
        xs = x + 0.5 * dt * kx[0];
        Js = J + 0.5 * dt * kJ[0];
        Is = Jinv + 0.5 * dt * kI[0];
        rhs(1);
        xs = x + 0.5 * dt * kx[1];
        Js = J + 0.5 * dt * kJ[1];
        Is = Jinv + 0.5 * dt * kI[1];
        rhs(2);
        xs = x + dt * kx[2];
        Js = J + dt * kJ[2];
        Is = Jinv + dt * kI[2];
        rhs(3);
        const double c = dt / 6.0;
        x += c * (kx[0] + 2.0 * kx[1] + 2.0 * kx[2] + kx[3]);
        J += c * (kJ[0] + 2.0 * kJ[1] + 2.0 * kJ[2] + kJ[3]);
        Jinv += c * (kI[0] + 2.0 * kI[1] + 2.0 * kI[2] + kI[3]);
        check_finite(x, "solve_flow_ode", (j + 1) * dt);
        out.base.values.row(j + 1) = x.transpose();
        out.J[j + 1] = J;
        out.Jinv[j + 1] = Jinv;
        out.max_condition = std::max(out.max_condition, J.norm() * Jinv.norm());
    }
}

namespace {

void fused_pl_steps(const VectorFieldSystem& vf, const GridPath& w, const Vec& a,
                    GridPath* full, Vec& x_out) {
    if (vf.driver_dim != w.dim) throw std::invalid_argument("rde_endpoint: driver dim mismatch");
    const int e = vf.state_dim;
    const int d = vf.driver_dim;
    const double dt = grid_mesh(w.level);
    FieldEval f(e, d, false);
    Vec x = a;
    Vec dw(d), xn(e);
    Mat P(e, d);
    if (full) full->values.row(0) = x.transpose();
    for (int j = 0; j < grid_intervals(w.level); ++j) {
        eval_fields(vf, x, true, false, f);
        dw = (w.values.row(j + 1) - w.values.row(j)).transpose();
        xn = x + f.sig * dw + f.b * dt;
        // Level 2 of the piecewise-linear lift is (1/2) dw (x) dw.
        P.noalias() = 0.5 * (f.sig * dw) * dw.transpose();
        for (int k = 1; k <= d; ++k) xn.noalias() += f.G[k] * P.col(k - 1);
        x = xn;
        if (!x.allFinite()) check_finite(x, "rde_endpoint", (j + 1) * dt);
        if (full) full->values.row(j + 1) = x.transpose();
    }
    x_out = x;
}

}  // namespace

Vec rde_endpoint(const VectorFieldSystem& vf, const GridPath& w, const Vec& a) {
    Vec x(vf.state_dim);
    fused_pl_steps(vf, w, a, nullptr, x);
    return x;
}

void rde_path(const VectorFieldSystem& vf, const GridPath& w, const Vec& a, GridPath& out) {
    if (out.dim != vf.state_dim || out.level != w.level) out = GridPath(vf.state_dim, w.level);
    Vec x(vf.state_dim);
    fused_pl_steps(vf, w, a, &out, x);
}

Mat jacobian_endpoint_matrix(const VectorFieldSystem& vf, const CameronMartinPath& h,
                             const Vec& a, const Projection& proj, int N) {
    const int level = std::max({h.level, N, 1});
    const HaarVariationBlock block =
        haar_variation_block(vf, h, a, proj, N, level, grid_intervals(level));
    return block.at_nodes.bottomRows(proj.sub_dim());
}

HaarVariationBlock haar_variation_block(const VectorFieldSystem& vf, const CameronMartinPath& h,
                                        const Vec& a, const Projection& proj, int N, int level,
                                        int record_stride) {
    if (proj.ambient_dim() != vf.state_dim)
        throw std::invalid_argument("haar_variation_block: projection dim mismatch");
    if (N < 1) throw std::invalid_argument("haar_variation_block: N must be >= 1");
    if (level < std::max(h.level, N))
        throw std::invalid_argument("haar_variation_block: level too coarse");
    const int e = vf.state_dim;
    const int d = vf.driver_dim;
    const HaarBasis basis(N, d);
    const int p = basis.size();
    const CameronMartinPath hf = h.refined(level);
    const int n = grid_intervals(level);
    const double dt = grid_mesh(level);
    if (record_stride < 1 || n % record_stride != 0)
        throw std::invalid_argument("haar_variation_block: bad record stride");
    const int sub = proj.sub_dim();
    const int records = n / record_stride + 1;

    // Direction slopes are the Haar step functions, constant per interval.
    std::vector<int> coord(p);
    Mat psi(n, p);
    for (int c = 0; c < p; ++c) {
        const HaarIndex idx = basis.index(c);
        coord[c] = idx.i - 1;
        for (int j = 0; j < n; ++j) psi(j, c) = haar_psi(idx, (j + 0.5) * dt);
    }

    HaarVariationBlock out;
    out.record_stride = record_stride;
    out.base = GridPath(e, level);
    out.base.values.row(0) = a.transpose();
    out.at_nodes = Mat::Zero(records * sub, p);

    FieldEval f(e, d, false);
    Vec x = a;
    Mat X1 = Mat::Zero(e, p);
    Vec u(d), xs(e);
    Mat Vl = Mat::Zero(d, p), Xs(e, p), A(e, e);
    Vec kx[4];
    Mat kX[4];
    for (auto& v : kx) v.resize(e);
    for (auto& m : kX) m.resize(e, p);
    auto rhs = [&](int stage) {
        eval_fields(vf, xs, true, false, f);
        A = f.G[0];
        for (int i = 1; i <= d; ++i) A.noalias() += u(i - 1) * f.G[i];
        kx[stage] = f.b;
        kx[stage].noalias() += f.sig * u;
        kX[stage].noalias() = A * Xs;
        kX[stage].noalias() += f.sig * Vl;
    };
    for (int j = 0; j < n; ++j) {
        u = (hf.knots.row(j + 1) - hf.knots.row(j)).transpose() / dt;
        Vl.setZero();
        for (int c = 0; c < p; ++c) Vl(coord[c], c) = psi(j, c);
        xs = x;
        Xs = X1;
        rhs(0);
        xs = x + 0.5 * dt * kx[0];
        Xs = X1 + 0.5 * dt * kX[0];
        rhs(1);
        xs = x + 0.5 * dt * kx[1];
        Xs = X1 + 0.5 * dt * kX[1];
        rhs(2);
        xs = x + dt * kx[2];
        Xs = X1 + dt * kX[2];
        rhs(3);
        const double cs = dt / 6.0;
        x += cs * (kx[0] + 2.0 * kx[1] + 2.0 * kx[2] + kx[3]);
        X1 += cs * (kX[0] + 2.0 * kX[1] + 2.0 * kX[2] + kX[3]);
        check_finite(x, "haar_variation_block", (j + 1) * dt);
        out.base.values.row(j + 1) = x.transpose();
        if ((j + 1) % record_stride == 0)
            out.at_nodes.middleRows(((j + 1) / record_stride) * sub, sub) = proj.rows * X1;
    }
    return out;
}

}  // namespace rplab
