#include "rplab/support.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "rplab/rng.hpp"

namespace rplab {

namespace {

constexpr double kZ99 = 2.3263478740408408;

// One-sided 99% Wilson lower bound for a proportion at effective count n.
double wilson_lower(double p, double n) {
    if (n <= 0.0) return 0.0;
    const double z2 = kZ99 * kZ99;
    const double denom = 1.0 + z2 / n;
    const double center = p + z2 / (2.0 * n);
    const double rad = kZ99 * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n));
    return std::max(0.0, (center - rad) / denom);
}

ResidualSummary summarize(std::vector<double> v) {
    ResidualSummary s;
    if (v.empty()) return s;
    std::sort(v.begin(), v.end());
    s.min = v.front();
    s.max = v.back();
    s.median = v[v.size() / 2];
    s.mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    return s;
}

// Shared state for one fit: the target pinned to the solve grid, the Haar
// parameterization, and the adjoint gradient machinery.
struct FitProblem {
    const VectorFieldSystem& vf;
    Vec a;
    Vec b;
    const Projection& proj;
    const GridPath& target;
    HaarBasis basis;
    int level;    // solve grid level
    int stride;   // solve nodes per target interval
    double rho;

    FitProblem(const VectorFieldSystem& vf_, const Vec& a_, const Vec& b_,
               const Projection& proj_, const GridPath& target_, int N, double rho_)
        : vf(vf_),
          a(a_),
          b(b_),
          proj(proj_),
          target(target_),
          basis(N, vf_.driver_dim),
          level(std::max(N, target_.level)),
          stride(1 << (level - target_.level)),
          rho(rho_) {
        if (target.dim != proj.sub_dim())
            throw std::invalid_argument("fit_admissible_skeleton: target dim mismatch");
        if (proj.ambient_dim() != vf.state_dim)
            throw std::invalid_argument("fit_admissible_skeleton: projection dim mismatch");
    }

    CameronMartinPath control(const Vec& coeffs) const { return basis.combine(coeffs, level); }

    // Solver workspaces reused across the many evaluations of one fit.
    mutable GridPath x_buf;
    mutable RoughFlow flow_buf;

    // residual vector r_j = Pi x(t_j) - y_j at the target nodes.
    void residuals(const GridPath& x, Mat& r) const {
        const int nt = target.points();
        r.resize(nt, proj.sub_dim());
        for (int j = 0; j < nt; ++j)
            r.row(j) = (proj.rows * x.values.row(j * stride).transpose()).transpose() -
                       target.values.row(j);
    }

    double objective_terms(const GridPath& x, double* sup_out, double* gap_out) const {
        Mat r;
        residuals(x, r);
        const double sup = r.rowwise().norm().maxCoeff();
        const Vec end = proj.rows * x.values.row(x.points() - 1).transpose() - b;
        const double gap = end.norm();
        if (sup_out) *sup_out = sup;
        if (gap_out) *gap_out = gap;
        return sup * sup + rho * gap * gap;
    }

    double objective(const Vec& coeffs) const {
        solve_skeleton(vf, control(coeffs), a, x_buf);
        return objective_terms(x_buf, nullptr, nullptr);
    }

    // Gradient of sum_t <v_t, Pi x(t_node)> through the first variation:
    // the Haar coefficients of s -> sum_{t >= s} v_t^T Pi J_t J_s^{-1} sigma(x_s),
    // assembled with one backward suffix sweep over the flow.
    // `node_weights` holds (solve grid node, weight vector in the subspace).
    Vec weighted_gradient(const RoughFlow& flow,
                          const std::vector<std::pair<int, Vec>>& node_weights) const {
        const int n = grid_intervals(level);
        const int d = vf.driver_dim;
        const int e = vf.state_dim;
        const double mesh = grid_mesh(level);

        // A_s = sigma(x_s)^T J_s^{-T}, evaluated once per node.
        std::vector<Mat> A(n + 1, Mat(d, e));
        Vec xs(e), col(e);
        for (int s = 0; s <= n; ++s) {
            xs = flow.base.values.row(s).transpose();
            const Mat jt = flow.Jinv[s].transpose();
            for (int i = 1; i <= d; ++i) {
                vf.field(i, xs, col);
                A[s].row(i - 1) = (jt.transpose() * col).transpose();
            }
        }
        // Backward sweep: S_{i+1} = sum_{t >= i+1} J_t^T Pi^T v_t applies to
        // both trapezoid endpoints of interval i.
        Mat pull_rows = Mat::Zero(n + 1, e);
        for (const auto& [node, v] : node_weights)
            pull_rows.row(node) +=
                (flow.J[node].transpose() * (proj.rows.transpose() * v)).transpose();
        Vec S = Vec::Zero(e);
        Mat avg = Mat::Zero(n, d);
        for (int i = n - 1; i >= 0; --i) {
            S += pull_rows.row(i + 1).transpose();
            avg.row(i) = (0.5 * mesh) * ((A[i] * S) + (A[i + 1] * S)).transpose();
        }
        Mat prefix = Mat::Zero(n + 1, d);
        for (int s = 0; s < n; ++s) prefix.row(s + 1) = prefix.row(s) + avg.row(s);

        Vec grad(basis.size());
        for (int c = 0; c < basis.size(); ++c) {
            const HaarIndex idx = basis.index(c);
            const int coord = idx.i - 1;
            if (idx.n == 0) {
                grad(c) = prefix(n, coord);
            } else {
                const int span = 1 << (level - idx.n);
                const int lo = (2 * idx.m - 2) * span;
                const double amp = std::exp2(0.5 * (idx.n - 1));
                grad(c) = amp * ((prefix(lo + span, coord) - prefix(lo, coord)) -
                                 (prefix(lo + 2 * span, coord) - prefix(lo + span, coord)));
            }
        }
        return grad;
    }

    double obj_grad(const Vec& coeffs, Vec& grad) const {
        const CameronMartinPath h = control(coeffs);
        solve_flow_ode(vf, h, a, level, flow_buf);
        const RoughFlow& flow = flow_buf;
        Mat r;
        residuals(flow.base, r);
        int argmax = 0;
        double sup = 0.0;
        for (int j = 0; j < r.rows(); ++j) {
            const double nj = r.row(j).norm();
            if (nj > sup) {
                sup = nj;
                argmax = j;
            }
        }
        const Vec end = proj.rows * flow.base.values.row(flow.base.points() - 1).transpose() - b;
        std::vector<std::pair<int, Vec>> weights;
        weights.emplace_back(argmax * stride, Vec(2.0 * r.row(argmax).transpose()));
        weights.emplace_back(grid_intervals(level), Vec(2.0 * rho * end));
        grad = weighted_gradient(flow, weights);
        return sup * sup + rho * end.squaredNorm();
    }

    // Linearization of the residual map at c0: r(c) ~ r0 + M (c - c0) with M
    // the first-variation Jacobian over the Haar basis, recorded at every
    // target node, plus the endpoint block. One joint RK4 block solve.
    struct Linearization {
        Mat M;   // (nt * e') x p
        Mat E;   // e' x p endpoint rows
        Vec r0;  // flattened residuals at c0
        Vec g0;  // endpoint gap vector at c0
    };

    void linearize(const Vec& c0, Linearization& lin) const {
        const int nt = target.points();
        const int sub = proj.sub_dim();
        const HaarVariationBlock block =
            haar_variation_block(vf, control(c0), a, proj, basis.N, level, stride);
        lin.M = block.at_nodes;
        lin.E = block.at_nodes.bottomRows(sub);
        lin.r0.resize(nt * sub);
        for (int j = 0; j < nt; ++j)
            lin.r0.segment(j * sub, sub) =
                proj.rows * block.base.values.row(j * stride).transpose() -
                target.values.row(j).transpose();
        lin.g0 = proj.rows * block.base.values.row(block.base.points() - 1).transpose() - b;
    }

    // Residuals and gap at c without the Jacobian (for factor reuse).
    void evaluate_into(const Vec& coeffs, Vec& r0, Vec& g0) const {
        solve_skeleton(vf, control(coeffs), a, x_buf);
        const int nt = target.points();
        const int sub = proj.sub_dim();
        r0.resize(nt * sub);
        for (int j = 0; j < nt; ++j)
            r0.segment(j * sub, sub) =
                proj.rows * x_buf.values.row(j * stride).transpose() -
                target.values.row(j).transpose();
        g0 = proj.rows * x_buf.values.row(x_buf.points() - 1).transpose() - b;
    }

    // Newton steps on the phi^{0,1} coefficients closing the endpoint gap.
    void endpoint_cleanup(Vec& coeffs) const {
        const int d = vf.driver_dim;
        for (int pass = 0; pass < 8; ++pass) {
            const CameronMartinPath h = control(coeffs);
            solve_flow_ode(vf, h, a, level, flow_buf);
            const RoughFlow& flow = flow_buf;
            const Vec end =
                proj.rows * flow.base.values.row(flow.base.points() - 1).transpose() - b;
            if (end.norm() <= 1e-13) return;
            Mat B(proj.sub_dim(), d);
            for (int r = 0; r < proj.sub_dim(); ++r) {
                Vec unit = Vec::Zero(proj.sub_dim());
                unit(r) = 1.0;
                const Vec g = weighted_gradient(flow, {{grid_intervals(level), unit}});
                B.row(r) = g.head(d).transpose();  // phi^{0,1} columns come first
            }
            const Vec delta = B.colPivHouseholderQr().solve(-end);
            if (!delta.allFinite() || delta.norm() > 1e6) return;
            coeffs.head(d) += delta;
        }
    }
};

// Compact dense BFGS with Armijo backtracking.
struct BfgsResult {
    Vec coeffs;
    double objective = 0.0;
    int iterations = 0;
};

// H0 seeds the inverse-Hessian approximation; the Haar parameterization is
// badly scaled across levels (curvature falls like 4^-n), so a diagonal
// preconditioner saves most of the warm-up iterations.
template <typename ValueFn, typename GradFn>
BfgsResult bfgs_minimize(ValueFn&& value_at, GradFn&& value_grad, Vec start, int max_iterations,
                         double grad_tol, double min_improve, const Vec& H0) {
    const int p = static_cast<int>(start.size());
    Mat H = H0.asDiagonal();
    Vec c = std::move(start);
    Vec g(p);
    double J = value_grad(c, g);
    if (!std::isfinite(J)) throw std::runtime_error("fit_admissible_skeleton: non-finite start");
    BfgsResult result;
    int iter = 0;
    int stalls = 0;  // the sup makes J nonsmooth; stop on stalled descent
    for (; iter < max_iterations; ++iter) {
        if (g.cwiseAbs().maxCoeff() <= grad_tol * (1.0 + std::abs(J))) break;
        Vec dir = -(H * g);
        double slope = g.dot(dir);
        if (!(slope < 0.0)) {
            H = H0.asDiagonal();
            dir = -(H * g);
            slope = g.dot(dir);
        }
        double alpha = 1.0;
        double J_new = 0.0;
        bool ok = false;
        for (int halvings = 0; halvings < 25; ++halvings) {
            J_new = value_at(c + alpha * dir);
            if (std::isfinite(J_new) && J_new <= J + 1e-4 * alpha * slope) {
                ok = true;
                break;
            }
            alpha *= 0.5;
        }
        if (!ok) break;
        if (J - J_new <= min_improve * (std::abs(J) + 1e-30)) {
            if (++stalls >= 3) break;
        } else {
            stalls = 0;
        }
        const Vec c_new = c + alpha * dir;
        Vec g_new(p);
        const double J_check = value_grad(c_new, g_new);
        const Vec s = c_new - c;
        const Vec y = g_new - g;
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            const Vec Hy = H * y;
            const double yHy = y.dot(Hy);
            H += ((sy + yHy) / (sy * sy)) * (s * s.transpose());
            H -= (Hy * s.transpose() + s * Hy.transpose()) / sy;
        }
        c = c_new;
        g = g_new;
        J = J_check;
    }
    result.coeffs = std::move(c);
    result.objective = J;
    result.iterations = iter;
    return result;
}

}  // namespace

SkeletonFit fit_admissible_skeleton(const VectorFieldSystem& vf, const Vec& a, const Vec& b,
                                    const Projection& proj, const GridPath& target, int N,
                                    double rho, std::uint64_t seed, const FitOptions& options) {
    if (N < 1) throw std::invalid_argument("fit_admissible_skeleton: N must be >= 1");
    if (!(rho > 0.0))
        throw std::invalid_argument("fit_admissible_skeleton: penalty weight must be positive");
    FitProblem problem(vf, a, b, proj, target, N, rho);
    const int p = problem.basis.size();

    std::vector<Vec> starts;
    if (options.warm_start) {
        if (options.warm_start->size() > p)
            throw std::invalid_argument("fit_admissible_skeleton: warm start too large");
        Vec w0 = Vec::Zero(p);
        w0.head(options.warm_start->size()) = *options.warm_start;
        starts.push_back(std::move(w0));
    } else if (vf.driver_dim == proj.sub_dim()) {
        // Interpolation start: read the target increments as a control.
        CameronMartinPath guess(vf.driver_dim, target.level);
        guess.knots = target.values.rowwise() - target.values.row(0);
        starts.push_back(problem.basis.coefficients(guess));
    } else {
        starts.push_back(Vec::Zero(p));
    }
    const Vec anchor = starts.front();
    const double spread = 0.1 * (1.0 + anchor.cwiseAbs().maxCoeff());
    for (int s = static_cast<int>(starts.size()); s < options.multi_starts; ++s) {
        Rng rng(derive_seed(seed, s));
        Vec c(p);
        for (int j = 0; j < p; ++j) c(j) = anchor(j) + spread * rng.gaussian();
        starts.push_back(std::move(c));
    }

    SkeletonFit fit;
    fit.N = N;
    fit.rho = rho;
    const auto true_value = [&](const Vec& c) { return problem.objective(c); };
    const auto true_grad = [&](const Vec& c, Vec& g) { return problem.obj_grad(c, g); };

    // Gauss-Newton descent on the least-squares relaxation from every start
    // (one exact step per relinearization; the factorization is shared once
    // the residual map is detected to be affine), then a quasi-Newton polish
    // of the sup objective from the best of them.
    FitProblem::Linearization lin;
    Eigen::LLT<Mat> llt;
    Mat Mt;  // cached M^T for the shared-factor path
    Mat Et;
    bool have_factor = false;
    bool affine = false;
    Vec H0 = Vec::Ones(p);

    BfgsResult best;
    bool have_best = false;
    for (const Vec& start : starts) {
        Vec c = start;
        double J = problem.objective(c);
        int gn_steps = 0;
        for (int pass = 0; pass < 4; ++pass) {
            if (!have_factor || !affine) {
                problem.linearize(c, lin);
                Mat A = lin.M.transpose() * lin.M;
                A.noalias() += rho * lin.E.transpose() * lin.E;
                A.diagonal().array() += 1e-12 * (1.0 + A.diagonal().maxCoeff());
                llt.compute(A);
                if (llt.info() != Eigen::Success) break;
                H0 = A.diagonal().cwiseInverse();
                Mt = lin.M.transpose();
                Et = lin.E.transpose();
                have_factor = true;
            } else {
                problem.evaluate_into(c, lin.r0, lin.g0);
            }
            const Vec step = llt.solve(-(Mt * lin.r0 + rho * (Et * lin.g0)));
            double alpha = 1.0;
            bool accepted = false;
            for (int halvings = 0; halvings < 8; ++halvings) {
                const double J_try = problem.objective(c + alpha * step);
                if (std::isfinite(J_try) && J_try < J) {
                    // Affинity probe: predicted residuals match the actual
                    // ones only when the residual map is affine in c.
                    if (!affine && alpha == 1.0) {
                        Vec r_act, g_act;
                        problem.evaluate_into(c + step, r_act, g_act);
                        const Vec r_pred = lin.r0 + lin.M * step;
                        const double scale =
                            1.0 + lin.r0.cwiseAbs().maxCoeff();
                        affine =
                            (r_act - r_pred).cwiseAbs().maxCoeff() <= 1e-9 * scale;
                    }
                    c += alpha * step;
                    J = J_try;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            ++gn_steps;
            if (!accepted) break;
            if (affine) break;  // the exact least-squares optimum in one step
        }
        fit.start_objectives.push_back(J);
        fit.iterations_total += gn_steps;
        ++fit.starts_run;
        if (!have_best || J < best.objective) {
            best.coeffs = std::move(c);
            best.objective = J;
            have_best = true;
        }
    }
    if (!have_best) throw std::runtime_error("fit_admissible_skeleton: every start failed");
    BfgsResult polish =
        bfgs_minimize(true_value, true_grad, std::move(best.coeffs),
                      std::min(options.max_iterations, 40), options.gradient_tol, 1e-10, H0);
    fit.iterations_total += polish.iterations;
    best.coeffs = std::move(polish.coeffs);
    best.objective = polish.objective;

    problem.endpoint_cleanup(best.coeffs);

    const CameronMartinPath h = problem.control(best.coeffs);
    const GridPath x = solve_skeleton(vf, h, a);
    double sup = 0.0, gap = 0.0;
    fit.objective = problem.objective_terms(x, &sup, &gap);
    fit.residual_sup = sup;
    fit.endpoint_gap = gap;

    GridPath projected(target.dim, target.level);
    for (int j = 0; j < target.points(); ++j)
        projected.values.row(j) =
            (proj.rows * x.values.row(j * problem.stride).transpose()).transpose();
    fit.residual_hoelder = hoelder_distance(projected, target, options.hoelder_beta);

    fit.control = dyadic_project(h, N);
    fit.surjectivity =
        surjectivity_check(gram_deterministic(vf, h, a, proj, N), options.tau);
    fit.admissible = fit.endpoint_gap <= options.admissible_gap_tol && fit.surjectivity.surjective;
    return fit;
}

SupportReport support_coverage_test(const VectorFieldSystem& vf, const Vec& a, const Vec& b,
                                    const Projection& proj, const BridgeEnsemble& ensemble,
                                    int N, double delta, double tau, std::uint64_t seed,
                                    const CoverageOptions& options) {
    if (ensemble.paths.empty())
        throw std::invalid_argument("support_coverage_test: empty ensemble");
    const long m =
        std::min<long>(options.max_fit_samples, static_cast<long>(ensemble.paths.size()));

    SupportReport report;
    report.N = N;
    report.delta = delta;
    report.tau = tau;
    report.rho = options.rho;
    report.epsilon = ensemble.epsilon;
    report.fitted_samples = m;

    FitOptions fit_opts = options.fit;
    fit_opts.tau = tau;

    std::vector<double> weights(ensemble.weights.begin(), ensemble.weights.begin() + m);
    double wsum = 0.0;
    for (double w : weights) wsum += w;
    for (double& w : weights) w /= wsum;

    std::vector<double> res_coarse, res_fine;
    double covered = 0.0;
    double wsq = 0.0;
    for (long i = 0; i < m; ++i) {
        const GridPath& path = ensemble.paths[i];
        GridPath target(proj.sub_dim(), path.level);
        for (int j = 0; j < path.points(); ++j)
            target.values.row(j) = (proj.rows * path.values.row(j).transpose()).transpose();

        const SkeletonFit fit = fit_admissible_skeleton(vf, a, b, proj, target, N, options.rho,
                                                        derive_seed(seed, i), fit_opts);
        res_coarse.push_back(fit.residual_sup);
        report.per_sample_residuals.push_back(fit.residual_sup);
        const bool hit = fit.residual_sup <= delta && fit.endpoint_gap <= ensemble.epsilon &&
                         fit.surjectivity.surjective;
        if (hit) covered += weights[i];
        wsq += weights[i] * weights[i];

        if (options.run_finer_level) {
            FitOptions warm = fit_opts;
            warm.warm_start = FitProblem(vf, a, b, proj, target, N + 2, options.rho)
                                  .basis.coefficients(fit.control);
            const SkeletonFit finer = fit_admissible_skeleton(
                vf, a, b, proj, target, N + 2, options.rho, derive_seed(seed, i), warm);
            res_fine.push_back(finer.residual_sup);
        }
    }
    report.coverage = covered;
    report.coverage_lower_99 = wilson_lower(covered, 1.0 / wsq);
    report.effective_samples = 1.0 / wsq;
    report.residuals = summarize(res_coarse);
    report.residuals_finer = summarize(res_fine);
    return report;
}

SupportReport tube_mass_test(const VectorFieldSystem& vf, const Vec& a, const Vec& b,
                             const Projection& proj, const CameronMartinPath& h_admissible,
                             double eta, const BridgeEnsemble& ensemble, double tau, int N) {
    if (!(eta > 0.0)) throw std::invalid_argument("tube_mass_test: eta must be positive");
    if (ensemble.paths.empty()) throw std::invalid_argument("tube_mass_test: empty ensemble");

    const SurjectivityReport surj =
        surjectivity_check(gram_deterministic(vf, h_admissible, a, proj, N), tau);
    if (!surj.surjective)
        throw std::invalid_argument(
            "tube_mass_test: control is not admissible (endpoint derivative not surjective)");
    const int level = std::max(h_admissible.level, ensemble.K);
    const GridPath skel = solve_skeleton(vf, h_admissible.refined(level), a);
    const Vec end = proj.rows * skel.values.row(skel.points() - 1).transpose() - b;
    if (end.norm() > ensemble.epsilon)
        throw std::invalid_argument(
            "tube_mass_test: control is not admissible (endpoint misses the target)");

    // Projected skeleton on the ensemble grid.
    const int stride = 1 << (level - ensemble.K);
    GridPath pskel(proj.sub_dim(), ensemble.K);
    for (int j = 0; j < pskel.points(); ++j)
        pskel.values.row(j) =
            (proj.rows * skel.values.row(j * stride).transpose()).transpose();

    double mass = 0.0;
    double wsq = 0.0;
    for (std::size_t i = 0; i < ensemble.paths.size(); ++i) {
        const GridPath& path = ensemble.paths[i];
        double sup = 0.0;
        for (int j = 0; j < path.points(); ++j) {
            const Vec y = proj.rows * path.values.row(j).transpose();
            sup = std::max(sup, (y - pskel.values.row(j).transpose()).norm());
        }
        if (sup <= eta) mass += ensemble.weights[i];
        wsq += ensemble.weights[i] * ensemble.weights[i];
    }

    SupportReport report;
    report.N = N;
    report.tau = tau;
    report.eta = eta;
    report.epsilon = ensemble.epsilon;
    report.tube_mass = mass;
    report.effective_samples = 1.0 / wsq;
    report.tube_mass_lower_99 = wilson_lower(mass, report.effective_samples);
    return report;
}

std::string SupportReport::to_json() const {
    nlohmann::json j;
    j["coverage"] = coverage;
    j["coverage_lower_99"] = coverage_lower_99;
    j["fitted_samples"] = fitted_samples;
    j["residuals"] = {{"min", residuals.min},
                      {"median", residuals.median},
                      {"mean", residuals.mean},
                      {"max", residuals.max}};
    j["residuals_finer"] = {{"min", residuals_finer.min},
                            {"median", residuals_finer.median},
                            {"mean", residuals_finer.mean},
                            {"max", residuals_finer.max}};
    j["tube_mass"] = tube_mass;
    j["tube_mass_lower_99"] = tube_mass_lower_99;
    j["effective_samples"] = effective_samples;
    j["params"] = {{"N", N},     {"delta", delta}, {"eta", eta},
                   {"tau", tau}, {"rho", rho},     {"epsilon", epsilon}};
    return j.dump(2);
}

void SupportReport::write_residual_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_residual_csv: cannot open " + path);
    out << "sample,residual_sup\n";
    for (std::size_t i = 0; i < per_sample_residuals.size(); ++i) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%zu,%.16e\n", i, per_sample_residuals[i]);
        out << buf;
    }
}

}  // namespace rplab
