#include "rplab/malliavin.hpp"

#include <cmath>
#include <functional>
#include <stdexcept>

#include <json.hpp>

namespace rplab {

GramMatrix GramMatrix::from_matrix(Mat C, int N) {
    if (C.rows() != C.cols()) throw std::logic_error("GramMatrix: not square");
    const double scale = std::max(1.0, C.cwiseAbs().maxCoeff());
    if ((C - C.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
        throw std::logic_error("GramMatrix: not symmetric to 1e-12");
    GramMatrix out;
    out.C = 0.5 * (C + C.transpose());
    out.N = N;
    Eigen::SelfAdjointEigenSolver<Mat> eig(out.C);
    out.lambda_min = eig.eigenvalues().minCoeff();
    out.lambda_max = eig.eigenvalues().maxCoeff();
    if (out.lambda_min < -1e-10 * scale)
        throw std::logic_error("GramMatrix: not positive semi-definite");
    return out;
}

GramMatrix gram_deterministic(const VectorFieldSystem& vf, const CameronMartinPath& h,
                              const Vec& a, const Projection& proj, int N) {
    const Mat M = jacobian_endpoint_matrix(vf, h, a, proj, N);
    return GramMatrix::from_matrix(M * M.transpose(), N);
}

SurjectivityReport surjectivity_check(const GramMatrix& gram, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("surjectivity_check: tau must be positive");
    SurjectivityReport report;
    report.lambda_min = gram.lambda_min;
    report.N = gram.N;
    report.tau = tau;
    report.surjective = gram.lambda_min >= tau;
    return report;
}

std::string SurjectivityReport::to_json(const Mat& matrix) const {
    nlohmann::json j;
    j["lambda_min"] = lambda_min;
    j["N"] = N;
    j["tau"] = tau;
    j["surjective"] = surjective;
    std::vector<double> flat;
    flat.reserve(matrix.size());
    for (int r = 0; r < matrix.rows(); ++r)
        for (int c = 0; c < matrix.cols(); ++c) flat.push_back(matrix(r, c));
    j["matrix"] = flat;
    return j.dump();
}

StochasticGram gram_stochastic(const VectorFieldSystem& vf, const RoughPath& rp, const Vec& a,
                               const Projection& proj) {
    if (proj.ambient_dim() != vf.state_dim)
        throw std::invalid_argument("gram_stochastic: projection dim mismatch");
    const RoughFlow flow = solve_flow_rough(vf, rp, a);
    const int e = vf.state_dim;
    const int n = rp.intervals();
    const double dt = grid_mesh(rp.level);

    // Composite Simpson over the grid samples of J^{-1} sigma sigma^T J^{-T}.
    auto integrand = [&](int j) -> Mat {
        const Vec x = flow.base.values.row(j).transpose();
        const Mat s = flow.Jinv[j] * vf.sigma(x);
        return s * s.transpose();
    };
    Mat acc = integrand(0) + integrand(n);
    for (int j = 1; j < n; ++j) acc += (j % 2 == 1 ? 4.0 : 2.0) * integrand(j);
    acc *= dt;   // dt is a power of two; scale first so constant integrands
    acc /= 3.0;  // come out exact after the single division

    const Mat inner = flow.J[n] * acc * flow.J[n].transpose();
    StochasticGram out;
    out.gram = GramMatrix::from_matrix(proj.rows * inner * proj.rows.transpose(), 0);
    out.max_flow_condition = flow.max_condition;
    out.flow_flagged = flow.max_condition > 1e12;
    (void)e;
    return out;
}

namespace {

using FieldFn = std::function<Vec(const Vec&)>;

Mat fd_jacobian(const FieldFn& f, const Vec& x, double step) {
    const int e = static_cast<int>(x.size());
    const int rows = static_cast<int>(f(x).size());
    Mat out(rows, e);
    for (int c = 0; c < e; ++c) {
        Vec xp = x, xm = x;
        xp(c) += step;
        xm(c) -= step;
        out.col(c) = (f(xp) - f(xm)) / (2.0 * step);
    }
    return out;
}

}  // namespace

Vec fd_bracket(const VectorFieldSystem& vf, int i, int j, const Vec& a) {
    if (i < 0 || i > vf.driver_dim || j < 0 || j > vf.driver_dim)
        throw std::invalid_argument("fd_bracket: field index out of range");
    const int e = vf.state_dim;
    auto make = [&vf, e](int idx) {
        return FieldFn([&vf, idx, e](const Vec& x) {
            Vec out(e);
            vf.field(idx, x, out);
            return out;
        });
    };
    const FieldFn Z = make(i);
    const FieldFn W = make(j);
    const double step = 1e-5;
    return fd_jacobian(W, a, step) * Z(a) - fd_jacobian(Z, a, step) * W(a);
}

HormanderReport hormander_check(const VectorFieldSystem& vf, const Vec& a, int L,
                                const Projection& proj) {
    if (L < 1 || L > 3) throw std::invalid_argument("hormander_check: L must be in {1,2,3}");
    if (proj.ambient_dim() != vf.state_dim)
        throw std::invalid_argument("hormander_check: projection dim mismatch");
    const double step = 1e-5;
    const int d = vf.driver_dim;
    const int e = vf.state_dim;

    std::vector<FieldFn> all_fields(d + 1);
    for (int i = 0; i <= d; ++i)
        all_fields[i] = [&vf, i, e](const Vec& x) {
            Vec out(e);
            vf.field(i, x, out);
            return out;
        };

    std::vector<FieldFn> generation(all_fields.begin() + 1, all_fields.end());  // Sigma_1
    HormanderReport report;
    report.depth = L;
    report.accumulated = Mat::Zero(proj.sub_dim(), proj.sub_dim());
    for (int k = 1; k <= L; ++k) {
        for (const FieldFn& Z : generation) {
            const Vec pz = proj.apply(Z(a));
            report.accumulated += pz * pz.transpose();
            ++report.bracket_count;
        }
        if (k == L) break;
        std::vector<FieldFn> next;
        next.reserve(generation.size() * (d + 1));
        for (const FieldFn& Z : generation)
            for (int i = 0; i <= d; ++i) {
                const FieldFn& Vi = all_fields[i];
                next.push_back([Z, Vi, step](const Vec& x) -> Vec {
                    // [Z, V_i](x) by finite-difference jacobians of both sides.
                    return fd_jacobian(Vi, x, step) * Z(x) - fd_jacobian(Z, x, step) * Vi(x);
                });
            }
        generation = std::move(next);
    }
    Eigen::SelfAdjointEigenSolver<Mat> eig(report.accumulated);
    report.lambda_min = eig.eigenvalues().minCoeff();
    report.spans = report.lambda_min > 1e-10;
    return report;
}

}  // namespace rplab
