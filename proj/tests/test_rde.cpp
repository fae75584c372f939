#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "rplab/rde.hpp"
#include "rplab/rng.hpp"

using namespace rplab;

namespace {

CameronMartinPath linear_path(const Vec& v, int level) {
    CameronMartinPath h(static_cast<int>(v.size()), level);
    for (int j = 0; j < h.points(); ++j) h.knots.row(j) = (h.t(j) * v).transpose();
    return h;
}

CameronMartinPath unit_time(int level) {
    Vec one(1);
    one << 1.0;
    return linear_path(one, level);
}

CameronMartinPath random_cm(int dim, int level, std::uint64_t seed) {
    Rng rng(seed);
    CameronMartinPath h(dim, level);
    for (int j = 1; j < h.points(); ++j)
        for (int c = 0; c < dim; ++c)
            h.knots(j, c) = h.knots(j - 1, c) + rng.gaussian() * std::sqrt(grid_mesh(level));
    return h;
}

Vec scalar(double v) {
    Vec a(1);
    a << v;
    return a;
}

}  // namespace

TEST_CASE("built-in systems validate and unknown names are rejected") {
    for (const auto& name : builtin_system_names()) CHECK_NOTHROW(builtin_system(name));
    CHECK_THROWS_AS(builtin_system("nope"), std::invalid_argument);
}

TEST_CASE("derivative validation catches a wrong jacobian") {
    VectorFieldSystem bad = builtin_system("sine");
    bad.name = "broken";
    bad.jacobian = [](int, const Vec&, Mat& out) { out = Mat::Constant(1, 1, 0.123); };
    CHECK_THROWS_AS(validate_derivatives(bad), std::invalid_argument);
}

TEST_CASE("skeleton solver on the exponential system") {
    const auto& vf = builtin_system("geometric");
    const GridPath x = solve_skeleton(vf, unit_time(10), scalar(1.0));
    CHECK(std::abs(x.values(x.points() - 1, 0) - std::exp(1.0)) < 1e-6);
}

TEST_CASE("skeleton solver with zero control and zero drift stays put") {
    const auto& vf = builtin_system("geometric");
    const GridPath x = solve_skeleton(vf, CameronMartinPath(1, 6), scalar(0.7));
    CHECK((x.values.array() - 0.7).abs().maxCoeff() == 0.0);
}

TEST_CASE("skeleton solver on the kolmogorov system") {
    // dx1 = dh, dx2 = x1 dt with h_t = t from 0: x = (t, t^2/2) by hand.
    const auto& vf = builtin_system("kolmogorov");
    const GridPath x = solve_skeleton(vf, unit_time(8), Vec::Zero(2));
    CHECK(std::abs(x.values(x.points() - 1, 0) - 1.0) < 1e-12);
    CHECK(std::abs(x.values(x.points() - 1, 1) - 0.5) < 1e-12);
}

TEST_CASE("rk4 shows fourth-order decay on the exponential system") {
    const auto& vf = builtin_system("geometric");
    auto err_at = [&](int K) {
        const GridPath x = solve_skeleton(vf, unit_time(K), scalar(1.0));
        return std::abs(x.values(x.points() - 1, 0) - std::exp(1.0));
    };
    const double ratio = err_at(4) / err_at(5);
    CHECK(ratio > 12.0);
    CHECK(ratio < 20.0);
}

TEST_CASE("rde solver is exact for constant fields") {
    const auto& vf = builtin_system("additive2");
    const GridPath w = brownian_sample(2, 8, 17);
    const RoughPath rp = dyadic_lift(w, 8);
    Vec a(2);
    a << 0.3, -0.8;
    const GridPath x = solve_rde(vf, rp, a);
    for (int j = 0; j < x.points(); ++j)
        CHECK((x.values.row(j) - (w.values.row(j) + a.transpose())).cwiseAbs().maxCoeff() <
              1e-12);
}

TEST_CASE("rde solver agrees with the skeleton on lifted controls") {
    const auto& vf = builtin_system("geometric");
    const CameronMartinPath h = unit_time(10);
    const GridPath via_ode = solve_skeleton(vf, h, scalar(1.0));
    const GridPath via_rde = solve_rde(vf, lift_pl(h), scalar(1.0));
    CHECK(sup_distance(via_ode, via_rde) < 1e-4);
}

TEST_CASE("fused endpoint matches the rough solve") {
    const auto& vf = builtin_system("kolmogorov");
    const GridPath w = brownian_sample(1, 7, 5);
    const Vec via_full = solve_rde(vf, dyadic_lift(w, 7), Vec::Zero(2)).values.row(1 << 7);
    const Vec via_fused = rde_endpoint(vf, w, Vec::Zero(2));
    CHECK((via_full - via_fused).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("strong error of the geometric system decays with level") {
    const auto& vf = builtin_system("geometric");
    const int n_samples = 60;
    const int K_lo = 5, K_hi = 9;
    std::vector<double> log_err;
    for (int K = K_lo; K <= K_hi; ++K) {
        double acc = 0.0;
        for (int i = 0; i < n_samples; ++i) {
            const GridPath w = brownian_sample(1, K_hi, 3000 + i);
            const GridPath wc = dyadic_project(w, K).as_grid_path();
            const double endpoint = rde_endpoint(vf, wc, scalar(1.0))(0);
            acc += std::abs(endpoint - std::exp(w.values(w.points() - 1, 0)));
        }
        log_err.push_back(std::log2(acc / n_samples));
    }
    // Least-squares slope of log2 error against K.
    const int n = static_cast<int>(log_err.size());
    double sx = 0, sy = 0, sxy = 0, sxx = 0;
    for (int i = 0; i < n; ++i) {
        sx += K_lo + i;
        sy += log_err[i];
        sxy += (K_lo + i) * log_err[i];
        sxx += (K_lo + i) * (K_lo + i);
    }
    const double slope = -(n * sxy - sx * sy) / (n * sxx - sx * sx);
    CHECK(slope > 0.6);
    CHECK(slope < 1.4);
}

TEST_CASE("first variation on the exponential system") {
    const auto& vf = builtin_system("geometric");
    const CameronMartinPath h = unit_time(10);
    const auto bundle = solve_variational(vf, h, scalar(1.0), {h}, {{0, 0}});
    const int end = bundle.base.points() - 1;
    // Variation-of-constants oracle: xi1_t = a e^{h_t} l_t.
    CHECK(std::abs(bundle.xi1[0].values(end, 0) - std::exp(1.0)) < 1e-5);
    // Second directional derivative of a e^{h_t + eps l_t}: a e^{h_t} l_t^2.
    CHECK(std::abs(bundle.xi2[0].values(end, 0) - std::exp(1.0)) < 1e-4);
    // Jacobian flow J_1 = e^{h_1}.
    CHECK(std::abs(bundle.jacobian[end](0, 0) - std::exp(1.0)) < 1e-5);
}

TEST_CASE("zero direction gives zero variations") {
    const auto& vf = builtin_system("sine");
    const CameronMartinPath h = random_cm(1, 6, 3);
    const CameronMartinPath zero(1, 6);
    const auto bundle = solve_variational(vf, h, scalar(0.2), {zero, h}, {{0, 1}});
    CHECK(bundle.xi1[0].values.cwiseAbs().maxCoeff() == 0.0);
    CHECK(bundle.xi2[0].values.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("xi2 must be requested with second derivatives supplied") {
    VectorFieldSystem vf = builtin_system("sine");
    vf.has_hessian = false;
    const CameronMartinPath h = unit_time(4);
    CHECK_THROWS_AS(solve_variational(vf, h, scalar(0.1), {h}, {{0, 0}}),
                    std::invalid_argument);
}

TEST_CASE("finite-difference consistency of the variations") {
    const auto& vf = builtin_system("sine");
    const Vec a = scalar(0.3);
    const CameronMartinPath h = random_cm(1, 6, 11);
    const CameronMartinPath l = random_cm(1, 6, 12);
    const auto bundle = solve_variational(vf, h, a, {l}, {{0, 0}});
    const int end = bundle.base.points() - 1;
    const Vec xi1 = bundle.xi1[0].values.row(end).transpose();
    const Vec xi2 = bundle.xi2[0].values.row(end).transpose();

    auto endpoint_at = [&](double eps) {
        CameronMartinPath shifted = h;
        shifted.knots += eps * l.knots;
        const GridPath x = solve_skeleton(vf, shifted, a);
        return Vec(x.values.row(end).transpose());
    };

    // Central difference with eps = 1e-3 matches xi1 to relative 1e-4, and
    // the C eps^2 error constant is stable across eps.
    double prev_c = -1.0;
    for (const double eps : {1e-2, 1e-3}) {
        const Vec fd = (endpoint_at(eps) - endpoint_at(-eps)) / (2.0 * eps);
        const double err = (fd - xi1).norm();
        const double c = err / (eps * eps);
        if (prev_c > 0.0) CHECK(c < 10.0 * prev_c);
        prev_c = c;
        if (eps == 1e-3) CHECK(err / std::max(1.0, xi1.norm()) < 1e-4);
    }

    const double eps2 = 1e-2;
    const Vec second =
        (endpoint_at(eps2) - 2.0 * endpoint_at(0.0) + endpoint_at(-eps2)) / (eps2 * eps2);
    CHECK((second - xi2).norm() / std::max(1.0, xi2.norm()) < 1e-3);
}

TEST_CASE("xi2 is symmetric and xi1 is linear in the direction") {
    const auto& vf = builtin_system("sine");
    const Vec a = scalar(-0.4);
    const CameronMartinPath h = random_cm(1, 5, 21);
    const CameronMartinPath l = random_cm(1, 5, 22);
    const CameronMartinPath lt = random_cm(1, 5, 23);
    const auto bundle = solve_variational(vf, h, a, {l, lt}, {{0, 1}, {1, 0}});
    CHECK((bundle.xi2[0].values - bundle.xi2[1].values).cwiseAbs().maxCoeff() < 1e-10);

    CameronMartinPath combo = l;
    combo.knots = 2.0 * l.knots + lt.knots;
    const auto lin = solve_variational(vf, h, a, {l, lt, combo}, {});
    const Mat expect = 2.0 * lin.xi1[0].values + lin.xi1[1].values;
    CHECK((lin.xi1[2].values - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("rough variational equations agree with the skeleton ones on lifts") {
    for (const char* name : {"geometric", "sine"}) {
        const auto& vf = builtin_system(name);
        const Vec a = scalar(name[0] == 'g' ? 1.0 : 0.2);
        const CameronMartinPath h = unit_time(10);
        const CameronMartinPath l = random_cm(1, 6, 31);
        const auto ode = solve_variational(vf, h, a, {l}, {{0, 0}});
        const auto rough = solve_variational_rough(vf, lift_pl(h, 10), a, {l}, {{0, 0}});
        CHECK(sup_distance(ode.base, rough.base) < 1e-4);
        CHECK(sup_distance(ode.xi1[0], rough.xi1[0]) < 1e-4);
        CHECK(sup_distance(ode.xi2[0], rough.xi2[0]) < 1e-3);
    }
}

TEST_CASE("rough first variation with constant fields is the direction integral") {
    const auto& vf = builtin_system("additive2");
    const RoughPath rp = dyadic_lift(brownian_sample(2, 7, 44), 7);
    const CameronMartinPath l = random_cm(2, 6, 45);
    const auto bundle = solve_variational_rough(vf, rp, Vec::Zero(2), {l}, {});
    const CameronMartinPath lf = l.refined(7);
    CHECK((bundle.xi1[0].values - lf.knots).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("first variation endpoint is continuous in the driver") {
    const auto& vf = builtin_system("sine");
    const Vec a = scalar(0.1);
    const BesovParams params(0.45, 6);
    const CameronMartinPath base = random_cm(1, 7, 51);
    const CameronMartinPath l = unit_time(7);
    const auto ref = solve_variational_rough(vf, lift_pl(base, 7), a, {l}, {});
    const Vec ref_end = ref.xi1[0].values.row(ref.base.points() - 1).transpose();

    double prev_dist = 1e100, prev_diff = 1e100;
    for (const double damp : {1.0, 0.5, 0.25, 0.125}) {
        CameronMartinPath pert = base;
        pert.knots += damp * 0.3 * random_cm(1, 7, 52).knots;
        const auto got = solve_variational_rough(vf, lift_pl(pert, 7), a, {l}, {});
        const Vec end = got.xi1[0].values.row(got.base.points() - 1).transpose();
        const double dist = besov_distance(lift_pl(pert, 7), lift_pl(base, 7), params);
        const double diff = (end - ref_end).norm();
        CHECK(dist < prev_dist);
        CHECK(diff < prev_diff);
        prev_dist = dist;
        prev_diff = diff;
    }
}

TEST_CASE("endpoint derivative matrix over the Haar basis") {
    // X = a + h: the phi^{0,1} column is 1, every mean-zero primitive gives 0.
    const auto& vf1 = builtin_system("additive");
    const Mat M1 = jacobian_endpoint_matrix(vf1, unit_time(4), scalar(0.0),
                                            Projection::identity(1), 4);
    CHECK(M1.rows() == 1);
    CHECK(M1.cols() == 16);
    CHECK(std::abs(M1(0, 0) - 1.0) < 1e-12);
    CHECK(M1.rightCols(15).cwiseAbs().maxCoeff() < 1e-12);

    // Degenerate start: the solution map is identically zero.
    const auto& vf2 = builtin_system("degenerate");
    const Mat M2 = jacobian_endpoint_matrix(vf2, unit_time(4), scalar(0.0),
                                            Projection::identity(1), 4);
    CHECK(M2.cwiseAbs().maxCoeff() == 0.0);

    // Kolmogorov: column for phi^{0,1} is (l_1, int l dt) = (1, 1/2).
    const auto& vf3 = builtin_system("kolmogorov");
    const Mat M3 = jacobian_endpoint_matrix(vf3, unit_time(4), Vec::Zero(2),
                                            Projection::identity(2), 4);
    CHECK(std::abs(M3(0, 0) - 1.0) < 1e-12);
    CHECK(std::abs(M3(1, 0) - 0.5) < 1e-12);
}
