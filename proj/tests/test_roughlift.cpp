#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "rplab/pathspace.hpp"
#include "rplab/rng.hpp"
#include "rplab/roughlift.hpp"

using namespace rplab;

namespace {

CameronMartinPath linear_path(const Vec& v, int level) {
    CameronMartinPath h(static_cast<int>(v.size()), level);
    for (int j = 0; j < h.points(); ++j) h.knots.row(j) = (h.t(j) * v).transpose();
    return h;
}

CameronMartinPath random_cm(int dim, int level, std::uint64_t seed) {
    Rng rng(seed);
    CameronMartinPath h(dim, level);
    for (int j = 1; j < h.points(); ++j)
        for (int c = 0; c < dim; ++c)
            h.knots(j, c) = h.knots(j - 1, c) + rng.gaussian() * std::sqrt(grid_mesh(level));
    return h;
}

}  // namespace

TEST_CASE("lift of a linear path") {
    Vec v(2);
    v << 1.0, 0.0;
    const RoughPath rp = lift_pl(linear_path(v, 4));
    Mat expected(2, 2);
    expected << 0.5, 0.0, 0.0, 0.0;
    CHECK((rp.level2(0, rp.intervals()) - expected).cwiseAbs().maxCoeff() < 1e-15);

    const RoughPath zero = lift_pl(CameronMartinPath(2, 3));
    CHECK(zero.values.cwiseAbs().maxCoeff() == 0.0);
    CHECK(zero.level2(0, zero.intervals()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("lift of two unit segments matches the Chen composition oracle") {
    CameronMartinPath h(2, 1);
    h.knots << 0.0, 0.0, 0.5, 0.0, 0.5, 0.5;
    // Oracle: compose the two closed-form segment lifts by hand.
    Mat w2a(2, 2), w2b(2, 2);
    w2a << 0.125, 0.0, 0.0, 0.0;  // (1/2) (0.5 e1) (x) (0.5 e1)
    w2b << 0.0, 0.0, 0.0, 0.125;
    Vec w1a(2), w1b(2);
    w1a << 0.5, 0.0;
    w1b << 0.0, 0.5;
    const Mat oracle = w2a + w2b + w1a * w1b.transpose();
    Mat expected(2, 2);
    expected << 0.125, 0.25, 0.0, 0.125;
    CHECK((oracle - expected).cwiseAbs().maxCoeff() < 1e-15);

    const RoughPath rp = lift_pl(h, 5);
    CHECK((rp.level2(0, rp.intervals()) - oracle).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("chen identity holds on every grid triple") {
    const RoughPath rp = lift_pl(random_cm(2, 5, 42));
    const int n = rp.intervals();
    double worst = 0.0;
    for (int s = 0; s < n; ++s)
        for (int u = s + 1; u <= n; ++u) {
            const Mat left = rp.level2(s, u);
            const Vec inc_su = rp.level1(s, u);
            for (int t = u + 1; t <= n; ++t) {
                const Mat whole = rp.level2(s, t);
                const Mat defect =
                    whole - left - rp.level2(u, t) - inc_su * rp.level1(u, t).transpose();
                const double scale = std::max(1.0, whole.cwiseAbs().maxCoeff());
                worst = std::max(worst, defect.cwiseAbs().maxCoeff() / scale);
            }
        }
    CHECK(worst < 1e-12);
}

TEST_CASE("shuffle identity: symmetric part is half the squared increment") {
    const RoughPath rp = lift_pl(random_cm(2, 6, 43));
    const int n = rp.intervals();
    double worst = 0.0;
    for (int s = 0; s < n; ++s)
        for (int t = s + 1; t <= n; ++t) {
            const Mat w2 = rp.level2(s, t);
            const Vec w1 = rp.level1(s, t);
            const Mat defect = 0.5 * (w2 + w2.transpose()) - 0.5 * w1 * w1.transpose();
            const double scale = std::max(1.0, w2.cwiseAbs().maxCoeff());
            worst = std::max(worst, defect.cwiseAbs().maxCoeff() / scale);
        }
    CHECK(worst < 1e-12);
}

TEST_CASE("brownian sampling contract") {
    const GridPath a = brownian_sample(2, 6, 7);
    const GridPath b = brownian_sample(2, 6, 7);
    CHECK((a.values - b.values).cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.values.row(0).cwiseAbs().maxCoeff() == 0.0);

    const int n_samples = 100000;
    double acc = 0.0, acc2 = 0.0;
    for (int i = 0; i < n_samples; ++i) {
        const GridPath w = brownian_sample(1, 4, 1000 + i);
        const double end = w.values(w.points() - 1, 0);
        acc += end;
        acc2 += end * end;
    }
    const double mean = acc / n_samples;
    const double var = acc2 / n_samples - mean * mean;
    // Gaussian oracle: Var(w_1) = 1, and the variance estimator has
    // standard error about sqrt(2/n).
    CHECK(std::abs(var - 1.0) < 3.0 * std::sqrt(2.0 / n_samples));
    CHECK(std::abs(mean) < 3.0 / std::sqrt(static_cast<double>(n_samples)));
}

TEST_CASE("dyadic lift of an already piecewise-linear path") {
    const CameronMartinPath h = random_cm(2, 3, 9);
    const GridPath g = h.refined(6).as_grid_path();
    const RoughPath via_grid = dyadic_lift(g, 3);
    const RoughPath direct = lift_pl(h, 6);
    CHECK((via_grid.values - direct.values).cwiseAbs().maxCoeff() == 0.0);
    for (int j = 0; j < via_grid.intervals(); ++j)
        CHECK((via_grid.level2_adj[j] - direct.level2_adj[j]).cwiseAbs().maxCoeff() == 0.0);
    CHECK_THROWS_AS(dyadic_lift(g, 7), std::invalid_argument);
}

TEST_CASE("dyadic lifts approach the finest lift") {
    const BesovParams params(0.45, 6);
    const int K = 9;
    const int n_samples = 20;
    double prev = 1e100;
    for (const int n : {2, 4, 6}) {
        double acc = 0.0;
        for (int i = 0; i < n_samples; ++i) {
            const GridPath w = brownian_sample(2, K, 500 + i);
            acc += besov_distance(dyadic_lift(w, n), dyadic_lift(w, K), params);
        }
        const double mean = acc / n_samples;
        CHECK(mean < prev);
        prev = mean;
    }
}

TEST_CASE("levy area statistic is centered") {
    const int n_samples = 3000;
    double acc = 0.0, acc2 = 0.0;
    for (int i = 0; i < n_samples; ++i) {
        const GridPath w = brownian_sample(2, 6, 9000 + i);
        const RoughPath rp = dyadic_lift(w, 6);
        const Mat w2 = rp.level2(0, rp.intervals());
        const double area = 0.5 * (w2(0, 1) - w2(1, 0));
        acc += area;
        acc2 += area * area;
    }
    const double mean = acc / n_samples;
    const double sd = std::sqrt(acc2 / n_samples - mean * mean);
    CHECK(std::abs(mean) < 3.0 * sd / std::sqrt(static_cast<double>(n_samples)));
}

TEST_CASE("young translation basics") {
    const CameronMartinPath h = random_cm(2, 4, 12);
    const RoughPath zero = zero_rough_path(2, 4);
    const RoughPath lifted = lift_pl(h, 4);
    const RoughPath translated = young_translate(zero, h);
    CHECK((translated.values - lifted.values).cwiseAbs().maxCoeff() < 1e-15);
    for (int j = 0; j < translated.intervals(); ++j)
        CHECK((translated.level2_adj[j] - lifted.level2_adj[j]).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("young translation of a lift is the lift of the sum") {
    const BesovParams params(0.45, 6);
    for (int rep = 0; rep < 5; ++rep) {
        const CameronMartinPath k = random_cm(2, 5, 100 + rep);
        const CameronMartinPath h = random_cm(2, 4, 200 + rep);
        const RoughPath lhs = young_translate(lift_pl(k, 5), h);
        CameronMartinPath sum = k;
        sum.knots += h.refined(5).knots;
        const RoughPath rhs = lift_pl(sum, 5);
        CHECK(besov_distance(lhs, rhs, params) < 1e-12);
    }
}

TEST_CASE("young translation crossing of two linear paths") {
    Vec e1 = Vec::Zero(2), e2 = Vec::Zero(2);
    e1(0) = 1.0;
    e2(1) = 1.0;
    const RoughPath lifted = lift_pl(linear_path(e1, 3));
    const RoughPath moved = young_translate(lifted, linear_path(e2, 3));
    const Mat expected = 0.5 * (e1 + e2) * (e1 + e2).transpose();
    CHECK((moved.level2(0, moved.intervals()) - expected).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("young translation group law") {
    const BesovParams params(0.45, 6);
    const RoughPath rp = dyadic_lift(brownian_sample(2, 6, 5), 6);
    const CameronMartinPath h = random_cm(2, 5, 6);
    const CameronMartinPath k = random_cm(2, 6, 7);
    const RoughPath double_shift = young_translate(young_translate(rp, h), k);
    CameronMartinPath sum = k;
    sum.knots += h.refined(6).knots;
    const RoughPath one_shift = young_translate(rp, sum);
    CHECK(besov_distance(double_shift, one_shift, params) < 1e-10);
}

TEST_CASE("dilation") {
    const CameronMartinPath h = random_cm(2, 5, 77);
    const RoughPath rp = lift_pl(h);
    const BesovParams params(0.45, 6);

    const RoughPath zeroed = dilate(rp, 0.0);
    CHECK(zeroed.values.cwiseAbs().maxCoeff() == 0.0);

    const RoughPath same = dilate(rp, 1.0);
    CHECK(besov_distance(same, rp, params) == 0.0);

    const double c = -1.7;
    CHECK(besov_distance(dilate(rp, c), lift_pl(scaled(h, c)), params) < 1e-12);
}

TEST_CASE("besov distance closed form for the unit-slope scalar path") {
    const BesovParams params(0.45, 6);
    const double gamma = 4.0 * params.m * (1.0 - params.alpha);
    const double closed = std::pow(1.0 / (gamma * (gamma + 1.0)), 1.0 / (4.0 * params.m));
    CHECK(closed == doctest::Approx(0.8041).epsilon(2e-4));

    Vec one(1);
    one << 1.0;
    double prev_err = 1e100;
    for (const int K : {6, 8, 10}) {
        const RoughPath rp = lift_pl(linear_path(one, K));
        const BesovSeminorms s = besov_seminorms(rp, zero_rough_path(1, K), params);
        const double err = std::abs(s.level1 - closed);
        CHECK(err < prev_err);
        prev_err = err;
    }
    CHECK(prev_err < 0.005);
}

TEST_CASE("besov distance is a metric on lifts") {
    const BesovParams params(0.45, 6);
    const RoughPath a = lift_pl(random_cm(2, 5, 300), 5);
    CHECK(besov_distance(a, a, params) == 0.0);
    for (int rep = 0; rep < 50; ++rep) {
        const RoughPath x = lift_pl(random_cm(2, 5, 400 + 3 * rep), 5);
        const RoughPath y = lift_pl(random_cm(2, 5, 401 + 3 * rep), 5);
        const RoughPath z = lift_pl(random_cm(2, 5, 402 + 3 * rep), 5);
        const double xy = besov_distance(x, y, params);
        const double yz = besov_distance(y, z, params);
        const double xz = besov_distance(x, z, params);
        CHECK(xz <= xy + yz + 1e-12);
        CHECK(besov_distance(x, y, params) == doctest::Approx(besov_distance(y, x, params)));
    }
}

TEST_CASE("besov homogeneity under dilation") {
    const BesovParams params(0.45, 6);
    const RoughPath rp = dyadic_lift(brownian_sample(2, 7, 55), 7);
    const RoughPath zero = zero_rough_path(2, 7);
    const double c = 2.5;
    const BesovSeminorms base = besov_seminorms(rp, zero, params);
    const BesovSeminorms scaled_norms = besov_seminorms(dilate(rp, c), zero, params);
    CHECK(scaled_norms.level1 == doctest::Approx(c * base.level1).epsilon(1e-12));
    CHECK(std::sqrt(scaled_norms.level2) ==
          doctest::Approx(c * std::sqrt(base.level2)).epsilon(1e-12));
}

TEST_CASE("kl residual statistics") {
    const BesovParams params(0.45, 6);
    // Translating by the full skeleton of itself leaves the zero rough path.
    const KlResidualStats at_K = kl_residual_stats(2, 6, 6, 5, params, 77);
    CHECK(at_K.max == 0.0);

    // Decreasing means over n, modest sample size.
    double prev = 1e100;
    for (const int n : {2, 4, 6}) {
        const KlResidualStats s = kl_residual_stats(2, n, 9, 30, params, 123);
        CHECK(s.mean < prev);
        CHECK(s.mean > 0.0);
        prev = s.mean;
    }

    // Deterministic given the seed, independent of the worker count.
    const KlResidualStats s1 = kl_residual_stats(2, 3, 7, 16, params, 9);
    const KlResidualStats s2 = kl_residual_stats(2, 3, 7, 16, params, 9, 4);
    CHECK(s1.mean == s2.mean);
    CHECK(s1.max == s2.max);
}

TEST_CASE("rough path json round trip") {
    const RoughPath rp = dyadic_lift(brownian_sample(2, 4, 31), 3);
    const RoughPath back = rough_path_from_json(rough_path_to_json(rp));
    CHECK(back.dim == rp.dim);
    CHECK(back.level == rp.level);
    CHECK((back.values - rp.values).cwiseAbs().maxCoeff() == 0.0);
    for (int j = 0; j < rp.intervals(); ++j)
        CHECK((back.level2_adj[j] - rp.level2_adj[j]).cwiseAbs().maxCoeff() == 0.0);
}
