#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

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

// Independent quadrature of int_0^1 psi_a psi_b dt at midpoints of a grid
// fine enough to resolve both step functions exactly.
double psi_product_integral(const HaarIndex& a, const HaarIndex& b) {
    const int level = 12;
    const int n = 1 << level;
    double acc = 0.0;
    for (int j = 0; j < n; ++j) {
        const double t = (j + 0.5) / n;
        acc += haar_psi(a, t) * haar_psi(b, t);
    }
    return acc / n;
}

}  // namespace

TEST_CASE("h_inner on tabulated cases") {
    Vec v(2);
    v << 1.0 / std::sqrt(2.0), 1.0 / std::sqrt(2.0);
    const CameronMartinPath h = linear_path(v, 3);
    CHECK(h_inner(h, h) == doctest::Approx(1.0).epsilon(1e-14));

    const CameronMartinPath zero(2, 3);
    CHECK(h_inner(h, zero) == 0.0);

    // phi^{2,1} and phi^{1,1} along e_1: the sign patterns overlap on [0,1/2)
    // with opposite halves, so the oracle integral vanishes.
    const HaarIndex a(2, 1, 1, 1);
    const HaarIndex b(1, 1, 1, 1);
    const double oracle = psi_product_integral(a, b);
    CHECK(oracle == doctest::Approx(0.0).epsilon(1e-15));
    const double got = h_inner(haar_path(a, 1, 4), haar_path(b, 1, 4));
    CHECK(std::abs(got - oracle) < 1e-14);
}

TEST_CASE("h_inner rejects dimension mismatch") {
    CHECK_THROWS_AS(h_inner(CameronMartinPath(1, 2), CameronMartinPath(2, 2)),
                    std::invalid_argument);
}

TEST_CASE("h_inner over mixed knot levels is exact") {
    const CameronMartinPath h = random_cm(2, 3, 7);
    const CameronMartinPath k = random_cm(2, 6, 8);
    const double coarse = h_inner(h, k);
    const double fine = h_inner(h.refined(6), k);
    CHECK(coarse == doctest::Approx(fine).epsilon(1e-14));
}

TEST_CASE("hoelder seminorm basics") {
    Vec one(1);
    one << 1.0;
    const GridPath linear = linear_path(one, 6).as_grid_path();
    CHECK(hoelder_seminorm(linear, 1.0) == doctest::Approx(1.0).epsilon(1e-14));

    GridPath constant(3, 5);
    constant.values.setConstant(0.7);
    CHECK(hoelder_seminorm(constant, 0.45) == 0.0);

    CHECK_THROWS_AS(hoelder_seminorm(constant, 0.0), std::domain_error);
    CHECK_THROWS_AS(hoelder_seminorm(constant, 1.5), std::domain_error);
}

TEST_CASE("hoelder seminorm matches the brute-force oracle") {
    const GridPath w = brownian_sample(2, 6, 99);
    const double alpha = 0.45;
    // Oracle: direct maximum over every pair, straight from the definition.
    double expected = 0.0;
    for (int s = 0; s < w.points(); ++s)
        for (int t = s + 1; t < w.points(); ++t) {
            const double num = (w.values.row(t) - w.values.row(s)).norm();
            expected = std::max(expected, num / std::pow(w.t(t) - w.t(s), alpha));
        }
    CHECK(hoelder_seminorm(w, alpha) == doctest::Approx(expected).epsilon(1e-14));
    CHECK(hoelder_seminorm(w, alpha) > 0.0);
}

TEST_CASE("hoelder seminorm invariances") {
    const GridPath w = brownian_sample(1, 7, 5);
    GridPath shifted = w;
    shifted.values.array() += 3.25;
    CHECK(hoelder_seminorm(shifted, 0.4) ==
          doctest::Approx(hoelder_seminorm(w, 0.4)).epsilon(1e-13));
    GridPath scaled_path = w;
    scaled_path.values *= -2.5;
    CHECK(hoelder_seminorm(scaled_path, 0.4) ==
          doctest::Approx(2.5 * hoelder_seminorm(w, 0.4)).epsilon(1e-13));
}

TEST_CASE("haar_phi values") {
    CHECK(haar_phi(HaarIndex(0, 1, 1, 1), 0.7) == doctest::Approx(0.7).epsilon(1e-15));

    // Oracle: quadrature of the step function over [0, 0.25].
    const HaarIndex idx(2, 1, 1, 1);
    const int n = 1 << 12;
    double acc = 0.0;
    for (int j = 0; j < n; ++j) {
        const double t = (j + 0.5) / n;
        if (t < 0.25) acc += haar_psi(idx, t);
    }
    acc /= n;
    CHECK(acc == doctest::Approx(std::sqrt(2.0) / 4.0).epsilon(1e-12));
    CHECK(haar_phi(idx, 0.25) == doctest::Approx(acc).epsilon(1e-12));

    CHECK(haar_phi(HaarIndex(1, 1, 1, 1), 1.0) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK_THROWS_AS(haar_phi(HaarIndex(0, 1, 1, 1), 1.5), std::domain_error);
}

TEST_CASE("haar primitives are orthonormal up to level 6") {
    const HaarBasis basis(6, 1);
    std::vector<CameronMartinPath> paths;
    for (int c = 0; c < basis.size(); ++c) paths.push_back(haar_path(basis.index(c), 1, 7));
    for (int a = 0; a < basis.size(); ++a)
        for (int b = a; b < basis.size(); ++b) {
            const double expected = a == b ? 1.0 : 0.0;
            CHECK(std::abs(h_inner(paths[a], paths[b]) - expected) < 1e-12);
        }
    // Distinct coordinates are orthogonal regardless of the scalar indices.
    const double cross = h_inner(haar_path(HaarIndex(2, 1, 1, 2), 2, 5),
                                 haar_path(HaarIndex(2, 1, 2, 2), 2, 5));
    CHECK(std::abs(cross) < 1e-15);
}

TEST_CASE("haar index validation") {
    CHECK_THROWS_AS(HaarIndex(-1, 1, 1, 1), std::invalid_argument);
    CHECK_THROWS_AS(HaarIndex(2, 3, 1, 1), std::invalid_argument);
    CHECK_THROWS_AS(HaarIndex(2, 1, 2, 1), std::invalid_argument);
}

TEST_CASE("dyadic projection") {
    const CameronMartinPath h = random_cm(2, 4, 11);
    // Idempotence on paths already at the target level.
    const CameronMartinPath same = dyadic_project(h, 4);
    CHECK((same.knots - h.knots).cwiseAbs().maxCoeff() == 0.0);

    // phi^{2,1} vanishes at 0, 1/2, 1; projecting to level 1 kills it.
    const CameronMartinPath tent = haar_path(HaarIndex(2, 1, 1, 1), 1, 4);
    const CameronMartinPath flat = dyadic_project(tent, 1);
    CHECK(flat.knots.cwiseAbs().maxCoeff() == 0.0);

    // Projecting twice equals projecting once to the coarser level.
    const CameronMartinPath p32 = dyadic_project(dyadic_project(h, 3), 2);
    const CameronMartinPath p2 = dyadic_project(h, 2);
    CHECK((p32.knots - p2.knots).cwiseAbs().maxCoeff() == 0.0);

    GridPath g = brownian_sample(1, 5, 3);
    CHECK_THROWS_AS(dyadic_project(g, 6), std::invalid_argument);
}

TEST_CASE("projection norms are nondecreasing in the level") {
    const GridPath w = brownian_sample(1, 12, 21);
    double prev = 0.0;
    for (int n = 2; n <= 10; ++n) {
        const double norm = h_norm(dyadic_project(w, n));
        CHECK(norm >= prev - 1e-12);
        prev = norm;
    }
    // And each projection norm is bounded by the full-resolution energy.
    const double full = h_norm(dyadic_project(w, 12));
    CHECK(prev <= full + 1e-12);
}

TEST_CASE("projection is the orthogonal projection onto K_n") {
    // <h - P_n h, g>_H = 0 for every g in K_n.
    const CameronMartinPath h = random_cm(1, 6, 17);
    const CameronMartinPath proj = dyadic_project(h, 3);
    CameronMartinPath resid = h;
    resid.knots -= proj.refined(6).knots;
    const HaarBasis basis(3, 1);
    for (int c = 0; c < basis.size(); ++c) {
        const double ip = h_inner(resid, haar_path(basis.index(c), 1, 3));
        CHECK(std::abs(ip) < 1e-13);
    }
}

TEST_CASE("besov parameter validation") {
    CHECK_NOTHROW(BesovParams(0.45, 6));
    CHECK_THROWS_AS(BesovParams(0.3, 6), std::invalid_argument);
    CHECK_THROWS_AS(BesovParams(0.55, 6), std::invalid_argument);
    CHECK_THROWS_AS(BesovParams(0.34, 30), std::invalid_argument);  // alpha - 1/(4m) <= 1/3
    CHECK_THROWS_AS(BesovParams(0.49, 6), std::invalid_argument);   // 4m(1/2-alpha) <= 1
    CHECK_THROWS_AS(BesovParams(0.45, 0), std::invalid_argument);
}

TEST_CASE("haar basis coefficient round trip") {
    const HaarBasis basis(4, 2);
    Rng rng(31);
    Vec coeffs(basis.size());
    for (int c = 0; c < coeffs.size(); ++c) coeffs(c) = rng.gaussian();
    const CameronMartinPath h = basis.combine(coeffs, 6);
    const Vec back = basis.coefficients(h);
    CHECK((back - coeffs).cwiseAbs().maxCoeff() < 1e-12);

    // Coefficients against the exact inner products.
    for (int c = 0; c < basis.size(); c += 7) {
        const double ip = h_inner(h, haar_path(basis.index(c), 2, 6));
        CHECK(back(c) == doctest::Approx(ip).epsilon(1e-12));
    }
}

TEST_CASE("csv round trip") {
    const GridPath w = brownian_sample(3, 4, 77);
    const std::string file = (std::filesystem::temp_directory_path() / "rplab_path.csv").string();
    write_csv(file, w);
    const GridPath back = read_csv(file);
    CHECK(back.dim == w.dim);
    CHECK(back.level == w.level);
    CHECK((back.values - w.values).cwiseAbs().maxCoeff() == 0.0);
    std::remove(file.c_str());
}
