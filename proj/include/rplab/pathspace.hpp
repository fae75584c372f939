#pragma once

#include <string>

#include "rplab/types.hpp"

namespace rplab {

// Path sampled on the uniform dyadic grid of 2^level + 1 points on [0,1].
// Row j of `values` is the path value at t = j * 2^-level.
struct GridPath {
    int dim = 0;
    int level = 0;
    Mat values;

    GridPath() = default;
    GridPath(int dim_, int level_)
        : dim(dim_), level(level_), values(Mat::Zero(grid_points(level_), dim_)) {}

    int points() const { return grid_points(level); }
    double t(int j) const { return static_cast<double>(j) * grid_mesh(level); }
    Vec at(int j) const { return values.row(j).transpose(); }

    // Throws std::invalid_argument on shape mismatch or non-finite entries.
    void validate() const;
};

// Piecewise-linear finite-energy control with knots on a dyadic grid,
// starting at zero. Between knots the path is linearly interpolated; the
// energy inner product is exact for this family.
struct CameronMartinPath {
    int dim = 0;
    int level = 0;
    Mat knots;  // (2^level + 1) x dim, first row zero

    CameronMartinPath() = default;
    CameronMartinPath(int dim_, int level_)
        : dim(dim_), level(level_), knots(Mat::Zero(grid_points(level_), dim_)) {}

    int points() const { return grid_points(level); }
    double t(int j) const { return static_cast<double>(j) * grid_mesh(level); }

    Vec value_at(double t) const;  // exact piecewise-linear evaluation

    // Same path on a finer dyadic knot set (exact). Requires finer >= level.
    CameronMartinPath refined(int finer_level) const;

    GridPath as_grid_path() const;

    void validate() const;
};

// Besov regularity pair (alpha, 4m). Construction enforces
//   1/3 < alpha < 1/2,   alpha - 1/(4m) > 1/3,   4m(1/2 - alpha) > 1,
// and throws std::invalid_argument naming the violated inequality.
struct BesovParams {
    double alpha;
    int m;

    BesovParams(double alpha_, int m_);

    int four_m() const { return 4 * m; }
    // Embedding exponent: the Hoelder exponent controlled by (alpha, 4m).
    double holder_exponent() const { return alpha - 1.0 / (4.0 * m); }
};

// Index (n, m, i) of the Haar primitive phi^{n,m} e_i: n >= 0,
// 1 <= m <= max(2^{n-1}, 1), 1 <= i <= dim.
struct HaarIndex {
    int n;
    int m;
    int i;

    HaarIndex(int n_, int m_, int i_, int dim);
};

// Value of the Haar step function psi^{n,m} at time t. psi^{0,1} == 1; for
// n >= 1 it takes values +-2^{(n-1)/2} on the two halves of its support.
double haar_psi(const HaarIndex& idx, double t);

// Primitive phi^{n,m}_t = int_0^t psi^{n,m}_s ds, for t in [0,1].
double haar_phi(const HaarIndex& idx, double t);

// phi^{n,m} e_i as a Cameron-Martin path with knots at `level` (requires
// level >= idx.n so the kinks are resolved; the representation is then exact).
CameronMartinPath haar_path(const HaarIndex& idx, int dim, int level);

// Exact energy inner product int_0^1 <h', k'> dt over the common dyadic
// refinement of the two knot sets.
double h_inner(const CameronMartinPath& h, const CameronMartinPath& k);

inline double h_norm(const CameronMartinPath& h) { return std::sqrt(h_inner(h, h)); }

// max over grid pairs s < t of |p_t - p_s| / (t-s)^alpha. Grid restriction of
// the continuum seminorm; it under-estimates the supremum over all real s < t.
double hoelder_seminorm(const GridPath& p, double alpha);
double hoelder_seminorm(const CameronMartinPath& p, double alpha);

// Sup distance max_j |p_j - q_j| over the common (coarser) grid.
double sup_distance(const GridPath& p, const GridPath& q);
// Grid Hoelder seminorm of p - q over the common (coarser) grid.
double hoelder_distance(const GridPath& p, const GridPath& q, double alpha);

// Level-n piecewise-linear interpolation w(n): matches p at the knots
// j 2^-n, linear between. Equals the orthogonal projection onto K_n (the span
// of Haar primitives up to level n) when the input is a Cameron-Martin path.
CameronMartinPath dyadic_project(const GridPath& p, int n);
CameronMartinPath dyadic_project(const CameronMartinPath& h, int n);

// Linear combination sum_j coeffs[j] * phi_{basis[j]} assembled exactly.
// Basis enumeration of K_N: levels n = 0..N, then shifts m, then coordinates.
struct HaarBasis {
    int N;    // truncation level
    int dim;  // path dimension

    HaarBasis(int N_, int dim_);

    int size() const;                 // dim * 2^N
    HaarIndex index(int column) const;

    // Exact Haar coefficients <h, phi_j>_H for all j (path need not lie in K_N).
    Vec coefficients(const CameronMartinPath& h) const;
    // Path in K_N with the given coefficients, on knots at `level` >= N.
    CameronMartinPath combine(const Vec& coeffs, int level) const;
};

// CSV serialization: header "t,x1,...,xd", one row per grid point, full
// double precision.
void write_csv(const std::string& path, const GridPath& p);
GridPath read_csv(const std::string& path);

}  // namespace rplab
