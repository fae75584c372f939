#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rplab/pathspace.hpp"
#include "rplab/types.hpp"

namespace rplab {

// Geometric rough path over R^d on a dyadic grid. Level-1 increments are
// derived from the stored node values; level-2 tensors are stored for
// adjacent intervals only and reconstructed for arbitrary pairs through
// Chen's identity, keeping memory linear in the grid size.
struct RoughPath {
    int dim = 0;
    int level = 0;
    Mat values;                   // (2^level + 1) x dim node values
    std::vector<Mat> level2_adj;  // 2^level tensors, d x d

    RoughPath() = default;
    RoughPath(int dim_, int level_);

    int points() const { return grid_points(level); }
    int intervals() const { return grid_intervals(level); }

    Vec level1(int js, int jt) const;
    // w^2_{s,t} by accumulating adjacent tensors with Chen's identity.
    Mat level2(int js, int jt) const;

    void validate() const;
};

RoughPath zero_rough_path(int dim, int level);

// Exact lift of a piecewise-linear path: on a segment with slope v over
// length D the self-contribution is (D^2/2) v (x) v. `level` >= h.level
// places the lift on a finer grid (still exact).
RoughPath lift_pl(const CameronMartinPath& h);
RoughPath lift_pl(const CameronMartinPath& h, int level);

// Brownian path on the level-K grid: independent centered Gaussian increments
// with variance 2^-K per coordinate, starting at 0. Deterministic given seed.
GridPath brownian_sample(int dim, int K, std::uint64_t seed);

// L(w(n)): exact lift of the level-n dyadic piecewise-linear interpolation of
// w, expressed on w's full grid. The finest lift dyadic_lift(w, K) is the
// working surrogate for the limit lift of w.
RoughPath dyadic_lift(const GridPath& w, int n);

// Young translation T_h: level 1 shifts by h, level 2 picks up the two cross
// integrals, computed in closed form per grid interval against piecewise-
// linear h. Requires h.level <= rp.level so h is resolvable on rp's grid.
RoughPath young_translate(const RoughPath& rp, const CameronMartinPath& h);

// Dilation: level 1 scaled by c, level 2 by c^2.
RoughPath dilate(const RoughPath& rp, double c);

CameronMartinPath scaled(const CameronMartinPath& h, double c);

struct BesovSeminorms {
    double level1;  // || . ||_{alpha, 4m-B}
    double level2;  // || . ||_{2 alpha, 2m-B}
};

// Grid discretization of the two double integrals of the Besov distance,
// over all node pairs s < t with weight ds dt = 2^-2K, diagonal excluded.
BesovSeminorms besov_seminorms(const RoughPath& a, const RoughPath& b,
                               const BesovParams& params);

double besov_distance(const RoughPath& a, const RoughPath& b, const BesovParams& params);

// ||w^1||_{alpha,4m-B} + ||w^2||_{2alpha,2m-B}^{1/2}
double homogeneous_norm(const RoughPath& rp, const BesovParams& params);

struct KlResidualStats {
    double mean = 0.0;
    double std_error = 0.0;
    double max = 0.0;
    int n_samples = 0;
};

// Monte Carlo summary of the homogeneous norm of T_{-w(n)} L(w(K)), the
// residual after removing the level-n Karhunen-Loeve skeleton from the
// finest-grid lift. Decreasing means over n are the convergence diagnostic.
KlResidualStats kl_residual_stats(int dim, int n, int K, int n_samples,
                                  const BesovParams& params, std::uint64_t seed,
                                  int workers = 1);

std::string rough_path_to_json(const RoughPath& rp);
RoughPath rough_path_from_json(const std::string& text);

}  // namespace rplab
