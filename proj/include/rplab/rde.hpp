#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "rplab/pathspace.hpp"
#include "rplab/projection.hpp"
#include "rplab/roughlift.hpp"
#include "rplab/types.hpp"

namespace rplab {

// Declared regularity of a coefficient system. Recorded, not enforced; the
// solvers only check the minimum differentiability they need.
struct SmoothnessClass {
    int order = 3;         // continuous derivatives the user vouches for
    bool bounded = false;  // fields and derivatives globally bounded
};

// Coefficients V_0..V_d of dx = sum_i V_i(x) dw^i + V_0(x) dt, with first and
// (optionally) second derivatives. Evaluators write into caller storage and
// must be callable concurrently without shared mutable state.
struct VectorFieldSystem {
    int state_dim = 0;   // e
    int driver_dim = 0;  // d
    std::string name;
    SmoothnessClass smoothness;

    // V_i(x), i = 0..d (0 is the drift); out has size e.
    std::function<void(int i, const Vec& x, Vec& out)> field;
    // Jacobian: out(r,c) = d V_i^r / d x_c, size e x e.
    std::function<void(int i, const Vec& x, Mat& out)> jacobian;
    // Hessian slices: out[r](p,q) = d^2 V_i^r / d x_p d x_q, e matrices e x e.
    std::function<void(int i, const Vec& x, std::vector<Mat>& out)> hessian;
    bool has_hessian = false;

    Mat sigma(const Vec& x) const;  // [V_1 ... V_d], e x d
    Vec drift(const Vec& x) const;
};

// Checks supplied derivatives against central finite differences at 20
// Latin-hypercube points in [-2,2]^e; throws std::invalid_argument past
// relative 1e-5. Run on every system at registration.
void validate_derivatives(const VectorFieldSystem& vf, std::uint64_t seed = 1234);

// Built-in systems, validated on first access.
//   additive    e=d=1, V_1 = e_1, V_0 = 0           (X = a + w)
//   additive2   e=d=2, V_i = e_i, V_0 = 0
//   geometric   e=d=1, V_1(x) = x, V_0 = 0          (X = a exp(w))
//   kolmogorov  e=2,d=1, V_1 = (1,0), V_0 = (0,x^1)
//   heisenberg  e=3,d=2, Levy-area third coordinate
//   degenerate  alias of geometric; degenerate when started at a = 0
const VectorFieldSystem& builtin_system(const std::string& name);
std::vector<std::string> builtin_system_names();

// Base solution plus first/second variations and the Jacobian flow.
struct VariationalBundle {
    GridPath base;               // x
    std::vector<Mat> jacobian;   // J at every node, J(0) = I
    std::vector<GridPath> xi1;   // one per requested direction, xi1(0) = 0
    std::vector<GridPath> xi2;   // one per requested pair, xi2(0) = 0
};

// Skeleton ODE dx = sigma(x) dh + b(x) dt by classical RK4 with h's exact
// piecewise-linear derivative, one step per knot interval of h. The `out`
// overload reuses the caller's storage.
GridPath solve_skeleton(const VectorFieldSystem& vf, const CameronMartinPath& h, const Vec& a);
void solve_skeleton(const VectorFieldSystem& vf, const CameronMartinPath& h, const Vec& a,
                    GridPath& out);

// Step-2 increment scheme over each grid interval:
//   x += sigma(x) w1 + V_0(x) dt + sum_{i,k} (grad V_k . V_i)(x) w2^{ik}.
// Mixed drift-noise second-order terms are omitted; their O(dt^{3/2}) per-step
// contribution is absorbed in the measured convergence.
GridPath solve_rde(const VectorFieldSystem& vf, const RoughPath& rp, const Vec& a);

using IndexPair = std::pair<int, int>;

// Coupled integration of (x, J, all xi1, requested xi2) along the control h.
// xi2 requires supplied second derivatives.
VariationalBundle solve_variational(const VectorFieldSystem& vf, const CameronMartinPath& h,
                                    const Vec& a, const std::vector<CameronMartinPath>& directions,
                                    const std::vector<IndexPair>& pairs = {});

// Same coupled system driven by a rough path through the step-2 scheme; for
// rp = L(h) it agrees with solve_variational.
VariationalBundle solve_variational_rough(const VectorFieldSystem& vf, const RoughPath& rp,
                                          const Vec& a,
                                          const std::vector<CameronMartinPath>& directions,
                                          const std::vector<IndexPair>& pairs = {});

// Matrix of the projected endpoint derivative restricted to K_N: column j is
// Pi xi1(h; phi_j)_1 over the Haar basis enumeration of K_N. Shape
// e' x (d 2^N). Directions are integrated jointly with the base solution.
Mat jacobian_endpoint_matrix(const VectorFieldSystem& vf, const CameronMartinPath& h,
                             const Vec& a, const Projection& proj, int N);

// The same first-variation block recorded along the way: row block r of
// `at_nodes` holds Pi xi1 at solve node r * record_stride (e' rows per
// record, d 2^N columns), the last block being the endpoint.
struct HaarVariationBlock {
    GridPath base;
    Mat at_nodes;
    int record_stride = 1;
};

HaarVariationBlock haar_variation_block(const VectorFieldSystem& vf, const CameronMartinPath& h,
                                        const Vec& a, const Projection& proj, int N, int level,
                                        int record_stride);

// Base solution with the Jacobian flow and its inverse along a rough driver.
// J^{-1} is advanced by its own equation rather than inverted per step;
// max_condition tracks ||J||_F ||J^{-1}||_F over the grid.
struct RoughFlow {
    GridPath base;
    std::vector<Mat> J;
    std::vector<Mat> Jinv;
    double max_condition = 0.0;
};

RoughFlow solve_flow_rough(const VectorFieldSystem& vf, const RoughPath& rp, const Vec& a);

// Same flow data along the skeleton ODE, integrated with RK4 at the given
// grid level (>= h.level). The `out` overload reuses the caller's storage.
RoughFlow solve_flow_ode(const VectorFieldSystem& vf, const CameronMartinPath& h, const Vec& a,
                         int level);
void solve_flow_ode(const VectorFieldSystem& vf, const CameronMartinPath& h, const Vec& a,
                    int level, RoughFlow& out);

// Endpoint of the step-2 scheme driven by the exact lift of the level-K
// piecewise-linear interpolation of w; same scheme as
// solve_rde(vf, dyadic_lift(w, w.level), a) without storing the rough path.
Vec rde_endpoint(const VectorFieldSystem& vf, const GridPath& w, const Vec& a);

// Full solution path of the same fused scheme, written into `out`.
void rde_path(const VectorFieldSystem& vf, const GridPath& w, const Vec& a, GridPath& out);

}  // namespace rplab
