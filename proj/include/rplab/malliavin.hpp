#pragma once

#include <string>

#include "rplab/projection.hpp"
#include "rplab/rde.hpp"
#include "rplab/types.hpp"

namespace rplab {

// Symmetric positive semi-definite covariance of a projected endpoint
// derivative. Construction enforces symmetry to 1e-12 and lambda_min >= -1e-10.
struct GramMatrix {
    Mat C;
    int N = 0;  // Haar truncation level; 0 for grid-time-integral covariances
    double lambda_min = 0.0;
    double lambda_max = 0.0;

    static GramMatrix from_matrix(Mat C, int N);
};

struct SurjectivityReport {
    double lambda_min = 0.0;
    int N = 0;
    double tau = 0.0;
    bool surjective = false;

    std::string to_json(const Mat& matrix) const;
};

// Deterministic Malliavin covariance of the projected endpoint over the Haar
// truncation K_N: C = M M^T with M the endpoint derivative matrix.
GramMatrix gram_deterministic(const VectorFieldSystem& vf, const CameronMartinPath& h,
                              const Vec& a, const Projection& proj, int N);

// lambda_min(C) >= tau, with the inputs echoed in the report.
SurjectivityReport surjectivity_check(const GramMatrix& gram, double tau);

struct StochasticGram {
    GramMatrix gram;
    double max_flow_condition = 0.0;
    bool flow_flagged = false;  // condition number exceeded 1e12 somewhere
};

// sigma_Y = Pi J_1 (int_0^1 J_s^{-1} sigma sigma^T J_s^{-T} ds) J_1^T Pi^T
// along the rough solution, with the time integral by composite Simpson on
// the grid.
StochasticGram gram_stochastic(const VectorFieldSystem& vf, const RoughPath& rp, const Vec& a,
                               const Projection& proj);

struct HormanderReport {
    int depth = 0;          // L
    double lambda_min = 0.0;
    bool spans = false;     // lambda_min > 0 within tolerance
    int bracket_count = 0;  // fields accumulated across depths 1..L
    Mat accumulated;        // sum of (Pi Z(a)) (Pi Z(a))^T
};

// Bracket-generating test at a point: Sigma_1 = {V_1..V_d},
// Sigma_k = {[Z, V_i] : Z in Sigma_{k-1}, 0 <= i <= d}, with Lie brackets by
// central finite differences of the user fields (step 1e-5). Reports
// lambda_min of the accumulated projected outer products up to depth L.
HormanderReport hormander_check(const VectorFieldSystem& vf, const Vec& a, int L,
                                const Projection& proj);

// [V_i, V_j](a) by the same finite-difference rule hormander_check uses.
Vec fd_bracket(const VectorFieldSystem& vf, int i, int j, const Vec& a);

}  // namespace rplab
