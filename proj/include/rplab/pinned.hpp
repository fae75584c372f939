#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rplab/pathspace.hpp"
#include "rplab/projection.hpp"
#include "rplab/rde.hpp"
#include "rplab/roughlift.hpp"

namespace rplab {

// Optional reweighting of driver paths, e.g. a bump functional around a
// reference rough path. Defaults to the constant weight 1.
using DriverWeight = std::function<double(const GridPath& w)>;

struct DensityEstimate {
    double value = 0.0;       // p-hat >= 0
    double std_error = 0.0;
    double bandwidth = 0.0;
    long n_samples = 0;
    std::string weight_desc;  // "constant 1" or a bump description

    // One-sided lower confidence bound at the given z (2.326 for 99%).
    double lower_confidence(double z) const { return value - z * std_error; }
};

// Kernel-smoothed density of the projected endpoint at b:
//   p-hat = (1/n) sum_j G(w_j) kappa_bw(Y_1^{(j)} - b),
// with kappa a product Gaussian kernel on the subspace and Y the projected
// endpoint of the step-2 solve along the level-K lift of the sampled driver.
DensityEstimate density_estimate(const VectorFieldSystem& vf, const Vec& a, const Vec& b,
                                 const Projection& proj, long n_samples, double bandwidth,
                                 int K, std::uint64_t seed,
                                 const DriverWeight& weight = nullptr,
                                 const std::string& weight_desc = "constant 1",
                                 int workers = 1);

// Smooth cutoff weight around a reference rough path z:
//   G_{z,r}(w) = chi((||L(w(K))^1 - z^1||^{4m} + ||L(w(K))^2 - z^2||^{2m}) / r^{4m})
// with chi C^inf, non-increasing, chi = 1 on [0,1] and chi = 0 on
// [2^{4m}, inf). Values in [0,1]; the indicator sandwich
//   1_{B(z,r)} <= G <= 1_{B(z,2r)}
// holds pathwise for the Besov balls of the same exponents.
struct BumpWeight {
    RoughPath center;
    double radius;
    BesovParams params;

    BumpWeight(RoughPath center_, double radius_, const BesovParams& params_);

    double operator()(const GridPath& w) const;
    // The ball membership test used by the sandwich: strict inequality
    // ||.^1||^{4m} + ||.^2||^{2m} < rho^{4m}.
    bool in_ball(const GridPath& w, double rho) const;
};

double smooth_cutoff(double u, int four_m);  // the chi above, exposed for tests

struct BridgeEnsemble {
    Vec a;
    Vec b;
    Mat proj_rows;
    double epsilon = 0.0;
    int K = 0;
    std::uint64_t seed = 0;
    double acceptance_rate = 0.0;
    long attempts = 0;
    std::vector<GridPath> paths;        // accepted solution paths in R^e
    std::vector<long> sample_indices;   // accepted attempt counters, ascending
    std::vector<double> weights;        // nonnegative, sum to 1

    void validate() const;  // endpoint constraint and weight normalization
};

// Raised when a run is statistically hopeless: the endpoint-density guard
// fails or the acceptance rate collapses. Maps to a dedicated CLI exit code.
struct GuardError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// epsilon-tube rejection sampling of the pinned law: a driver is accepted iff
// |Pi X_1 - b| <= epsilon, and accepted paths carry Gaussian-kernel weights
// kappa_eps(Y_1 - b) renormalized to sum 1.
//
// Guard: before sampling, the endpoint density at b is estimated with
// guard_samples draws and the run aborts (GuardError) unless its one-sided
// 99% lower confidence bound is positive; guard_samples = 0 skips the check.
// A GuardError is also raised when the acceptance rate stays below 1e-6
// across the attempt budget, with guidance to enlarge epsilon.
BridgeEnsemble sample_bridge(const VectorFieldSystem& vf, const Vec& a, const Vec& b,
                             const Projection& proj, double epsilon, long n_target, int K,
                             std::uint64_t seed, int workers = 1,
                             long max_attempts = 0 /* 0: automatic budget */,
                             long guard_samples = 20000);

// Persist: manifest JSON plus one CSV per accepted path.
void save_ensemble(const std::string& directory, const BridgeEnsemble& ensemble);

struct FddCheckEntry {
    double time = 0.0;
    std::string function_name;
    double ensemble_mean = 0.0;
    double ensemble_se = 0.0;
    double chain_mean = 0.0;
    double chain_se = 0.0;
    double z_score = 0.0;
};

struct FddReport {
    std::vector<FddCheckEntry> entries;
    long n_chain_samples = 0;
    double max_abs_z = 0.0;
};

using MarginalFn = std::function<double(const Vec&)>;

// Compares weighted ensemble averages of projected marginals against an
// independent kernel-weighted simulation of the semigroup chain, restarted
// with fresh increments at each requested time. Reports z-scores.
FddReport fdd_check(const BridgeEnsemble& ensemble, const std::vector<double>& times,
                    const std::vector<std::pair<std::string, MarginalFn>>& test_functions,
                    const VectorFieldSystem& vf, const Vec& a, const Vec& b,
                    const Projection& proj, long n_chain_samples, std::uint64_t seed);

}  // namespace rplab
