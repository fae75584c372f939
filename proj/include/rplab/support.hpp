#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rplab/malliavin.hpp"
#include "rplab/pinned.hpp"

namespace rplab {

struct FitOptions {
    int multi_starts = 5;
    int max_iterations = 500;       // quasi-Newton cap per start
    double gradient_tol = 1e-9;
    double admissible_gap_tol = 1e-6;
    double tau = 1e-6;              // surjectivity threshold at the fit
    double hoelder_beta = 0.45 - 1.0 / 24.0;
    std::optional<Vec> warm_start;  // Haar coefficients to seed start 0
};

struct SkeletonFit {
    CameronMartinPath control;      // fitted h* in K_N
    double residual_sup = 0.0;      // sup distance between Pi Psi(h*) and target
    double residual_hoelder = 0.0;  // beta-Hoelder grid distance of the same
    double endpoint_gap = 0.0;      // |Pi Psi(h*)_1 - b|
    bool admissible = false;        // gap below tolerance and surjective
    SurjectivityReport surjectivity;
    double objective = 0.0;
    int N = 0;
    double rho = 0.0;
    int starts_run = 0;
    int iterations_total = 0;
    std::vector<double> start_objectives;
};

// Fits a control in K_N to a projected target path by minimizing
//   J(h) = sup-dist(Pi Psi(h), target)^2 + rho |Pi Psi(h)_1 - b|^2
// over Haar coefficients with a BFGS loop (gradients through the first
// variation), multi-start, followed by a Newton cleanup on the phi^{0,1}
// coefficients that closes the endpoint gap where the endpoint derivative
// is invertible.
SkeletonFit fit_admissible_skeleton(const VectorFieldSystem& vf, const Vec& a, const Vec& b,
                                    const Projection& proj, const GridPath& target, int N,
                                    double rho, std::uint64_t seed,
                                    const FitOptions& options = {});

struct ResidualSummary {
    double min = 0.0;
    double median = 0.0;
    double mean = 0.0;
    double max = 0.0;
};

struct SupportReport {
    // Forward inclusion (coverage) section.
    double coverage = 0.0;            // weighted fraction of admissible fits
    double coverage_lower_99 = 0.0;   // Wilson bound at the effective count
    ResidualSummary residuals;        // at level N
    ResidualSummary residuals_finer;  // at level N + 2
    std::vector<double> per_sample_residuals;
    long fitted_samples = 0;

    // Reverse inclusion (tube mass) section.
    double tube_mass = 0.0;
    double tube_mass_lower_99 = 0.0;
    double effective_samples = 0.0;

    // Parameters echoed into every report.
    int N = 0;
    double delta = 0.0;
    double eta = 0.0;
    double tau = 0.0;
    double rho = 0.0;
    double epsilon = 0.0;

    std::string to_json() const;
    void write_residual_csv(const std::string& path) const;
};

struct CoverageOptions {
    long max_fit_samples = 200;  // fits are the expensive part
    double rho = 1e3;
    FitOptions fit;
    bool run_finer_level = true;  // repeat at N + 2, warm-started
};

// Forward inclusion: fit an admissible control to every (sub)sampled bridge
// path; coverage is the weighted fraction with residual <= delta, endpoint
// gap <= ensemble epsilon and a surjective endpoint derivative.
SupportReport support_coverage_test(const VectorFieldSystem& vf, const Vec& a, const Vec& b,
                                    const Projection& proj, const BridgeEnsemble& ensemble,
                                    int N, double delta, double tau, std::uint64_t seed,
                                    const CoverageOptions& options = {});

// Reverse inclusion: weighted ensemble mass of the sup-norm eta-tube around
// the projected skeleton of an admissible control, with a 99% lower
// confidence bound. Raises std::invalid_argument when h is not admissible
// (endpoint within epsilon of b plus surjectivity at tau).
SupportReport tube_mass_test(const VectorFieldSystem& vf, const Vec& a, const Vec& b,
                             const Projection& proj, const CameronMartinPath& h_admissible,
                             double eta, const BridgeEnsemble& ensemble, double tau = 1e-6,
                             int N = 8);

}  // namespace rplab
