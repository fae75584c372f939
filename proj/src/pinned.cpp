#include "rplab/pinned.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "rplab/rng.hpp"

namespace rplab {

namespace {

constexpr double kGuardZ = 2.3263478740408408;  // one-sided 99%

double product_gaussian_kernel(const Vec& u, double bw) {
    const double norm = std::pow(2.0 * M_PI * bw * bw, -0.5 * u.size());
    return norm * std::exp(-u.squaredNorm() / (2.0 * bw * bw));
}

void run_indexed(long n, int workers, const std::function<void(long lo, long hi)>& body) {
    if (workers <= 1 || n < 2 * workers) {
        body(0, n);
        return;
    }
    std::vector<std::thread> pool;
    const long chunk = (n + workers - 1) / workers;
    for (int t = 0; t < workers; ++t) {
        const long lo = t * chunk;
        const long hi = std::min(n, lo + chunk);
        if (lo < hi) pool.emplace_back(body, lo, hi);
    }
    for (auto& th : pool) th.join();
}

}  // namespace

DensityEstimate density_estimate(const VectorFieldSystem& vf, const Vec& a, const Vec& b,
                                 const Projection& proj, long n_samples, double bandwidth,
                                 int K, std::uint64_t seed, const DriverWeight& weight,
                                 const std::string& weight_desc, int workers) {
    if (!(bandwidth > 0.0))
        throw std::invalid_argument("density_estimate: bandwidth must be positive");
    if (n_samples < 1) throw std::invalid_argument("density_estimate: need samples");
    if (proj.ambient_dim() != vf.state_dim)
        throw std::invalid_argument("density_estimate: projection dim mismatch");
    if (b.size() != proj.sub_dim())
        throw std::invalid_argument("density_estimate: target dim mismatch");

    // Per-sample values are stored and reduced in index order so the result
    // does not depend on the worker count.
    std::vector<double> vals(n_samples);
    run_indexed(n_samples, workers, [&](long lo, long hi) {
        for (long i = lo; i < hi; ++i) {
            const GridPath w = brownian_sample(vf.driver_dim, K, derive_seed(seed, i));
            const Vec y = proj.rows * rde_endpoint(vf, w, a);
            double v = product_gaussian_kernel(y - b, bandwidth);
            if (weight) v *= weight(w);
            vals[i] = v;
        }
    });
    double acc = 0.0;
    for (double v : vals) acc += v;
    const double mean = acc / n_samples;
    double var = 0.0;
    for (double v : vals) var += (v - mean) * (v - mean);

    DensityEstimate out;
    out.value = mean;
    out.std_error = n_samples > 1 ? std::sqrt(var / (n_samples - 1) / n_samples) : 0.0;
    out.bandwidth = bandwidth;
    out.n_samples = n_samples;
    out.weight_desc = weight_desc;
    return out;
}

double smooth_cutoff(double u, int four_m) {
    const double hi = std::exp2(four_m);
    if (u <= 1.0) return 1.0;
    if (u >= hi) return 0.0;
    // C^inf transition f(t)/(f(t)+f(1-t)) with f(t) = exp(-1/t).
    const double t = (hi - u) / (hi - 1.0);
    const double f = std::exp(-1.0 / t);
    const double g = std::exp(-1.0 / (1.0 - t));
    return f / (f + g);
}

BumpWeight::BumpWeight(RoughPath center_, double radius_, const BesovParams& params_)
    : center(std::move(center_)), radius(radius_), params(params_) {
    if (!(radius > 0.0)) throw std::invalid_argument("BumpWeight: radius must be positive");
}

double BumpWeight::operator()(const GridPath& w) const {
    if (w.level != center.level || w.dim != center.dim)
        throw std::invalid_argument("BumpWeight: grid mismatch");
    const BesovSeminorms s = besov_seminorms(dyadic_lift(w, w.level), center, params);
    const int fm = params.four_m();
    const double u =
        (std::pow(s.level1, fm) + std::pow(s.level2, 2 * params.m)) / std::pow(radius, fm);
    return smooth_cutoff(u, fm);
}

bool BumpWeight::in_ball(const GridPath& w, double rho) const {
    const BesovSeminorms s = besov_seminorms(dyadic_lift(w, w.level), center, params);
    const int fm = params.four_m();
    return std::pow(s.level1, fm) + std::pow(s.level2, 2 * params.m) < std::pow(rho, fm);
}

void BridgeEnsemble::validate() const {
    if (paths.size() != weights.size() || paths.size() != sample_indices.size())
        throw std::logic_error("BridgeEnsemble: size mismatch");
    double sum = 0.0;
    for (double w : weights) {
        if (w < 0.0) throw std::logic_error("BridgeEnsemble: negative weight");
        sum += w;
    }
    if (!paths.empty() && std::abs(sum - 1.0) > 1e-12)
        throw std::logic_error("BridgeEnsemble: weights are not normalized");
    for (const GridPath& p : paths) {
        const Vec y = proj_rows * p.values.row(p.points() - 1).transpose();
        if ((y - b).norm() > epsilon)
            throw std::logic_error("BridgeEnsemble: endpoint outside the epsilon tube");
    }
}

BridgeEnsemble sample_bridge(const VectorFieldSystem& vf, const Vec& a, const Vec& b,
                             const Projection& proj, double epsilon, long n_target, int K,
                             std::uint64_t seed, int workers, long max_attempts,
                             long guard_samples) {
    if (!(epsilon > 0.0)) throw std::invalid_argument("sample_bridge: epsilon must be positive");
    if (n_target < 1) throw std::invalid_argument("sample_bridge: need a positive target");
    if (proj.ambient_dim() != vf.state_dim)
        throw std::invalid_argument("sample_bridge: projection dim mismatch");

    if (guard_samples > 0) {
        // The pinned law only exists where the endpoint density is positive.
        const double bw = std::max(epsilon, 0.05);
        const DensityEstimate guard =
            density_estimate(vf, a, b, proj, guard_samples, bw, K, mix64(seed ^ 0x9d5f), nullptr,
                             "constant 1", workers);
        // A "significantly positive" bound needs at least one kernel-scale
        // hit; a sum of far-tail dust has zero spread and would pass a bare
        // lower-confidence-bound test vacuously.
        long hits = 0;
        for (long i = 0; i < guard_samples; ++i) {
            const GridPath w = brownian_sample(vf.driver_dim, K, derive_seed(mix64(seed ^ 0x9d5f), i));
            const Vec y = proj.rows * rde_endpoint(vf, w, a);
            if ((y - b).norm() <= 3.0 * bw) ++hits;
        }
        if (hits == 0 || guard.lower_confidence(kGuardZ) <= 0.0)
            throw GuardError(
                "sample_bridge: endpoint density at the target is not significantly positive "
                "(99% lower bound <= 0); the pinned law does not exist there");
    }

    if (max_attempts <= 0) max_attempts = std::max<long>(1000000, 2000 * n_target);

    BridgeEnsemble out;
    out.a = a;
    out.b = b;
    out.proj_rows = proj.rows;
    out.epsilon = epsilon;
    out.K = K;
    out.seed = seed;

    const long block = std::max<long>(4096, 1024L * workers);
    std::vector<char> accepted(block);
    std::vector<Vec> endpoints(block);
    long processed = 0;
    long total_accepted = 0;
    long total_seen = 0;  // acceptances in processed blocks, beyond the target
    while (processed < max_attempts &&
           total_accepted < n_target) {
        const long count = std::min<long>(block, max_attempts - processed);
        run_indexed(count, workers, [&](long lo, long hi) {
            for (long i = lo; i < hi; ++i) {
                const long index = processed + i;
                const GridPath w = brownian_sample(vf.driver_dim, K, derive_seed(seed, index));
                const Vec y = proj.rows * rde_endpoint(vf, w, a);
                accepted[i] = (y - b).norm() <= epsilon ? 1 : 0;
                if (accepted[i]) endpoints[i] = y;
            }
        });
        for (long i = 0; i < count; ++i) {
            if (!accepted[i]) continue;
            ++total_seen;
            if (total_accepted >= n_target) continue;
            const long index = processed + i;
            const GridPath w = brownian_sample(vf.driver_dim, K, derive_seed(seed, index));
            GridPath x;
            rde_path(vf, w, a, x);
            out.paths.push_back(std::move(x));
            out.sample_indices.push_back(index);
            out.weights.push_back(
                std::exp(-(endpoints[i] - b).squaredNorm() / (2.0 * epsilon * epsilon)));
            ++total_accepted;
        }
        processed += count;
    }
    out.attempts = processed;
    out.acceptance_rate = processed > 0 ? static_cast<double>(total_seen) / processed : 0.0;

    if (total_accepted < n_target) {
        throw GuardError("sample_bridge: acceptance rate " +
                         std::to_string(out.acceptance_rate) + " after " +
                         std::to_string(processed) +
                         " attempts; enlarge epsilon or reduce the target count");
    }
    double sum = 0.0;
    for (double w : out.weights) sum += w;
    for (double& w : out.weights) w /= sum;
    out.validate();
    return out;
}

void save_ensemble(const std::string& directory, const BridgeEnsemble& ensemble) {
    namespace fs = std::filesystem;
    fs::create_directories(directory);
    nlohmann::json j;
    j["a"] = std::vector<double>(ensemble.a.data(), ensemble.a.data() + ensemble.a.size());
    j["b"] = std::vector<double>(ensemble.b.data(), ensemble.b.data() + ensemble.b.size());
    std::vector<std::vector<double>> rows;
    for (int r = 0; r < ensemble.proj_rows.rows(); ++r) {
        std::vector<double> row;
        for (int c = 0; c < ensemble.proj_rows.cols(); ++c)
            row.push_back(ensemble.proj_rows(r, c));
        rows.push_back(row);
    }
    j["pi"] = rows;
    j["epsilon"] = ensemble.epsilon;
    j["K"] = ensemble.K;
    j["seed"] = ensemble.seed;
    j["acceptance_rate"] = ensemble.acceptance_rate;
    j["attempts"] = ensemble.attempts;
    j["n_accepted"] = ensemble.paths.size();
    j["weights"] = ensemble.weights;
    j["sample_indices"] = ensemble.sample_indices;
    std::ofstream(fs::path(directory) / "manifest.json") << j.dump(2) << "\n";
    for (std::size_t i = 0; i < ensemble.paths.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "path_%06zu.csv", i);
        write_csv((fs::path(directory) / name).string(), ensemble.paths[i]);
    }
}

FddReport fdd_check(const BridgeEnsemble& ensemble, const std::vector<double>& times,
                    const std::vector<std::pair<std::string, MarginalFn>>& test_functions,
                    const VectorFieldSystem& vf, const Vec& a, const Vec& b,
                    const Projection& proj, long n_chain_samples, std::uint64_t seed) {
    if (ensemble.paths.empty()) throw std::invalid_argument("fdd_check: empty ensemble");
    const int K = ensemble.K;
    const long n_grid = grid_intervals(K);
    std::vector<long> nodes;
    for (double t : times) {
        if (!(t > 0.0 && t < 1.0))
            throw std::invalid_argument("fdd_check: times must lie strictly inside (0,1)");
        const double pos = t * n_grid;
        const long node = std::lround(pos);
        if (std::abs(pos - node) > 1e-9)
            throw std::invalid_argument("fdd_check: time is not on the ensemble grid");
        nodes.push_back(node);
    }

    // Independent route: evaluate the semigroup chain by nested simulation.
    // Each sample draws its driver segment by segment with separately seeded
    // increments (the restart at every requested time), solves once with the
    // same step-2 scheme, and weights the final state by the Gaussian kernel
    // at the pin.
    const double bw = ensemble.epsilon;
    const long n = n_chain_samples;
    const std::size_t nt = nodes.size();
    const int sub = proj.sub_dim();
    const double sd = std::sqrt(grid_mesh(K));

    Mat chain_marg(n, static_cast<int>(nt) * sub);
    Vec chain_weight(n);
    GridPath driver(vf.driver_dim, K);
    GridPath x_path(vf.state_dim, K);
    for (long s = 0; s < n; ++s) {
        long node = 0;
        driver.values.row(0).setZero();
        for (std::size_t seg = 0; seg <= nt; ++seg) {
            const long stop = seg < nt ? nodes[seg] : n_grid;
            Rng rng(derive_seed(derive_seed(seed, s), seg));
            for (long j = node + 1; j <= stop; ++j)
                for (int c = 0; c < vf.driver_dim; ++c)
                    driver.values(j, c) = driver.values(j - 1, c) + sd * rng.gaussian();
            node = stop;
        }
        rde_path(vf, driver, a, x_path);
        for (std::size_t k = 0; k < nt; ++k)
            chain_marg.row(s).segment(static_cast<int>(k) * sub, sub) =
                (proj.rows * x_path.values.row(nodes[k]).transpose()).transpose();
        const Vec y1 = proj.rows * x_path.values.row(n_grid).transpose();
        chain_weight(s) = std::exp(-(y1 - b).squaredNorm() / (2.0 * bw * bw));
    }
    const double weight_sum = chain_weight.sum();
    if (weight_sum <= 0.0)
        throw GuardError("fdd_check: the chain estimator received zero total weight");

    FddReport report;
    report.n_chain_samples = n;
    for (std::size_t k = 0; k < nt; ++k) {
        for (const auto& [name, g] : test_functions) {
            FddCheckEntry entry;
            entry.time = times[k];
            entry.function_name = name;

            // Weighted ensemble average and its delta-method standard error.
            double mean = 0.0;
            for (std::size_t i = 0; i < ensemble.paths.size(); ++i) {
                const Vec y =
                    proj.rows * ensemble.paths[i].values.row(nodes[k]).transpose();
                mean += ensemble.weights[i] * g(y);
            }
            double var = 0.0;
            for (std::size_t i = 0; i < ensemble.paths.size(); ++i) {
                const Vec y =
                    proj.rows * ensemble.paths[i].values.row(nodes[k]).transpose();
                const double dev = g(y) - mean;
                var += ensemble.weights[i] * ensemble.weights[i] * dev * dev;
            }
            entry.ensemble_mean = mean;
            entry.ensemble_se = std::sqrt(var);

            // Ratio estimator over the chain samples.
            double num = 0.0;
            for (long s = 0; s < n; ++s)
                num += chain_weight(s) *
                       g(chain_marg.row(s).segment(static_cast<int>(k) * sub, sub).transpose());
            const double ratio = num / weight_sum;
            double rvar = 0.0;
            for (long s = 0; s < n; ++s) {
                const double gs =
                    g(chain_marg.row(s).segment(static_cast<int>(k) * sub, sub).transpose());
                const double dev = chain_weight(s) * (gs - ratio);
                rvar += dev * dev;
            }
            entry.chain_mean = ratio;
            entry.chain_se = std::sqrt(rvar) / weight_sum;

            const double denom =
                std::sqrt(entry.ensemble_se * entry.ensemble_se + entry.chain_se * entry.chain_se);
            entry.z_score = denom > 0.0 ? (entry.ensemble_mean - entry.chain_mean) / denom : 0.0;
            report.max_abs_z = std::max(report.max_abs_z, std::abs(entry.z_score));
            report.entries.push_back(std::move(entry));
        }
    }
    return report;
}

}  // namespace rplab
