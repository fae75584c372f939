#include "rplab/pathspace.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace rplab {

void GridPath::validate() const {
    if (dim <= 0) throw std::invalid_argument("GridPath: dimension must be positive");
    if (level <= 0) throw std::invalid_argument("GridPath: level must be positive");
    if (values.rows() != grid_points(level) || values.cols() != dim)
        throw std::invalid_argument("GridPath: values must be (2^level+1) x dim");
    if (!values.allFinite()) throw std::invalid_argument("GridPath: non-finite entries");
}

void CameronMartinPath::validate() const {
    if (dim <= 0) throw std::invalid_argument("CameronMartinPath: dimension must be positive");
    if (level < 0) throw std::invalid_argument("CameronMartinPath: level must be nonnegative");
    if (knots.rows() != grid_points(level) || knots.cols() != dim)
        throw std::invalid_argument("CameronMartinPath: knots must be (2^level+1) x dim");
    if (!knots.allFinite()) throw std::invalid_argument("CameronMartinPath: non-finite entries");
    if (knots.row(0).cwiseAbs().maxCoeff() != 0.0)
        throw std::invalid_argument("CameronMartinPath: must start at zero");
}

Vec CameronMartinPath::value_at(double t) const {
    if (t < 0.0 || t > 1.0) throw std::domain_error("CameronMartinPath: t outside [0,1]");
    const int n = grid_intervals(level);
    const double pos = t * n;
    int j = static_cast<int>(pos);
    if (j >= n) j = n - 1;
    const double frac = pos - j;
    return (knots.row(j) * (1.0 - frac) + knots.row(j + 1) * frac).transpose();
}

CameronMartinPath CameronMartinPath::refined(int finer_level) const {
    if (finer_level < level)
        throw std::invalid_argument("CameronMartinPath::refined: target level too coarse");
    if (finer_level == level) return *this;
    CameronMartinPath out(dim, finer_level);
    const int stride = 1 << (finer_level - level);
    for (int j = 0; j < points() - 1; ++j) {
        const auto a = knots.row(j);
        const auto b = knots.row(j + 1);
        for (int s = 0; s < stride; ++s) {
            const double frac = static_cast<double>(s) / stride;
            out.knots.row(j * stride + s) = a * (1.0 - frac) + b * frac;
        }
    }
    out.knots.row(out.points() - 1) = knots.row(points() - 1);
    return out;
}

GridPath CameronMartinPath::as_grid_path() const {
    GridPath g(dim, level == 0 ? 1 : level);
    if (level == 0) {
        g.values.row(0) = knots.row(0);
        g.values.row(1) = 0.5 * (knots.row(0) + knots.row(1));
        g.values.row(2) = knots.row(1);
    } else {
        g.values = knots;
    }
    return g;
}

BesovParams::BesovParams(double alpha_, int m_) : alpha(alpha_), m(m_) {
    if (m < 1) throw std::invalid_argument("besov parameters: m must be a positive integer");
    if (!(alpha > 1.0 / 3.0 && alpha < 0.5))
        throw std::invalid_argument("besov parameters: need 1/3 < alpha < 1/2");
    if (!(alpha - 1.0 / (4.0 * m) > 1.0 / 3.0))
        throw std::invalid_argument("besov parameters: need alpha - 1/(4m) > 1/3");
    if (!(4.0 * m * (0.5 - alpha) > 1.0))
        throw std::invalid_argument("besov parameters: need 4m(1/2 - alpha) > 1");
}

HaarIndex::HaarIndex(int n_, int m_, int i_, int dim) : n(n_), m(m_), i(i_) {
    if (n < 0) throw std::invalid_argument("HaarIndex: n must be >= 0");
    const int m_max = n == 0 ? 1 : (1 << (n - 1));
    if (m < 1 || m > m_max) throw std::invalid_argument("HaarIndex: m out of range");
    if (i < 1 || i > dim) throw std::invalid_argument("HaarIndex: coordinate out of range");
}

double haar_psi(const HaarIndex& idx, double t) {
    if (t < 0.0 || t > 1.0) throw std::domain_error("haar_psi: t outside [0,1]");
    if (idx.n == 0) return 1.0;
    const double mesh = 1.0 / static_cast<double>(1 << idx.n);
    const double lo = (2.0 * idx.m - 2.0) * mesh;
    const double mid = (2.0 * idx.m - 1.0) * mesh;
    const double hi = 2.0 * idx.m * mesh;
    const double amp = std::exp2(0.5 * (idx.n - 1));
    if (t >= lo && t < mid) return amp;
    if (t >= mid && t < hi) return -amp;
    return 0.0;
}

double haar_phi(const HaarIndex& idx, double t) {
    if (t < 0.0 || t > 1.0) throw std::domain_error("haar_phi: t outside [0,1]");
    if (idx.n == 0) return t;
    const double mesh = 1.0 / static_cast<double>(1 << idx.n);
    const double lo = (2.0 * idx.m - 2.0) * mesh;
    const double mid = (2.0 * idx.m - 1.0) * mesh;
    const double hi = 2.0 * idx.m * mesh;
    const double amp = std::exp2(0.5 * (idx.n - 1));
    const double up = std::max(0.0, std::min(t, mid) - lo);
    const double down = std::max(0.0, std::min(t, hi) - mid);
    return amp * (up - down);
}

CameronMartinPath haar_path(const HaarIndex& idx, int dim, int level) {
    if (level < idx.n)
        throw std::invalid_argument("haar_path: knot level must resolve the Haar level");
    CameronMartinPath h(dim, level);
    for (int j = 0; j <= grid_intervals(level); ++j)
        h.knots(j, idx.i - 1) = haar_phi(idx, h.t(j));
    return h;
}

double h_inner(const CameronMartinPath& h, const CameronMartinPath& k) {
    if (h.dim != k.dim) throw std::invalid_argument("h_inner: dimension mismatch");
    const int L = std::max(h.level, k.level);
    const int n = grid_intervals(L);
    const int sh = L - h.level;
    const int sk = L - k.level;
    // On each fine interval both slopes are constant; the integral is a sum.
    const double scale_h = static_cast<double>(1 << h.level);
    const double scale_k = static_cast<double>(1 << k.level);
    double acc = 0.0;
    for (int j = 0; j < n; ++j) {
        const int jh = j >> sh;
        const int jk = j >> sk;
        const double dot = (h.knots.row(jh + 1) - h.knots.row(jh))
                               .dot(k.knots.row(jk + 1) - k.knots.row(jk));
        acc += dot;
    }
    // Each coarse increment is visited 2^{L-level} times, once per sub-interval.
    return acc * scale_h * scale_k / static_cast<double>(n);
}

namespace {

double hoelder_on_values(const Mat& values, int level, double alpha) {
    if (!(alpha > 0.0 && alpha <= 1.0))
        throw std::domain_error("hoelder_seminorm: need 0 < alpha <= 1");
    const int n = static_cast<int>(values.rows()) - 1;
    const double mesh = grid_mesh(level);
    double best = 0.0;
    for (int lag = 1; lag <= n; ++lag) {
        const int count = n + 1 - lag;
        const double diff =
            (values.bottomRows(count) - values.topRows(count)).rowwise().norm().maxCoeff();
        const double value = diff / std::pow(lag * mesh, alpha);
        if (value > best) best = value;
    }
    return best;
}

}  // namespace

double hoelder_seminorm(const GridPath& p, double alpha) {
    return hoelder_on_values(p.values, p.level, alpha);
}

double hoelder_seminorm(const CameronMartinPath& p, double alpha) {
    return hoelder_on_values(p.knots, p.level, alpha);
}

namespace {

// Subsample both paths to their common (coarser) grid and apply f.
template <typename F>
double on_common_grid(const GridPath& p, const GridPath& q, F&& f) {
    if (p.dim != q.dim) throw std::invalid_argument("grid distance: dimension mismatch");
    const int L = std::min(p.level, q.level);
    const int sp = p.level - L;
    const int sq = q.level - L;
    Mat diff(grid_points(L), p.dim);
    for (int j = 0; j < grid_points(L); ++j)
        diff.row(j) = p.values.row(j << sp) - q.values.row(j << sq);
    return f(diff, L);
}

}  // namespace

double sup_distance(const GridPath& p, const GridPath& q) {
    return on_common_grid(p, q, [](const Mat& diff, int) {
        return diff.rowwise().norm().maxCoeff();
    });
}

double hoelder_distance(const GridPath& p, const GridPath& q, double alpha) {
    return on_common_grid(p, q, [alpha](const Mat& diff, int L) {
        return hoelder_on_values(diff, L, alpha);
    });
}

CameronMartinPath dyadic_project(const GridPath& p, int n) {
    if (n < 1) throw std::invalid_argument("dyadic_project: level must be positive");
    if (n > p.level)
        throw std::invalid_argument("dyadic_project: grid does not resolve the dyadic knots");
    if (p.values.row(0).cwiseAbs().maxCoeff() != 0.0)
        throw std::invalid_argument("dyadic_project: path must start at zero");
    CameronMartinPath out(p.dim, n);
    const int stride = 1 << (p.level - n);
    for (int j = 0; j <= grid_intervals(n); ++j) out.knots.row(j) = p.values.row(j * stride);
    return out;
}

CameronMartinPath dyadic_project(const CameronMartinPath& h, int n) {
    if (n < 1) throw std::invalid_argument("dyadic_project: level must be positive");
    if (n >= h.level) return h.refined(n);  // already in K_n; projection is the identity
    CameronMartinPath out(h.dim, n);
    const int stride = 1 << (h.level - n);
    for (int j = 0; j <= grid_intervals(n); ++j) out.knots.row(j) = h.knots.row(j * stride);
    return out;
}

HaarBasis::HaarBasis(int N_, int dim_) : N(N_), dim(dim_) {
    if (N < 1) throw std::invalid_argument("HaarBasis: truncation level must be >= 1");
    if (dim < 1) throw std::invalid_argument("HaarBasis: dimension must be >= 1");
}

int HaarBasis::size() const { return dim * (1 << N); }

HaarIndex HaarBasis::index(int column) const {
    if (column < 0 || column >= size()) throw std::out_of_range("HaarBasis::index");
    int fn = column / dim;  // function number within the scalar basis
    const int i = column % dim + 1;
    if (fn == 0) return HaarIndex(0, 1, i, dim);
    // Scalar functions are ordered phi^{0,1}, phi^{1,1}, phi^{2,1..2}, ...
    int n = 1;
    int offset = 1;
    while (fn >= offset + (1 << (n - 1))) {
        offset += 1 << (n - 1);
        ++n;
    }
    return HaarIndex(n, fn - offset + 1, i, dim);
}

Vec HaarBasis::coefficients(const CameronMartinPath& h) const {
    const int L = std::max(h.level, N);
    const CameronMartinPath hf = h.refined(L);
    const int n = grid_intervals(L);
    Mat inc = hf.knots.bottomRows(n) - hf.knots.topRows(n);
    Vec out(size());
    for (int c = 0; c < size(); ++c) {
        const HaarIndex idx = index(c);
        // <h, phi e_i>_H = int h_i' psi = sum over intervals psi * dh_i.
        double acc = 0.0;
        if (idx.n == 0) {
            acc = inc.col(idx.i - 1).sum();
        } else {
            const int span = 1 << (L - idx.n);  // fine intervals per half-support
            const int lo = (2 * idx.m - 2) * span;
            const double amp = std::exp2(0.5 * (idx.n - 1));
            for (int j = 0; j < span; ++j) acc += amp * inc(lo + j, idx.i - 1);
            for (int j = 0; j < span; ++j) acc -= amp * inc(lo + span + j, idx.i - 1);
        }
        out(c) = acc;
    }
    return out;
}

CameronMartinPath HaarBasis::combine(const Vec& coeffs, int level) const {
    if (coeffs.size() != size()) throw std::invalid_argument("HaarBasis::combine: size mismatch");
    if (level < N) throw std::invalid_argument("HaarBasis::combine: level must resolve N");
    const int n = grid_intervals(level);
    Mat slope = Mat::Zero(n, dim);  // derivative, constant per fine interval
    for (int c = 0; c < size(); ++c) {
        const double w = coeffs(c);
        if (w == 0.0) continue;
        const HaarIndex idx = index(c);
        if (idx.n == 0) {
            slope.col(idx.i - 1).array() += w;
        } else {
            const int span = 1 << (level - idx.n);
            const int lo = (2 * idx.m - 2) * span;
            const double amp = std::exp2(0.5 * (idx.n - 1));
            slope.col(idx.i - 1).segment(lo, span).array() += w * amp;
            slope.col(idx.i - 1).segment(lo + span, span).array() -= w * amp;
        }
    }
    CameronMartinPath out(dim, level);
    const double mesh = grid_mesh(level);
    for (int j = 0; j < n; ++j) out.knots.row(j + 1) = out.knots.row(j) + slope.row(j) * mesh;
    return out;
}

void write_csv(const std::string& path, const GridPath& p) {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw std::runtime_error("write_csv: cannot open " + path);
    std::fprintf(f, "t");
    for (int c = 1; c <= p.dim; ++c) std::fprintf(f, ",x%d", c);
    std::fprintf(f, "\n");
    for (int j = 0; j < p.points(); ++j) {
        std::fprintf(f, "%.16e", p.t(j));
        for (int c = 0; c < p.dim; ++c) std::fprintf(f, ",%.16e", p.values(j, c));
        std::fprintf(f, "\n");
    }
    std::fclose(f);
}

GridPath read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("read_csv: empty file");
    int dim = 0;
    for (char ch : line)
        if (ch == ',') ++dim;
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> row;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        if (static_cast<int>(row.size()) != dim + 1)
            throw std::runtime_error("read_csv: ragged row");
        rows.push_back(std::move(row));
    }
    const int npts = static_cast<int>(rows.size());
    int level = 0;
    while (grid_points(level) < npts) ++level;
    if (grid_points(level) != npts)
        throw std::runtime_error("read_csv: row count is not 2^K + 1");
    GridPath p(dim, level);
    for (int j = 0; j < npts; ++j)
        for (int c = 0; c < dim; ++c) p.values(j, c) = rows[j][c + 1];
    p.validate();
    return p;
}

}  // namespace rplab
