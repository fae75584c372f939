#pragma once

#include <vector>

#include "rplab/types.hpp"

namespace rplab {

// Orthogonal projection onto a subspace of the state space, stored as
// orthonormal rows. Construction checks orthonormality to 1e-12.
struct Projection {
    Mat rows;  // e' x e

    explicit Projection(Mat rows_);

    int ambient_dim() const { return static_cast<int>(rows.cols()); }
    int sub_dim() const { return static_cast<int>(rows.rows()); }

    Vec apply(const Vec& x) const { return rows * x; }

    static Projection identity(int e);
    // Projection onto the listed coordinates (0-based).
    static Projection coordinates(const std::vector<int>& coords, int e);
};

}  // namespace rplab
