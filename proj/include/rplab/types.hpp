#pragma once

#include <Eigen/Dense>

namespace rplab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Number of nodes of the uniform dyadic grid {j 2^-level : 0 <= j <= 2^level}.
inline int grid_points(int level) { return (1 << level) + 1; }
inline int grid_intervals(int level) { return 1 << level; }
inline double grid_mesh(int level) { return 1.0 / static_cast<double>(1 << level); }

}  // namespace rplab
