#include "rplab/projection.hpp"

#include <stdexcept>

namespace rplab {

Projection::Projection(Mat rows_) : rows(std::move(rows_)) {
    if (rows.rows() < 1 || rows.rows() > rows.cols())
        throw std::invalid_argument("Projection: need 1 <= e' <= e");
    const Mat gram = rows * rows.transpose();
    const double defect =
        (gram - Mat::Identity(rows.rows(), rows.rows())).cwiseAbs().maxCoeff();
    if (defect > 1e-12)
        throw std::invalid_argument("Projection: rows are not orthonormal to 1e-12");
}

Projection Projection::identity(int e) { return Projection(Mat::Identity(e, e)); }

Projection Projection::coordinates(const std::vector<int>& coords, int e) {
    Mat r = Mat::Zero(static_cast<int>(coords.size()), e);
    for (int k = 0; k < static_cast<int>(coords.size()); ++k) {
        if (coords[k] < 0 || coords[k] >= e)
            throw std::invalid_argument("Projection::coordinates: index out of range");
        r(k, coords[k]) = 1.0;
    }
    return Projection(std::move(r));
}

}  // namespace rplab
