#pragma once

#include <complex>
#include <cstdint>

#include <Eigen/Core>

namespace fmc {

using Index = std::int64_t;

// Frame-major dense matrices: one row per frame (or per vector).
template <typename Scalar>
using MatrixT =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Matrix = MatrixT<double>;
using ComplexMatrix = MatrixT<std::complex<double>>;
using Vector = Eigen::VectorXd;

} // namespace fmc
