#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace wilke {

// Parameters and activations are row-major so that one row is one token and
// the raw buffer matches the tensor container byte order.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixF = Matrix<float>;
using VectorF = Vector<float>;
using MatrixD = Matrix<double>;
using VectorD = Vector<double>;

using Token = std::int32_t;
using Tokens = std::vector<Token>;

/// Base error for all library failures. The message names the failing field
/// or step so the CLI can echo it verbatim.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input did not satisfy a documented precondition (bad shape, bad id, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A numerical routine produced a non-finite value or failed to converge.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated file content.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace wilke
