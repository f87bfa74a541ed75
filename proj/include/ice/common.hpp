#ifndef ICE_COMMON_HPP
#define ICE_COMMON_HPP

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

namespace ice {

/// Row-major dense matrix. Row r of a flattened feature map is one spatial
/// position's channel vector, so row-major keeps the flatten a plain copy.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Bad arguments or inputs that violate an operation's preconditions.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Failure while reading or writing a file.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A solver reached a state it cannot continue from (e.g. a degenerate basis).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string shape_str(Eigen::Index rows, Eigen::Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

}  // namespace detail
}  // namespace ice

#endif  // ICE_COMMON_HPP
