#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace vgibbs {

using Index = Eigen::Index;
using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Row-major N x d tables: rows are data points.
using Table = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class InvalidArgument : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a numeric routine cannot produce a finite answer
/// (non-PD covariance, non-finite gradient, diverged objective).
class NumericError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Data violates a precondition of an estimator (e.g. a column with no observations).
class InvalidData : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
  public:
    ParseError(const std::string& what, long row) : std::runtime_error(what), row_(row) {}
    long row() const noexcept { return row_; }

  private:
    long row_;
};

inline void require(bool cond, const char* msg) {
    if (!cond) throw InvalidArgument(msg);
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw InvalidArgument(msg);
}

}  // namespace vgibbs
