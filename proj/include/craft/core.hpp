#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace craft {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
/// N x D particle positions, one particle per row.
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CRef = Eigen::Ref<const Vec>;
using VRef = Eigen::Ref<Vec>;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// Raised when every weight in an ensemble is zero (all log-weights -inf).
class DegenerateEnsembleError : public std::runtime_error {
 public:
  explicit DegenerateEnsembleError(const std::string& what, int step = -1)
      : std::runtime_error(step >= 0 ? what + " (step " + std::to_string(step) + ")" : what),
        step_(step) {}
  int step() const noexcept { return step_; }

 private:
  int step_;
};

/// Raised by trainers when a loss, gradient or flow scale leaves the finite range.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, int temperature, int iteration)
      : std::runtime_error(what + " (temperature " + std::to_string(temperature) + ", iteration " +
                           std::to_string(iteration) + ")"),
        temperature_(temperature),
        iteration_(iteration) {}
  int temperature() const noexcept { return temperature_; }
  int iteration() const noexcept { return iteration_; }

 private:
  int temperature_;
  int iteration_;
};

}  // namespace craft
