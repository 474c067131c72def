#pragma once

#include <Eigen/Dense>

#include <iosfwd>
#include <span>
#include <vector>

namespace egmf {

using StateVector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// M equally weighted state vectors of dimension N, stored column-wise.
///
/// Weights are implicitly 1/M. An ensemble is a value: analysis and
/// forecast steps return new ensembles instead of mutating their input.
class Ensemble {
 public:
  Ensemble() = default;
  /// Columns of `members` are the ensemble members.
  explicit Ensemble(Matrix members);
  explicit Ensemble(std::span<const StateVector> members);

  int size() const { return static_cast<int>(members_.cols()); }
  int dimension() const { return static_cast<int>(members_.rows()); }

  auto member(int i) const { return members_.col(i); }
  const Matrix& matrix() const { return members_; }

  /// Projection h·x_i of every member.
  Eigen::VectorXd project(const StateVector& h) const;

 private:
  Matrix members_;
};

StateVector ensemble_mean(const Ensemble& e);

/// Unbiased (1/(M-1)) ensemble covariance. Requires M >= 2.
Matrix ensemble_covariance(const Ensemble& e);

/// Multiplicative inflation about the mean: x_i <- xbar + rho (x_i - xbar).
Ensemble inflate(const Ensemble& e, double rho);

/// Root of the time-and-component mean squared difference.
double rmse(std::span<const StateVector> series_a, std::span<const StateVector> series_b);

/// Rows `member_id,x1..xN`.
void write_ensemble_csv(const Ensemble& e, std::ostream& out);

}  // namespace egmf
