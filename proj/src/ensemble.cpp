#include "egmf/ensemble.hpp"

#include "egmf/error.hpp"

#include <cmath>
#include <ostream>

namespace egmf {

Ensemble::Ensemble(Matrix members) : members_(std::move(members)) {
  if (members_.cols() < 1 || members_.rows() < 1) {
    throw ConfigError("ensemble needs at least one member of dimension >= 1");
  }
}

Ensemble::Ensemble(std::span<const StateVector> members) {
  if (members.empty()) {
    throw ConfigError("ensemble needs at least one member");
  }
  const auto n = members.front().size();
  members_.resize(n, static_cast<Eigen::Index>(members.size()));
  for (std::size_t i = 0; i < members.size(); ++i) {
    if (members[i].size() != n) {
      throw ConfigError("ensemble members must share one dimension");
    }
    members_.col(static_cast<Eigen::Index>(i)) = members[i];
  }
}

Eigen::VectorXd Ensemble::project(const StateVector& h) const {
  return members_.transpose() * h;
}

StateVector ensemble_mean(const Ensemble& e) {
  return e.matrix().rowwise().sum() / static_cast<double>(e.size());
}

Matrix ensemble_covariance(const Ensemble& e) {
  if (e.size() < 2) {
    throw ConfigError("ensemble covariance needs at least two members");
  }
  const Matrix anomalies = e.matrix().colwise() - ensemble_mean(e);
  Matrix cov = anomalies * anomalies.transpose() / static_cast<double>(e.size() - 1);
  // Exact symmetry regardless of the product kernel's summation order.
  return 0.5 * (cov + cov.transpose());
}

Ensemble inflate(const Ensemble& e, double rho) {
  if (!(rho >= 1.0)) {
    throw ConfigError("inflation factor must be >= 1");
  }
  if (rho == 1.0) {
    return e;
  }
  const StateVector mean = ensemble_mean(e);
  Matrix inflated = e.matrix();
  inflated.colwise() -= mean;
  inflated *= rho;
  inflated.colwise() += mean;
  return Ensemble(std::move(inflated));
}

double rmse(std::span<const StateVector> series_a, std::span<const StateVector> series_b) {
  if (series_a.size() != series_b.size()) {
    throw ConfigError("rmse: series lengths differ");
  }
  if (series_a.empty()) {
    throw ConfigError("rmse: empty series");
  }
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < series_a.size(); ++k) {
    if (series_a[k].size() != series_b[k].size()) {
      throw ConfigError("rmse: state dimensions differ");
    }
    sum += (series_a[k] - series_b[k]).squaredNorm();
    count += static_cast<std::size_t>(series_a[k].size());
  }
  return std::sqrt(sum / static_cast<double>(count));
}

void write_ensemble_csv(const Ensemble& e, std::ostream& out) {
  out << "member_id";
  for (int j = 0; j < e.dimension(); ++j) {
    out << ",x" << (j + 1);
  }
  out << '\n';
  out.precision(17);
  for (int i = 0; i < e.size(); ++i) {
    out << i;
    for (int j = 0; j < e.dimension(); ++j) {
      out << ',' << e.matrix()(j, i);
    }
    out << '\n';
  }
}

}  // namespace egmf
