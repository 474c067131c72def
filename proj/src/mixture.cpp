#include "egmf/mixture.hpp"

#include "egmf/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>
#include <string>

namespace egmf {

namespace {

constexpr double kEmptyComponent = 1e-12;
const double kLogTwoPi = std::log(2.0 * std::numbers::pi);

double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& terms) {
  const double top = terms.maxCoeff();
  if (!std::isfinite(top)) {
    return top;
  }
  return top + std::log((terms.array() - top).exp().sum());
}

std::vector<GaussianDensity> densities(const GaussianMixture& m) {
  std::vector<GaussianDensity> out;
  out.reserve(m.means.size());
  for (int l = 0; l < m.components(); ++l) {
    out.emplace_back(m.means[l], m.covariances[l]);
  }
  return out;
}

// Row i holds log(alpha_l) + log pi_l(x_i).
Matrix log_terms(const GaussianMixture& m, const Ensemble& e) {
  if (m.dimension() != e.dimension()) {
    throw ConfigError("mixture and ensemble dimensions differ");
  }
  const auto dens = densities(m);
  Matrix terms(e.size(), m.components());
  for (int l = 0; l < m.components(); ++l) {
    const double log_alpha = std::log(m.weights[l]);
    for (int i = 0; i < e.size(); ++i) {
      terms(i, l) = log_alpha + dens[l].logpdf(e.member(i));
    }
  }
  return terms;
}

Matrix normalize_log_rows(const Matrix& terms) {
  Matrix out(terms.rows(), terms.cols());
  for (Eigen::Index i = 0; i < terms.rows(); ++i) {
    const double lse = log_sum_exp(terms.row(i).transpose());
    if (!std::isfinite(lse)) {
      throw NumericalError("responsibilities: every component density underflows for member " +
                           std::to_string(i));
    }
    out.row(i) = terms.row(i).array() - lse;
  }
  return out;
}

Responsibilities exp_rows(const Matrix& log_beta) {
  Responsibilities beta = log_beta.array().exp();
  for (Eigen::Index i = 0; i < beta.rows(); ++i) {
    beta.row(i) /= beta.row(i).sum();
  }
  return beta;
}

Matrix floor_eigenvalues(const Matrix& cov, double varfloor) {
  if (varfloor <= 0.0) {
    return cov;
  }
  if (cov.rows() == 1) {
    return Matrix::Constant(1, 1, std::max(cov(0, 0), varfloor));
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  if (eig.eigenvalues().minCoeff() >= varfloor) {
    return cov;
  }
  const Eigen::VectorXd clamped = eig.eigenvalues().cwiseMax(varfloor);
  Matrix out = eig.eigenvectors() * clamped.asDiagonal() * eig.eigenvectors().transpose();
  return 0.5 * (out + out.transpose());
}

Matrix fallback_covariance(const Ensemble& e, double delta) {
  const int n = e.dimension();
  Matrix cov = e.size() >= 2 ? ensemble_covariance(e) : Matrix::Zero(n, n);
  cov.diagonal().array() += delta;
  return cov;
}

// Linear-interpolation quantile of sorted values.
double quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

}  // namespace

void GaussianMixture::validate() const {
  const int L = components();
  if (L < 1) {
    throw ConfigError("mixture needs at least one component");
  }
  if (static_cast<int>(means.size()) != L || static_cast<int>(covariances.size()) != L) {
    throw ConfigError("mixture field lengths disagree");
  }
  if ((weights.array() < 0.0).any() || std::abs(weights.sum() - 1.0) > 1e-12) {
    throw ConfigError("mixture weights must be non-negative and sum to one");
  }
  const int n = dimension();
  for (int l = 0; l < L; ++l) {
    if (means[l].size() != n || covariances[l].rows() != n || covariances[l].cols() != n) {
      throw ConfigError("mixture component shapes disagree");
    }
    if (!covariances[l].isApprox(covariances[l].transpose(), 1e-12)) {
      throw ConfigError("mixture covariance is not symmetric");
    }
  }
}

GaussianDensity::GaussianDensity(StateVector mean, const Matrix& cov)
    : mean_(std::move(mean)), chol_(cov) {
  if (cov.rows() != mean_.size() || cov.cols() != mean_.size()) {
    throw ConfigError("covariance shape does not match mean");
  }
  if (chol_.info() != Eigen::Success || !(chol_.matrixLLT().diagonal().array() > 0.0).all()) {
    throw ConfigError("covariance is not positive definite");
  }
  const double log_det = 2.0 * chol_.matrixLLT().diagonal().array().log().sum();
  log_norm_ = -0.5 * (static_cast<double>(mean_.size()) * kLogTwoPi + log_det);
}

double GaussianDensity::logpdf(const Eigen::Ref<const StateVector>& x) const {
  const StateVector z = chol_.matrixL().solve(x - mean_);
  return log_norm_ - 0.5 * z.squaredNorm();
}

double gaussian_logpdf(const StateVector& x, const StateVector& mean, const Matrix& cov) {
  if (!cov.isApprox(cov.transpose(), 1e-12)) {
    throw ConfigError("covariance is not symmetric");
  }
  return GaussianDensity(mean, cov).logpdf(x);
}

double normal_logpdf(double y, double mean, double sigma) {
  const double z = (y - mean) / sigma;
  return -0.5 * (kLogTwoPi + z * z) - std::log(sigma);
}

Matrix log_responsibilities(const GaussianMixture& m, const Ensemble& e) {
  if (m.components() == 1) {
    return Matrix::Zero(e.size(), 1);
  }
  return normalize_log_rows(log_terms(m, e));
}

Responsibilities responsibilities(const GaussianMixture& m, const Ensemble& e) {
  if (m.components() == 1) {
    return Responsibilities::Ones(e.size(), 1);
  }
  return exp_rows(log_responsibilities(m, e));
}

namespace {

Matrix marginal_log_terms(const GaussianMixture& m, const Ensemble& e, const StateVector& h,
                          double varfloor) {
  const auto marg = marginal(m, h, varfloor);
  const Eigen::VectorXd y = e.project(h);
  Matrix terms(e.size(), m.components());
  for (int l = 0; l < m.components(); ++l) {
    const double log_alpha = std::log(m.weights[l]);
    for (int i = 0; i < e.size(); ++i) {
      terms(i, l) = log_alpha + normal_logpdf(y[i], marg[l].ybar, marg[l].sigma);
    }
  }
  return terms;
}

}  // namespace

Matrix log_marginal_responsibilities(const GaussianMixture& m, const Ensemble& e,
                                     const StateVector& h, double varfloor) {
  if (m.components() == 1) {
    return Matrix::Zero(e.size(), 1);
  }
  return normalize_log_rows(marginal_log_terms(m, e, h, varfloor));
}

Responsibilities marginal_responsibilities(const GaussianMixture& m, const Ensemble& e,
                                           const StateVector& h, double varfloor) {
  if (m.components() == 1) {
    return Responsibilities::Ones(e.size(), 1);
  }
  return exp_rows(log_marginal_responsibilities(m, e, h, varfloor));
}

double mixture_loglik(const GaussianMixture& m, const Ensemble& e) {
  const Matrix terms = log_terms(m, e);
  double total = 0.0;
  for (Eigen::Index i = 0; i < terms.rows(); ++i) {
    total += log_sum_exp(terms.row(i).transpose());
  }
  return total;
}

GaussianMixture em_step(const GaussianMixture& m, const Ensemble& e, double delta, double varfloor,
                        EmEvents* events) {
  if (delta < 0.0 || varfloor < 0.0) {
    throw ConfigError("EM regularization parameters must be non-negative");
  }
  const int L = m.components();
  const int M = e.size();
  const Responsibilities beta = responsibilities(m, e);
  const Eigen::VectorXd counts = beta.colwise().sum().transpose();

  GaussianMixture out;
  out.weights.resize(L);
  out.means.resize(L);
  out.covariances.resize(L);
  for (int l = 0; l < L; ++l) {
    if (counts[l] < kEmptyComponent) {
      // Re-seed at the worst explained member.
      const Matrix terms = log_terms(m, e);
      int worst = 0;
      double worst_ll = std::numeric_limits<double>::infinity();
      for (int i = 0; i < M; ++i) {
        const double ll = log_sum_exp(terms.row(i).transpose());
        if (ll < worst_ll) {
          worst_ll = ll;
          worst = i;
        }
      }
      out.means[l] = e.member(worst);
      out.covariances[l] = floor_eigenvalues(fallback_covariance(e, delta), varfloor);
      out.weights[l] = 1.0 / M;
      if (events != nullptr) {
        ++events->reinitializations;
      }
      continue;
    }
    const Eigen::VectorXd w = beta.col(l) / counts[l];
    out.means[l] = e.matrix() * w;
    const Matrix anomalies = e.matrix().colwise() - out.means[l];
    Matrix cov = anomalies * w.asDiagonal() * anomalies.transpose();
    cov = (0.5 * (cov + cov.transpose())).eval();
    cov.diagonal().array() += delta;
    out.covariances[l] = floor_eigenvalues(cov, varfloor);
    out.weights[l] = counts[l] / M;
  }
  out.weights /= out.weights.sum();
  return out;
}

GaussianMixture default_em_init(const Ensemble& e, int L, double delta, double varfloor) {
  if (L < 1) {
    throw ConfigError("number of mixture components must be >= 1");
  }
  const int M = e.size();
  const Matrix cov = floor_eigenvalues(fallback_covariance(e, delta), varfloor);
  GaussianMixture m;
  m.weights = Eigen::VectorXd::Constant(L, 1.0 / L);
  m.covariances.assign(static_cast<std::size_t>(L), cov);
  if (L == 1) {
    m.means.push_back(ensemble_mean(e));
    return m;
  }
  if (e.dimension() == 1) {
    std::vector<double> xs(e.matrix().data(), e.matrix().data() + M);
    std::sort(xs.begin(), xs.end());
    for (int l = 0; l < L; ++l) {
      m.means.push_back(StateVector::Constant(1, quantile(xs, (l + 0.5) / L)));
    }
    return m;
  }
  // Farthest-point seeding.
  int a = 0;
  int b = 0;
  double best = -1.0;
  for (int i = 0; i < M; ++i) {
    for (int j = i + 1; j < M; ++j) {
      const double d = (e.member(i) - e.member(j)).squaredNorm();
      if (d > best) {
        best = d;
        a = i;
        b = j;
      }
    }
  }
  std::vector<int> chosen{a, b};
  while (static_cast<int>(chosen.size()) < L) {
    int pick = 0;
    double far = -1.0;
    for (int i = 0; i < M; ++i) {
      double nearest = std::numeric_limits<double>::infinity();
      for (int c : chosen) {
        nearest = std::min(nearest, (e.member(i) - e.member(c)).squaredNorm());
      }
      if (nearest > far) {
        far = nearest;
        pick = i;
      }
    }
    chosen.push_back(pick);
  }
  for (int l = 0; l < L; ++l) {
    m.means.push_back(e.member(chosen[static_cast<std::size_t>(l)]));
  }
  return m;
}

EmFit em_fit(const Ensemble& e, int L, const std::optional<GaussianMixture>& init,
             const EmParams& params) {
  if (L < 1) {
    throw ConfigError("number of mixture components must be >= 1");
  }
  EmFit fit;
  fit.mixture = init ? *init : default_em_init(e, L, params.delta, params.varfloor);
  if (fit.mixture.components() != L) {
    throw ConfigError("initial mixture has the wrong number of components");
  }
  double previous = mixture_loglik(fit.mixture, e);
  fit.loglik = previous;
  EmEvents events;
  for (int it = 0; it < params.max_iter; ++it) {
    fit.mixture = em_step(fit.mixture, e, params.delta, params.varfloor, &events);
    fit.iterations = it + 1;
    const double current = mixture_loglik(fit.mixture, e);
    if (!std::isfinite(current)) {
      throw NumericalError("EM diverged: log-likelihood is not finite");
    }
    fit.loglik = current;
    if (std::abs(current - previous) <= params.tol * std::max(1.0, std::abs(previous))) {
      fit.converged = true;
      break;
    }
    previous = current;
  }
  fit.reinitializations = events.reinitializations;
  return fit;
}

int l_policy_double_well(const Ensemble& e, int coordinate) {
  if (coordinate < 0 || coordinate >= e.dimension()) {
    throw ConfigError("policy coordinate out of range");
  }
  int positive = 0;
  int negative = 0;
  for (int i = 0; i < e.size(); ++i) {
    const double x = e.matrix()(coordinate, i);
    positive += x > 0.0 ? 1 : 0;
    negative += x < 0.0 ? 1 : 0;
  }
  // Integer form of count > 0.9 M; exactly 90% keeps two components.
  const int threshold_times_ten = 9 * e.size();
  return (10 * positive > threshold_times_ten || 10 * negative > threshold_times_ten) ? 1 : 2;
}

double kde_bandwidth(int N, int M) {
  if (N < 1 || M < 1) {
    throw ConfigError("kde_bandwidth needs N >= 1 and M >= 1");
  }
  const double n = N;
  return std::pow(2.0 / (n + 2.0), 4.0 / (n + 4.0)) * std::pow(static_cast<double>(M), -2.0 / (n + 4.0));
}

GaussianMixture kde_mixture(const Ensemble& e, const Matrix& B) {
  if (B.rows() != e.dimension() || B.cols() != e.dimension()) {
    throw ConfigError("kernel covariance has the wrong shape");
  }
  if (!B.isApprox(B.transpose(), 1e-12)) {
    throw ConfigError("kernel covariance is not symmetric");
  }
  Eigen::LLT<Matrix> chol(B);
  if (chol.info() != Eigen::Success) {
    throw ConfigError("kernel covariance is not positive definite");
  }
  const int M = e.size();
  GaussianMixture m;
  m.weights = Eigen::VectorXd::Constant(M, 1.0 / M);
  m.covariances.assign(static_cast<std::size_t>(M), B);
  m.means.reserve(static_cast<std::size_t>(M));
  for (int i = 0; i < M; ++i) {
    m.means.push_back(e.member(i));
  }
  return m;
}

GaussianMixture single_gaussian(const Ensemble& e) {
  GaussianMixture m;
  m.weights = Eigen::VectorXd::Ones(1);
  m.means.push_back(ensemble_mean(e));
  m.covariances.push_back(ensemble_covariance(e));
  return m;
}

std::vector<MarginalComponent> marginal(const GaussianMixture& m, const StateVector& h,
                                        double varfloor) {
  if (h.size() != m.dimension()) {
    throw ConfigError("observation row has the wrong dimension");
  }
  if (h.isZero(0.0)) {
    throw ConfigError("observation row must be nonzero");
  }
  std::vector<MarginalComponent> out;
  out.reserve(m.means.size());
  for (int l = 0; l < m.components(); ++l) {
    const double var = std::max(h.dot(m.covariances[l] * h), varfloor);
    if (!(var > 0.0)) {
      throw NumericalError("observation-space variance of component " + std::to_string(l) +
                           " is not positive");
    }
    out.push_back({h.dot(m.means[l]), std::sqrt(var)});
  }
  return out;
}

void write_mixture_csv(const GaussianMixture& m, std::ostream& out) {
  const int n = m.dimension();
  out << "component,alpha";
  for (int j = 0; j < n; ++j) {
    out << ",mean_" << (j + 1);
  }
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      out << ",cov_" << (r + 1) << (c + 1);
    }
  }
  out << '\n';
  out.precision(17);
  for (int l = 0; l < m.components(); ++l) {
    out << l << ',' << m.weights[l];
    for (int j = 0; j < n; ++j) {
      out << ',' << m.means[l][j];
    }
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < n; ++c) {
        out << ',' << m.covariances[l](r, c);
      }
    }
    out << '\n';
  }
}

}  // namespace egmf
