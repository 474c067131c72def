#pragma once

#include "egmf/ensemble.hpp"

#include <iosfwd>
#include <optional>
#include <vector>

namespace egmf {

/// sum_l alpha_l N(x; mean_l, P_l)
struct GaussianMixture {
  Eigen::VectorXd weights;
  std::vector<StateVector> means;
  std::vector<Matrix> covariances;

  int components() const { return static_cast<int>(weights.size()); }
  int dimension() const { return means.empty() ? 0 : static_cast<int>(means.front().size()); }

  /// Checks shapes, weight normalization (1e-12) and symmetry of every P_l.
  void validate() const;
};

/// beta(i, l): probability that member i belongs to component l. M x L.
using Responsibilities = Eigen::MatrixXd;

/// Observation-space marginal of one component: N(ybar, sigma^2).
struct MarginalComponent {
  double ybar = 0.0;
  double sigma = 0.0;
};

/// Cached Cholesky factor of one Gaussian for repeated density evaluation.
class GaussianDensity {
 public:
  GaussianDensity(StateVector mean, const Matrix& cov);
  double logpdf(const Eigen::Ref<const StateVector>& x) const;

 private:
  StateVector mean_;
  Eigen::LLT<Matrix> chol_;
  double log_norm_ = 0.0;
};

double gaussian_logpdf(const StateVector& x, const StateVector& mean, const Matrix& cov);

/// Log-density of a 1-D normal.
double normal_logpdf(double y, double mean, double sigma);

Responsibilities responsibilities(const GaussianMixture& m, const Ensemble& e);

/// log beta, computed without passing through exp(); exact zeros of beta
/// keep their finite log values here.
Matrix log_responsibilities(const GaussianMixture& m, const Ensemble& e);

/// Responsibilities from the observation-space marginals pi_l(h·x_i) instead
/// of the full densities; avoids P_l^{-1}.
Responsibilities marginal_responsibilities(const GaussianMixture& m, const Ensemble& e,
                                           const StateVector& h, double varfloor = 0.0);
Matrix log_marginal_responsibilities(const GaussianMixture& m, const Ensemble& e,
                                     const StateVector& h, double varfloor = 0.0);

/// Observed-data log-likelihood sum_i log sum_l alpha_l pi_l(x_i).
double mixture_loglik(const GaussianMixture& m, const Ensemble& e);

struct EmParams {
  double tol = 1e-8;    // relative log-likelihood change
  int max_iter = 200;
  double delta = 1e-6;  // covariance regularization delta*I
  double varfloor = 0.0;
};

struct EmEvents {
  int reinitializations = 0;
};

/// One E-step plus M-step. Covariances are normalized by sum_i beta_il,
/// regularized by delta*I and have their eigenvalues floored at varfloor.
/// A component with sum_i beta_il < 1e-12 is re-seeded at the member with
/// the lowest mixture density, with the ensemble covariance and weight 1/M.
GaussianMixture em_step(const GaussianMixture& m, const Ensemble& e, double delta, double varfloor,
                        EmEvents* events = nullptr);

/// Deterministic starting point for EM. N = 1: means at evenly spaced member
/// quantiles (25th/75th for L = 2). N > 1: farthest-point seeding starting
/// from the two most distant members. Covariances start at the ensemble
/// covariance, weights at 1/L.
GaussianMixture default_em_init(const Ensemble& e, int L, double delta, double varfloor = 0.0);

struct EmFit {
  GaussianMixture mixture;
  bool converged = false;
  int iterations = 0;
  double loglik = 0.0;
  int reinitializations = 0;
};

EmFit em_fit(const Ensemble& e, int L, const std::optional<GaussianMixture>& init,
             const EmParams& params);

/// 1 when more than 90% of the members lie strictly on one side of zero in
/// the given coordinate, otherwise 2. Members exactly at zero count for
/// neither side.
int l_policy_double_well(const Ensemble& e, int coordinate = 0);

/// Kernel bandwidth factor c = (2/(N+2))^{4/(N+4)} M^{-2/(N+4)}.
double kde_bandwidth(int N, int M);

/// L = M kernels at the members, each with covariance B and weight 1/M.
GaussianMixture kde_mixture(const Ensemble& e, const Matrix& B);

/// Single Gaussian with the ensemble mean and unbiased covariance.
GaussianMixture single_gaussian(const Ensemble& e);

/// Per-component (h·mean_l, sqrt(max(h P_l h^T, varfloor))).
std::vector<MarginalComponent> marginal(const GaussianMixture& m, const StateVector& h,
                                        double varfloor = 0.0);

/// Header `component,alpha,mean_1..mean_N,cov_11..cov_NN`.
void write_mixture_csv(const GaussianMixture& m, std::ostream& out);

}  // namespace egmf
