#pragma once

#include "egmf/ensemble.hpp"
#include "egmf/mixture.hpp"
#include "egmf/rng.hpp"

#include <functional>
#include <optional>
#include <span>
#include <variant>
#include <vector>

namespace egmf {

/// Scalar observation y_obs = h·x + N(0, R).
struct ScalarObservation {
  StateVector h;
  double R = 1.0;
  double y_obs = 0.0;

  void validate(int dimension) const;
};

/// Which exchange field u_B to use: Gaussian marginals with the erf
/// antiderivative, or the scaled Student-t (3 dof) surrogate.
enum class ExchangeVariant { erf, t3 };
/// Kalman-like field u_A: deterministic (square-root type) or with perturbed
/// observations (kernel fitter only).
enum class KalmanVariant { deterministic, perturbed };

struct AnalysisConfig {
  double ds = 0.05;
  double u_cut = 100.0;
  ExchangeVariant exchange = ExchangeVariant::erf;
  KalmanVariant kalman = KalmanVariant::deterministic;
  /// Refit the mixture before every pseudo-time step (warm-started EM, or
  /// fresh kernel bandwidth). When false the EM mixture parameters follow
  /// mixture_param_flow and the kernel bandwidth is frozen at s = 0.
  bool refit_each_step = true;
  EmParams em;
  /// Responsibilities from observation-space marginals instead of the full
  /// N-dimensional component densities.
  bool marginal_responsibilities = false;
  /// Shorten a step to 1/rate whenever the Kalman field's contraction rate
  /// sum_obs max_l h P_l h^T / R exceeds 1/ds, so forward Euler never
  /// overshoots; the last step is cut to end exactly at s = 1.
  bool rate_limited_steps = false;

  int steps() const;
  void validate() const;
};

struct MixtureFlowState {
  GaussianMixture mixture;
  double lambda = 0.0;
  int clamp_events = 0;  // weights that went negative and were clamped
};

/// EM-fitted mixture; `components` picks L from the current ensemble.
/// L = 1 uses the plain ensemble Gaussian (unbiased covariance, no EM).
struct EmFitter {
  std::function<int(const Ensemble&)> components;
};

/// Kernel density estimator with B = c P, or a fixed B when given.
struct KdeFitter {
  double bandwidth_factor = 0.0;  // <= 0 selects kde_bandwidth(N, M)
  std::optional<Matrix> bandwidth;
};

using MixtureFitter = std::variant<EmFitter, KdeFitter>;

EmFitter fixed_components(int L);
/// The 90% one-sided rule on one coordinate.
EmFitter double_well_components(int coordinate = 0);

struct AnalysisOutcome {
  Ensemble ensemble;
  int components = 1;  // mixture size used (M for the kernel fitter)
  int em_reinitializations = 0;
  int flow_clamps = 0;
  int clipped_fields = 0;  // member-substep-observation triples that hit u_cut
};

/// Largest stable forward-Euler step for the Kalman field of `mixture`
/// (or the kernel bandwidth B); +inf when the rate is zero.
double kalman_step_limit(const GaussianMixture& mixture, std::span<const ScalarObservation> obs);
double kalman_step_limit(const Matrix& B, std::span<const ScalarObservation> obs);

/// Called with (s, ensemble) before each pseudo-time step and at s = 1.
using AnalysisTrace = std::function<void(double, const Ensemble&)>;

/// (y_obs - h·x)^2 / (2R)
double negloglik(const StateVector& x, const ScalarObservation& obs);

/// E_{pi_l}[S] = ((y_obs - ybar_l)^2 + sigma_l^2) / (2R)
double expected_negloglik_component(const MarginalComponent& c, const ScalarObservation& obs);

/// Per-component expectations for all marginals.
Eigen::VectorXd expected_negloglik_components(std::span<const MarginalComponent> marginals,
                                              const ScalarObservation& obs);

/// sum_l alpha_l E_{pi_l}[S]
double expected_negloglik_mixture(std::span<const MarginalComponent> marginals,
                                  const Eigen::VectorXd& alphas, const ScalarObservation& obs);
double expected_negloglik_mixture(const Eigen::VectorXd& alphas,
                                  const Eigen::VectorXd& component_expectations);

/// -1/2 sum_l beta_il P_l h^T R^{-1} (h·x_i + h·xbar_l - 2 y_obs)
StateVector u_A_em(int i, const Ensemble& e, const GaussianMixture& m, const Responsibilities& beta,
                   const ScalarObservation& obs);

/// Kernel form: the same field with P_l = B and xbar_l = x_l.
StateVector u_A_kde(int i, const Ensemble& e, const GaussianMixture& kde,
                    const Responsibilities& beta, const ScalarObservation& obs);

/// -B h^T R^{-1} (h·x_i - y_obs + d_i)
StateVector u_A_perturbed(int i, const Ensemble& e, const Matrix& B, const ScalarObservation& obs,
                          double perturbation);

/// 1/2 sum_l beta_il P_l h^T (E_l - E)/sigma_l^2 erf(z/sqrt(2 sigma_l^2)) / pi_l(y_i).
/// Evaluated in log space; a result whose magnitude would overflow is
/// returned rescaled along the same direction (clip_uB bounds it).
StateVector u_B_erf(int i, const Ensemble& e, const GaussianMixture& m, const Responsibilities& beta,
                    std::span<const MarginalComponent> marginals, const ScalarObservation& obs,
                    const Eigen::VectorXd& expectations);

/// sum_l beta_il P_l h^T (E_l - E)/sigma_l^2 Phi_l(y_i) / phi_l(y_i), with the
/// scaled t3 density phi and its antiderivative Phi vanishing at ybar_l.
StateVector u_B_t3(int i, const Ensemble& e, const GaussianMixture& m, const Responsibilities& beta,
                   std::span<const MarginalComponent> marginals, const ScalarObservation& obs,
                   const Eigen::VectorXd& expectations);

/// Log-responsibility variants used by analysis_step; they keep the
/// beta/pi_l(y) products accurate when beta underflows.
StateVector u_B_erf_log(const StateVector& x, const GaussianMixture& m,
                        const Eigen::Ref<const Eigen::VectorXd>& log_beta,
                        std::span<const MarginalComponent> marginals, const ScalarObservation& obs,
                        const Eigen::VectorXd& expectations);
StateVector u_B_t3_log(const StateVector& x, const GaussianMixture& m,
                       const Eigen::Ref<const Eigen::VectorXd>& log_beta,
                       std::span<const MarginalComponent> marginals, const ScalarObservation& obs,
                       const Eigen::VectorXd& expectations);

/// phi(y) = (2 sigma^3 / pi) / (sigma^2 + (y - ybar)^2)^2
double t3_pdf(double y, double ybar, double sigma);
/// Phi(y) = atan(z/sigma)/pi + (sigma/pi) z / (sigma^2 + z^2), z = y - ybar
double t3_cdf_centered(double y, double ybar, double sigma);

/// f(z) = 1/2 (gap / sigma^2) erf(z / sqrt(2 sigma^2)) / pi(z), the
/// observation-space derivative of the exchange potential. It solves
/// -z f + sigma^2 f' = gap with f(0) = 0.
double exchange_profile_erf(double z, double sigma, double gap);

/// Direction-preserving rescale so that ||u||_inf <= u_cut.
StateVector clip_uB(const StateVector& u, double u_cut);

/// One explicit Euler step of the mixture-parameter ODEs, with lambda chosen
/// so that the weights keep summing to one.
MixtureFlowState mixture_param_flow(const MixtureFlowState& state,
                                    std::span<const ScalarObservation> obs, double ds);
MixtureFlowState mixture_param_flow(const MixtureFlowState& state, const ScalarObservation& obs,
                                    double ds);

/// The continuous analysis step: 1/ds forward Euler steps of
/// dx/ds = sum_obs (u_A + clip(u_B)) from s = 0 to s = 1.
AnalysisOutcome analysis_step(const Ensemble& e, std::span<const ScalarObservation> obs,
                              const MixtureFitter& fitter, const AnalysisConfig& cfg,
                              RngStream& rng, const AnalysisTrace& trace = {});

}  // namespace egmf
