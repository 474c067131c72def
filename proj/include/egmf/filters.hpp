#pragma once

#include "egmf/dynamics.hpp"
#include "egmf/ensemble.hpp"
#include "egmf/rng.hpp"
#include "egmf/transport.hpp"

#include <span>
#include <string>
#include <string_view>

namespace egmf {

enum class FilterKind { enkf_po, esrf_continuous, rhf, egmf_em, egmf_kde, kalman_bucy };

std::string to_string(FilterKind kind);
FilterKind parse_filter_kind(std::string_view name);

/// Filter selection plus its kind-specific parameters.
struct FilterSpec {
  FilterKind kind = FilterKind::egmf_em;
  /// ds, u_cut and field variants for the EGMF kinds; ds for the continuous ESRF.
  AnalysisConfig analysis;
  /// EGMF-EM: fixed L when > 0, otherwise the 90% double-well rule on
  /// `policy_coordinate`.
  int components = 0;
  int policy_coordinate = 0;
  /// EGMF-KDE: B = c P; 0 selects the large-ensemble optimal c.
  double bandwidth_factor = 0.0;
  /// Applied to the forecast ensemble right before each analysis.
  double inflation = 1.0;
  /// Observation-noise intensity for the continuous-observation (Kalman-Bucy) form.
  double observation_intensity = 0.2;

  void validate() const;
};

/// Stochastic EnKF: x_i += K (y_obs + d_i - h·x_i), d_i ~ N(0, R),
/// K = P h^T / (h P h^T + R) with the unbiased ensemble covariance.
Ensemble enkf_po_step(const Ensemble& e, const ScalarObservation& obs, RngStream& rng);

/// dx_i/ds = -1/2 P h^T R^{-1} (h·x_i + h·xbar - 2 y_obs), forward Euler over
/// s in [0, 1] with the ensemble mean and covariance refreshed every step.
/// `rate_limited` shortens steps as AnalysisConfig::rate_limited_steps does.
Ensemble esrf_continuous_step(const Ensemble& e, std::span<const ScalarObservation> obs, double ds,
                              bool rate_limited = false);
Ensemble esrf_continuous_step(const Ensemble& e, const ScalarObservation& obs, double ds,
                              bool rate_limited = false);

/// Rank histogram filter with a piecewise-constant posterior in observation
/// space: interior intervals carry prior mass 1/(M+1) times the mean of the
/// likelihood at their end points; the two tails are Gaussian (ensemble
/// spread) with mass 1/(M+1) times the likelihood at the outermost member.
/// Each member moves to the posterior quantile of its prior rank
/// (j+1)/(M+1) and the increments are regressed onto the state with the
/// ensemble covariance.
Ensemble rhf_step(const Ensemble& e, const ScalarObservation& obs);

/// Observation-space increments of rhf_step, in member order.
Eigen::VectorXd rhf_increments(const Eigen::VectorXd& y, const ScalarObservation& obs);

/// EGMF analysis with the EM or kernel fitter described by `spec`.
AnalysisOutcome egmf_step(const Ensemble& e, std::span<const ScalarObservation> obs,
                          const FilterSpec& spec, RngStream& rng,
                          const AnalysisTrace& trace = {});

/// One combined model + assimilation step of the ensemble Kalman-Bucy filter
/// for an increment dQ = h·x_truth dt + sqrt(c dt) xi:
///   dx_i = f(x_i) dt + noise - P h^T / (2c) (h·x_i dt + h·xbar dt - 2 dQ).
/// Member i draws its model noise from RngStream(key, i), key = rng.fork_key().
Ensemble kalman_bucy_step(const Ensemble& e, double dQ, double dt, double c,
                          const ModelSpec& model, const StateVector& h, RngStream& rng);

/// Any filter in the continuous-observation setting: the analysis increment
/// for y = h·x, R = c/dt, y_obs = dQ/dt is computed on the current ensemble
/// and added to an Euler-Maruyama model step drawn like kalman_bucy_step.
/// The Kalman-Bucy kind delegates to kalman_bucy_step.
AnalysisOutcome continuous_observation_step(const FilterSpec& spec, const Ensemble& e, double dQ,
                                            double dt, const ModelSpec& model,
                                            const StateVector& h, RngStream& rng);

/// Uniform entry point: inflation, then the kind's analysis. EnKF and RHF
/// assimilate multiple observations serially; the continuous filters sum
/// their fields.
AnalysisOutcome assimilate(const FilterSpec& spec, const Ensemble& e,
                           std::span<const ScalarObservation> obs, RngStream& rng);

}  // namespace egmf
