#pragma once

#include "egmf/config.hpp"
#include "egmf/fokker_planck.hpp"
#include "egmf/mixture.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace egmf {

/// Metrics of one filter configuration on one seed.
struct FilterResult {
  std::string label;
  FilterKind kind = FilterKind::egmf_em;
  int ensemble_size = 0;
  double obs_variance = 0.0;
  double bandwidth_factor = 0.0;
  double inflation = 1.0;
  std::uint64_t seed = 0;
  /// RMS of the analysis mean against the truth.
  double rms_truth = 0.0;
  /// RMS against the Fokker-Planck mean (double_well only).
  std::optional<double> rms_reference;
  /// Histogram L1 distance to the analytic posterior (single_bayes only).
  std::optional<double> histogram_l1;
  int analyses = 0;
  int two_component_analyses = 0;
  /// Set when the run aborted on a numerical error; metrics are then NaN.
  std::optional<std::string> failure;
  std::vector<double> times;
  std::vector<StateVector> means;

  double two_component_fraction() const {
    return analyses > 0 ? static_cast<double>(two_component_analyses) / analyses : 0.0;
  }
  /// The scalar reported in rms_table.csv: the reference RMS when present.
  double rms() const;
};

struct DensitySnapshot {
  std::uint64_t seed = 0;
  double time = 0.0;
  GridDensity density;
};

struct RunReport {
  ExperimentConfig config;
  std::vector<FilterResult> results;
  /// Fokker-Planck analysis means per seed (double_well).
  std::vector<std::vector<double>> reference_means;
  std::vector<DensitySnapshot> snapshots;
  double wall_seconds = 0.0;
};

/// Seed-median RMS of one (filter, c, inflation) point, and for each
/// (filter, c) the inflation with the smallest median. Failed runs rank last.
struct SweepPoint {
  std::string label;
  double bandwidth_factor = 0.0;
  double inflation = 1.0;
  double median_rms = 0.0;
  double median_two_component_fraction = 0.0;
  int failures = 0;
};
std::vector<SweepPoint> sweep_medians(const RunReport& report);
std::vector<SweepPoint> tuned_inflation(const RunReport& report);

/// Median with NaN ordered above every number.
double median(std::vector<double> values);

/// Conjugate update of a 1-D Gaussian mixture prior.
GaussianMixture analytic_posterior_1d(const GaussianMixture& prior, const ScalarObservation& obs);

/// The bimodal prior 1/2 N(-pi, 1) + 1/2 N(pi, 1) and the observation
/// y_obs = pi, R = 16 of the single-step test problem.
GaussianMixture single_bayes_prior();
ScalarObservation single_bayes_observation();

/// L1 distance between the histogram of `samples` and the bin masses of a
/// 1-D mixture on [lo, hi) with the given bin width. Samples outside the
/// range count fully towards the distance.
double histogram_l1(const Eigen::VectorXd& samples, const GaussianMixture& density,
                    double lo = -10.0, double hi = 10.0, double width = 0.25);

/// i.i.d. draws from a 1-D mixture.
Eigen::VectorXd sample_mixture_1d(const GaussianMixture& m, int count, RngStream& rng);

RunReport run_single_bayes(const ExperimentConfig& cfg);
RunReport run_double_well(const ExperimentConfig& cfg);
RunReport run_langevin(const ExperimentConfig& cfg);
RunReport run_lorenz(const ExperimentConfig& cfg);
RunReport run_experiment(const ExperimentConfig& cfg);

/// Writes summary.json, rms_table.csv, <label>_mean_trajectory.csv
/// and Fokker-Planck snapshots into `dir`. Each file is written to a
/// temporary name and renamed into place.
void write_outputs(const RunReport& report, const std::filesystem::path& dir);

/// summary.json content; `include_wall_time` = false gives a seed-stable document.
nlohmann::ordered_json summary_json(const RunReport& report, bool include_wall_time = true);

/// Worker threads for independent runs: EGMF_THREADS if set, else the hardware count.
unsigned worker_threads();

}  // namespace egmf
