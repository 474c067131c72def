#pragma once

#include "egmf/filters.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace egmf {

inline constexpr int kConfigSchemaVersion = 1;

enum class Experiment { single_bayes, double_well, langevin, lorenz63 };

std::string to_string(Experiment experiment);
Experiment parse_experiment(std::string_view name);

struct FilterEntry {
  std::string label;
  FilterSpec spec;
};

struct ExperimentConfig {
  Experiment experiment = Experiment::double_well;
  int ensemble_size = 50;
  double obs_variance = 36.0;      // R; the intensity c for langevin lives in the filter spec
  double dt = 0.1;                 // model time step
  double obs_interval = 10.0;
  double horizon = 10000.0;        // model time covered by the assimilation run
  int burn_in_cycles = 0;          // leading analysis cycles left out of the RMS
  std::vector<FilterEntry> filters;
  std::vector<std::uint64_t> seeds{1};
  std::string output_dir = "egmf_out";
  /// Kernel bandwidth factors and inflation values swept in lorenz63 runs.
  /// Baseline filters sweep inflation only.
  std::vector<double> bandwidth_factors;
  std::vector<double> inflations;
  /// Every k-th analysis mean is kept for mean_trajectory.csv.
  int trajectory_stride = 1;

  void validate() const;
  int cycles() const;
};

/// Default settings per experiment; `full` restores the long horizons.
ExperimentConfig default_config(Experiment experiment, bool full = false);

/// lorenz63 defaults plus the bandwidth-factor and inflation sweep grid.
ExperimentConfig lorenz_sweep_config(bool full = false);
/// double_well at R = 36 with the RHF, EGMF and EnKF for one ensemble size.
ExperimentConfig table1_config(int ensemble_size, bool full = false);

/// Parses a versioned JSON config. Missing keys fall back to
/// default_config(experiment); unknown keys are rejected with ConfigError.
ExperimentConfig parse_config(const nlohmann::json& j, bool full = false);
ExperimentConfig load_config(const std::string& path, bool full = false);

nlohmann::ordered_json to_json(const ExperimentConfig& cfg);
nlohmann::ordered_json to_json(const FilterEntry& entry);

}  // namespace egmf
