#include "egmf/config.hpp"

#include "egmf/error.hpp"

#include <cmath>
#include <fstream>
#include <set>

namespace egmf {

std::string to_string(Experiment experiment) {
  switch (experiment) {
    case Experiment::single_bayes: return "single_bayes";
    case Experiment::double_well: return "double_well";
    case Experiment::langevin: return "langevin";
    case Experiment::lorenz63: return "lorenz63";
  }
  return "unknown";
}

Experiment parse_experiment(std::string_view name) {
  if (name == "single_bayes") return Experiment::single_bayes;
  if (name == "double_well") return Experiment::double_well;
  if (name == "langevin") return Experiment::langevin;
  if (name == "lorenz63" || name == "lorenz") return Experiment::lorenz63;
  throw ConfigError("unknown experiment '" + std::string(name) + "'");
}

void ExperimentConfig::validate() const {
  if (ensemble_size < 1) throw ConfigError("M must be >= 1");
  if (!(obs_variance > 0.0)) throw ConfigError("R must be positive");
  if (!(dt > 0.0)) throw ConfigError("dt must be positive");
  if (!(obs_interval > 0.0)) throw ConfigError("obs_interval must be positive");
  if (!(horizon > 0.0)) throw ConfigError("horizon must be positive");
  if (burn_in_cycles < 0) throw ConfigError("burn_in_cycles must be >= 0");
  if (trajectory_stride < 1) throw ConfigError("trajectory_stride must be >= 1");
  if (seeds.empty()) throw ConfigError("seeds must be nonempty");
  if (filters.empty()) throw ConfigError("filter list is empty");
  if (output_dir.empty()) throw ConfigError("output_dir is empty");
  const double steps = obs_interval / dt;
  if (std::abs(steps - std::round(steps)) > 1e-9 * steps || std::round(steps) < 1) {
    throw ConfigError("obs_interval must be a whole multiple of dt");
  }
  if (cycles() <= burn_in_cycles) throw ConfigError("horizon leaves no scored cycles after burn-in");
  std::set<std::string> labels;
  for (const auto& f : filters) {
    if (f.label.empty()) throw ConfigError("filter label is empty");
    if (!labels.insert(f.label).second) throw ConfigError("duplicate filter label '" + f.label + "'");
    f.spec.validate();
    if (f.spec.kind == FilterKind::kalman_bucy && experiment != Experiment::langevin) {
      throw ConfigError("kalman_bucy needs continuous observations (langevin)");
    }
  }
  for (double c : bandwidth_factors) {
    if (!(c > 0.0)) throw ConfigError("bandwidth factors must be positive");
  }
  for (double rho : inflations) {
    if (!(rho >= 1.0)) throw ConfigError("inflations must be >= 1");
  }
}

int ExperimentConfig::cycles() const {
  const double n = horizon / obs_interval;
  if (std::abs(n - std::round(n)) > 1e-9 * n) {
    throw ConfigError("horizon must be a whole multiple of obs_interval");
  }
  return static_cast<int>(std::lround(n));
}

namespace {

FilterEntry make_filter(std::string label, FilterKind kind) {
  FilterEntry f;
  f.label = std::move(label);
  f.spec.kind = kind;
  return f;
}

FilterEntry egmf_em_entry(double ds, double u_cut, double varfloor) {
  FilterEntry f = make_filter("egmf", FilterKind::egmf_em);
  f.spec.analysis.ds = ds;
  f.spec.analysis.u_cut = u_cut;
  f.spec.analysis.em.varfloor = varfloor;
  return f;
}

FilterEntry esrf_entry(double ds) {
  FilterEntry f = make_filter("esrf", FilterKind::esrf_continuous);
  f.spec.analysis.ds = ds;
  return f;
}

}  // namespace

ExperimentConfig default_config(Experiment experiment, bool full) {
  ExperimentConfig c;
  c.experiment = experiment;
  c.output_dir = "egmf_out/" + to_string(experiment);
  switch (experiment) {
    case Experiment::single_bayes: {
      c.ensemble_size = 2000;
      c.obs_variance = 16.0;
      c.dt = 1.0;
      c.obs_interval = 1.0;
      c.horizon = 1.0;
      c.seeds = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
      FilterEntry egmf = egmf_em_entry(0.002, 100.0, 0.0);
      egmf.spec.components = 2;
      c.filters = {egmf, make_filter("rhf", FilterKind::rhf), make_filter("enkf", FilterKind::enkf_po)};
      break;
    }
    case Experiment::double_well: {
      c.ensemble_size = 50;
      c.obs_variance = 36.0;
      c.dt = 0.1;
      c.obs_interval = 10.0;
      c.horizon = full ? 100000.0 : 10000.0;
      c.seeds = {1};
      c.trajectory_stride = 1;
      c.filters = {egmf_em_entry(0.05, 100.0, 5e-4), make_filter("rhf", FilterKind::rhf),
                   make_filter("enkf", FilterKind::enkf_po), esrf_entry(0.05)};
      break;
    }
    case Experiment::langevin: {
      c.ensemble_size = 50;
      c.obs_variance = 0.2;  // observation intensity c; R = c/dt per step
      c.dt = 0.01;
      c.obs_interval = 0.01;
      c.horizon = full ? 20000.0 : 2000.0;
      c.seeds = {1};
      c.trajectory_stride = 100;
      FilterEntry kb = make_filter("kalman_bucy", FilterKind::kalman_bucy);
      FilterEntry egmf = egmf_em_entry(1.0, 0.25, 5e-4);
      FilterEntry rhf = make_filter("rhf", FilterKind::rhf);
      c.filters = {kb, egmf, rhf};
      break;
    }
    case Experiment::lorenz63: {
      c.ensemble_size = 25;
      c.obs_variance = 8.0;
      c.dt = 0.01;
      c.obs_interval = 0.2;
      c.burn_in_cycles = 1000;
      c.horizon = (full ? 101000 : 11000) * 0.2;
      c.seeds = {1};
      c.trajectory_stride = 10;
      FilterEntry kde = make_filter("egmf_kde", FilterKind::egmf_kde);
      kde.spec.analysis.ds = 0.25;
      kde.spec.analysis.u_cut = 0.5;
      kde.spec.analysis.kalman = KalmanVariant::perturbed;
      kde.spec.bandwidth_factor = 0.6;
      kde.spec.analysis.rate_limited_steps = true;
      FilterEntry esrf = esrf_entry(0.01);
      esrf.spec.analysis.rate_limited_steps = true;
      c.filters = {kde, esrf, make_filter("rhf", FilterKind::rhf), make_filter("enkf", FilterKind::enkf_po)};
      break;
    }
  }
  if (experiment == Experiment::langevin) {
    for (auto& f : c.filters) f.spec.observation_intensity = c.obs_variance;
  }
  return c;
}

ExperimentConfig lorenz_sweep_config(bool full) {
  ExperimentConfig c = default_config(Experiment::lorenz63, full);
  c.output_dir = "egmf_out/lorenz_sweep";
  c.bandwidth_factors = {0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  c.inflations = {1.0, 1.05, 1.1, 1.15, 1.2, 1.25, 1.3};
  return c;
}

ExperimentConfig table1_config(int ensemble_size, bool full) {
  ExperimentConfig c = default_config(Experiment::double_well, full);
  c.ensemble_size = ensemble_size;
  c.obs_variance = 36.0;
  c.output_dir = "egmf_out/table1_M" + std::to_string(ensemble_size);
  c.filters.pop_back();  // the table compares RHF, EGMF and EnKF
  return c;
}

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed,
                    const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("bad value for '") + key + "': " + ex.what());
  }
}

FilterEntry parse_filter(const nlohmann::json& j, const ExperimentConfig& defaults) {
  reject_unknown(j,
                 {"kind", "label", "ds", "u_cut", "exchange", "kalman", "refit_each_step",
                  "marginal_responsibilities", "rate_limited_steps", "components", "policy_coordinate",
                  "bandwidth_factor", "inflation", "observation_intensity", "em"},
                 "filter");
  if (!j.contains("kind")) throw ConfigError("filter entry needs 'kind'");
  std::string kind_name;
  read(j, "kind", kind_name);
  const FilterKind kind = parse_filter_kind(kind_name);

  // Start from the experiment default of the same kind when there is one.
  FilterEntry f;
  f.spec.kind = kind;
  f.label = to_string(kind);
  for (const auto& d : defaults.filters) {
    if (d.spec.kind == kind) {
      f = d;
      break;
    }
  }
  read(j, "label", f.label);
  auto& a = f.spec.analysis;
  read(j, "ds", a.ds);
  read(j, "u_cut", a.u_cut);
  if (j.contains("exchange")) {
    std::string v;
    read(j, "exchange", v);
    if (v == "erf") a.exchange = ExchangeVariant::erf;
    else if (v == "t3") a.exchange = ExchangeVariant::t3;
    else throw ConfigError("exchange must be 'erf' or 't3'");
  }
  if (j.contains("kalman")) {
    std::string v;
    read(j, "kalman", v);
    if (v == "deterministic") a.kalman = KalmanVariant::deterministic;
    else if (v == "perturbed") a.kalman = KalmanVariant::perturbed;
    else throw ConfigError("kalman must be 'deterministic' or 'perturbed'");
  }
  read(j, "refit_each_step", a.refit_each_step);
  read(j, "marginal_responsibilities", a.marginal_responsibilities);
  read(j, "rate_limited_steps", a.rate_limited_steps);
  read(j, "components", f.spec.components);
  read(j, "policy_coordinate", f.spec.policy_coordinate);
  read(j, "bandwidth_factor", f.spec.bandwidth_factor);
  read(j, "inflation", f.spec.inflation);
  read(j, "observation_intensity", f.spec.observation_intensity);
  if (j.contains("em")) {
    const auto& em = j.at("em");
    reject_unknown(em, {"tol", "max_iter", "delta", "varfloor"}, "em");
    read(em, "tol", a.em.tol);
    read(em, "max_iter", a.em.max_iter);
    read(em, "delta", a.em.delta);
    read(em, "varfloor", a.em.varfloor);
  }
  return f;
}

}  // namespace

ExperimentConfig parse_config(const nlohmann::json& j, bool full) {
  reject_unknown(j,
                 {"schema_version", "experiment", "M", "R", "dt", "obs_interval", "horizon",
                  "burn_in_cycles", "filters", "seeds", "output_dir", "bandwidth_factors",
                  "inflations", "trajectory_stride"},
                 "config");
  if (!j.contains("schema_version")) throw ConfigError("config needs 'schema_version'");
  int version = 0;
  read(j, "schema_version", version);
  if (version != kConfigSchemaVersion) {
    throw ConfigError("unsupported schema_version " + std::to_string(version));
  }
  if (!j.contains("experiment")) throw ConfigError("config needs 'experiment'");
  std::string name;
  read(j, "experiment", name);
  ExperimentConfig c = default_config(parse_experiment(name), full);
  const ExperimentConfig defaults = c;
  read(j, "M", c.ensemble_size);
  read(j, "R", c.obs_variance);
  read(j, "dt", c.dt);
  read(j, "obs_interval", c.obs_interval);
  read(j, "horizon", c.horizon);
  read(j, "burn_in_cycles", c.burn_in_cycles);
  read(j, "seeds", c.seeds);
  read(j, "output_dir", c.output_dir);
  read(j, "bandwidth_factors", c.bandwidth_factors);
  read(j, "inflations", c.inflations);
  read(j, "trajectory_stride", c.trajectory_stride);
  if (j.contains("filters")) {
    const auto& list = j.at("filters");
    if (!list.is_array()) throw ConfigError("'filters' must be an array");
    c.filters.clear();
    for (const auto& entry : list) c.filters.push_back(parse_filter(entry, defaults));
  }
  if (c.experiment == Experiment::langevin && j.contains("R")) {
    for (auto& f : c.filters) f.spec.observation_intensity = c.obs_variance;
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path, bool full) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& ex) {
    throw ConfigError("malformed JSON in '" + path + "': " + ex.what());
  }
  return parse_config(j, full);
}

nlohmann::ordered_json to_json(const FilterEntry& entry) {
  const auto& s = entry.spec;
  const auto& a = s.analysis;
  nlohmann::ordered_json j;
  j["label"] = entry.label;
  j["kind"] = to_string(s.kind);
  j["ds"] = a.ds;
  j["u_cut"] = a.u_cut;
  j["exchange"] = a.exchange == ExchangeVariant::erf ? "erf" : "t3";
  j["kalman"] = a.kalman == KalmanVariant::deterministic ? "deterministic" : "perturbed";
  j["refit_each_step"] = a.refit_each_step;
  j["marginal_responsibilities"] = a.marginal_responsibilities;
  j["rate_limited_steps"] = a.rate_limited_steps;
  j["components"] = s.components;
  j["policy_coordinate"] = s.policy_coordinate;
  j["bandwidth_factor"] = s.bandwidth_factor;
  j["inflation"] = s.inflation;
  j["observation_intensity"] = s.observation_intensity;
  j["em"] = {{"tol", a.em.tol}, {"max_iter", a.em.max_iter}, {"delta", a.em.delta},
             {"varfloor", a.em.varfloor}};
  return j;
}

nlohmann::ordered_json to_json(const ExperimentConfig& cfg) {
  nlohmann::ordered_json j;
  j["schema_version"] = kConfigSchemaVersion;
  j["experiment"] = to_string(cfg.experiment);
  j["M"] = cfg.ensemble_size;
  j["R"] = cfg.obs_variance;
  j["dt"] = cfg.dt;
  j["obs_interval"] = cfg.obs_interval;
  j["horizon"] = cfg.horizon;
  j["burn_in_cycles"] = cfg.burn_in_cycles;
  j["seeds"] = cfg.seeds;
  j["output_dir"] = cfg.output_dir;
  j["bandwidth_factors"] = cfg.bandwidth_factors;
  j["inflations"] = cfg.inflations;
  j["trajectory_stride"] = cfg.trajectory_stride;
  auto& filters = j["filters"] = nlohmann::ordered_json::array();
  for (const auto& f : cfg.filters) filters.push_back(to_json(f));
  return j;
}

}  // namespace egmf
