#include "egmf/harness.hpp"

#include "egmf/dynamics.hpp"
#include "egmf/error.hpp"

#include <boost/math/constants/constants.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

namespace egmf {

namespace {

constexpr double kPi = boost::math::constants::pi<double>();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Stream ids; filter runs use filter_stream(label), so dropping a filter
// from the list leaves the others unchanged.
constexpr std::uint64_t kTruthStream = 1;
constexpr std::uint64_t kObservationStream = 2;
constexpr std::uint64_t kInitialEnsembleStream = 3;
constexpr std::uint64_t kFilterStreamBase = 100;

constexpr double kDoubleWellStart = -3.14;
constexpr double kDoubleWellModes = 3.14;
constexpr int kLorenzSpinUpSteps = 1000;

std::uint64_t filter_stream(const std::string& label) {
  std::uint64_t h = kFilterStreamBase;
  for (unsigned char ch : label) h = splitmix64(h ^ ch);
  return h;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body) {
  const unsigned workers = std::min<std::size_t>(worker_threads(), std::max<std::size_t>(n, 1));
  if (workers <= 1) {
    for (std::size_t k = 0; k < n; ++k) body(k);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t k = next++; k < n; k = next++) {
        try {
          body(k);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

/// One (filter, seed, c, inflation) run.
struct Task {
  std::size_t filter = 0;
  std::size_t seed_index = 0;
  double bandwidth_factor = 0.0;
  double inflation = 1.0;
};

std::vector<Task> expand_tasks(const ExperimentConfig& cfg) {
  std::vector<Task> tasks;
  for (std::size_t f = 0; f < cfg.filters.size(); ++f) {
    const FilterSpec& spec = cfg.filters[f].spec;
    std::vector<double> cs{spec.bandwidth_factor};
    if (spec.kind == FilterKind::egmf_kde && !cfg.bandwidth_factors.empty()) cs = cfg.bandwidth_factors;
    std::vector<double> rhos{spec.inflation};
    if (!cfg.inflations.empty()) rhos = cfg.inflations;
    for (double c : cs) {
      for (double rho : rhos) {
        for (std::size_t s = 0; s < cfg.seeds.size(); ++s) tasks.push_back({f, s, c, rho});
      }
    }
  }
  return tasks;
}

FilterResult blank_result(const ExperimentConfig& cfg, const Task& task) {
  FilterResult r;
  r.label = cfg.filters[task.filter].label;
  r.kind = cfg.filters[task.filter].spec.kind;
  r.ensemble_size = cfg.ensemble_size;
  r.obs_variance = cfg.obs_variance;
  r.bandwidth_factor = task.bandwidth_factor;
  r.inflation = task.inflation;
  r.seed = cfg.seeds[task.seed_index];
  return r;
}

FilterSpec task_spec(const ExperimentConfig& cfg, const Task& task) {
  FilterSpec spec = cfg.filters[task.filter].spec;
  spec.bandwidth_factor = task.bandwidth_factor;
  spec.inflation = task.inflation;
  return spec;
}

void mark_failed(FilterResult& r, const std::string& message) {
  r.failure = message;
  r.rms_truth = kNaN;
  if (r.rms_reference) r.rms_reference = kNaN;
  if (r.histogram_l1) r.histogram_l1 = kNaN;
}

/// Accumulates squared errors over all state components.
struct RmsAccumulator {
  double sum = 0.0;
  std::size_t count = 0;
  void add(const StateVector& a, const StateVector& b) {
    sum += (a - b).squaredNorm();
    count += static_cast<std::size_t>(a.size());
  }
  void add(double a, double b) {
    sum += (a - b) * (a - b);
    ++count;
  }
  double value() const { return count ? std::sqrt(sum / static_cast<double>(count)) : kNaN; }
};

}  // namespace

double FilterResult::rms() const { return rms_reference ? *rms_reference : rms_truth; }

double median(std::vector<double> values) {
  if (values.empty()) return kNaN;
  std::sort(values.begin(), values.end(), [](double a, double b) {
    if (std::isnan(a)) return false;
    if (std::isnan(b)) return true;
    return a < b;
  });
  const std::size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

unsigned worker_threads() {
  if (const char* env = std::getenv("EGMF_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || n < 1 || n > 1024) {
      throw ConfigError("EGMF_THREADS must be a positive integer, got '" + std::string(env) + "'");
    }
    return static_cast<unsigned>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// ---------------------------------------------------------------- single step

GaussianMixture analytic_posterior_1d(const GaussianMixture& prior, const ScalarObservation& obs) {
  prior.validate();
  if (prior.dimension() != 1) throw ConfigError("analytic_posterior_1d needs a 1-D mixture");
  obs.validate(1);
  const double h = obs.h[0];
  const int L = prior.components();
  GaussianMixture post;
  post.weights.resize(L);
  Eigen::VectorXd log_w(L);
  for (int l = 0; l < L; ++l) {
    const double m = prior.means[l][0];
    const double p = prior.covariances[l](0, 0);
    const double s = h * p * h + obs.R;
    const double gain = p * h / s;
    post.means.push_back(StateVector::Constant(1, m + gain * (obs.y_obs - h * m)));
    post.covariances.push_back(Matrix::Constant(1, 1, p - gain * h * p));
    log_w[l] = std::log(prior.weights[l]) + normal_logpdf(obs.y_obs, h * m, std::sqrt(s));
  }
  const double top = log_w.maxCoeff();
  post.weights = (log_w.array() - top).exp().matrix();
  post.weights /= post.weights.sum();
  return post;
}

GaussianMixture single_bayes_prior() {
  GaussianMixture m;
  m.weights = Eigen::Vector2d(0.5, 0.5);
  m.means = {StateVector::Constant(1, -kPi), StateVector::Constant(1, kPi)};
  m.covariances = {Matrix::Identity(1, 1), Matrix::Identity(1, 1)};
  return m;
}

ScalarObservation single_bayes_observation() { return {StateVector::Ones(1), 16.0, kPi}; }

double histogram_l1(const Eigen::VectorXd& samples, const GaussianMixture& density, double lo,
                    double hi, double width) {
  density.validate();
  if (density.dimension() != 1) throw ConfigError("histogram_l1 needs a 1-D density");
  if (samples.size() == 0) throw ConfigError("histogram_l1 needs samples");
  if (!(hi > lo) || !(width > 0.0)) throw ConfigError("histogram_l1: bad bins");
  const double nb = (hi - lo) / width;
  const int bins = static_cast<int>(std::lround(nb));
  if (std::abs(nb - bins) > 1e-9 * nb) throw ConfigError("histogram_l1: range is not a whole number of bins");

  std::vector<double> freq(bins, 0.0);
  double outside = 0.0;
  const double w = 1.0 / static_cast<double>(samples.size());
  for (Eigen::Index i = 0; i < samples.size(); ++i) {
    const double x = samples[i];
    const double k = std::floor((x - lo) / width);
    if (k >= 0 && k < bins) {
      freq[static_cast<int>(k)] += w;
    } else {
      outside += w;
    }
  }
  auto cdf = [&](double x) {
    double c = 0.0;
    for (int l = 0; l < density.components(); ++l) {
      const double sd = std::sqrt(density.covariances[l](0, 0));
      c += density.weights[l] * 0.5 * std::erfc(-(x - density.means[l][0]) / (sd * std::sqrt(2.0)));
    }
    return c;
  };
  double l1 = outside;
  double inside_mass = 0.0;
  for (int k = 0; k < bins; ++k) {
    const double mass = cdf(lo + (k + 1) * width) - cdf(lo + k * width);
    inside_mass += mass;
    l1 += std::abs(freq[k] - mass);
  }
  return l1 + std::max(0.0, 1.0 - inside_mass);
}

Eigen::VectorXd sample_mixture_1d(const GaussianMixture& m, int count, RngStream& rng) {
  m.validate();
  if (m.dimension() != 1) throw ConfigError("sample_mixture_1d needs a 1-D mixture");
  if (count < 1) throw ConfigError("sample count must be positive");
  Eigen::VectorXd out(count);
  for (int i = 0; i < count; ++i) {
    const double u = rng.uniform();
    int l = 0;
    double acc = m.weights[0];
    while (u >= acc && l + 1 < m.components()) acc += m.weights[++l];
    out[i] = m.means[l][0] + std::sqrt(m.covariances[l](0, 0)) * rng.normal();
  }
  return out;
}

namespace {

std::vector<FilterResult> run_tasks(const ExperimentConfig& cfg,
                                    const std::function<void(const Task&, FilterResult&)>& run) {
  const std::vector<Task> tasks = expand_tasks(cfg);
  std::vector<FilterResult> results(tasks.size());
  parallel_for(tasks.size(), [&](std::size_t k) {
    FilterResult r = blank_result(cfg, tasks[k]);
    try {
      run(tasks[k], r);
    } catch (const NumericalError& ex) {
      mark_failed(r, ex.what());
    }
    results[k] = std::move(r);
  });
  return results;
}

double elapsed_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Records the analysis mean every `stride` analyses.
void keep_mean(FilterResult& r, const ExperimentConfig& cfg, int analysis, double t,
               const StateVector& mean) {
  if (analysis % cfg.trajectory_stride == 0) {
    r.times.push_back(t);
    r.means.push_back(mean);
  }
}

/// Truth states at the observation times k * obs_interval, k = 1..cycles.
std::vector<StateVector> truth_at_observations(const ModelSpec& model, StateVector x, double dt,
                                               int stride, int cycles, RngStream& rng) {
  std::vector<StateVector> out;
  out.reserve(static_cast<std::size_t>(cycles));
  for (int k = 0; k < cycles; ++k) {
    for (int j = 0; j < stride; ++j) {
      x = step_model(model, x, 0.0, dt, rng);
    }
    out.push_back(x);
  }
  return out;
}

std::vector<double> observe(const std::vector<StateVector>& truth, const StateVector& h, double R,
                            RngStream& rng) {
  std::vector<double> y;
  y.reserve(truth.size());
  const double sd = std::sqrt(R);
  for (const auto& x : truth) y.push_back(h.dot(x) + sd * rng.normal());
  return y;
}

/// Scheduled-observation twin experiment shared by double_well and lorenz63.
struct CycleData {
  std::vector<StateVector> truth;
  std::vector<double> y;
  Ensemble initial;
};

void run_cycles(const ExperimentConfig& cfg, const ModelSpec& model, const StateVector& h,
                const CycleData& data, const std::vector<double>* reference, const Task& task,
                FilterResult& r) {
  const FilterSpec spec = task_spec(cfg, task);
  RngStream rng(r.seed, filter_stream(r.label));
  Ensemble e = data.initial;
  RmsAccumulator truth_err, ref_err;
  const int cycles = static_cast<int>(data.truth.size());
  for (int k = 0; k < cycles; ++k) {
    const double t0 = k * cfg.obs_interval;
    const double t1 = (k + 1) * cfg.obs_interval;
    e = propagate_ensemble(model, e, t0, t1, cfg.dt, rng);
    const ScalarObservation obs{h, cfg.obs_variance, data.y[k]};
    AnalysisOutcome out = assimilate(spec, e, std::span<const ScalarObservation>(&obs, 1), rng);
    e = std::move(out.ensemble);
    ++r.analyses;
    if (spec.kind == FilterKind::egmf_em && out.components == 2) ++r.two_component_analyses;
    const StateVector mean = ensemble_mean(e);
    if (k >= cfg.burn_in_cycles) {
      truth_err.add(mean, data.truth[k]);
      if (reference) ref_err.add(mean[0], (*reference)[k]);
    }
    keep_mean(r, cfg, k, t1, mean);
  }
  r.rms_truth = truth_err.value();
  if (reference) r.rms_reference = ref_err.value();
}

void require(const ExperimentConfig& cfg, Experiment experiment) {
  cfg.validate();
  if (cfg.experiment != experiment) {
    throw ConfigError("config is for experiment '" + to_string(cfg.experiment) + "'");
  }
}

}  // namespace

RunReport run_single_bayes(const ExperimentConfig& cfg) {
  require(cfg, Experiment::single_bayes);
  if (cfg.cycles() != 1) throw ConfigError("single_bayes performs exactly one analysis");
  const auto t0 = std::chrono::steady_clock::now();
  const GaussianMixture prior = single_bayes_prior();
  ScalarObservation obs = single_bayes_observation();
  obs.R = cfg.obs_variance;
  const GaussianMixture posterior = analytic_posterior_1d(prior, obs);
  const double post_mean = posterior.weights[0] * posterior.means[0][0] + posterior.weights[1] * posterior.means[1][0];

  RunReport report;
  report.config = cfg;
  report.results = run_tasks(cfg, [&](const Task& task, FilterResult& r) {
    r.histogram_l1 = kNaN;
    RngStream init(r.seed, kInitialEnsembleStream);
    const Eigen::VectorXd x0 = sample_mixture_1d(prior, cfg.ensemble_size, init);
    const Ensemble e(Matrix(x0.transpose()));
    RngStream rng(r.seed, filter_stream(r.label));
    const FilterSpec spec = task_spec(cfg, task);
    AnalysisOutcome out = assimilate(spec, e, std::span<const ScalarObservation>(&obs, 1), rng);
    r.analyses = 1;
    r.two_component_analyses = (spec.kind == FilterKind::egmf_em && out.components == 2) ? 1 : 0;
    const Eigen::VectorXd x = out.ensemble.matrix().row(0).transpose();
    r.histogram_l1 = histogram_l1(x, posterior);
    r.rms_truth = std::abs(x.mean() - post_mean);
    r.times = {1.0};
    r.means = {ensemble_mean(out.ensemble)};
  });
  report.wall_seconds = elapsed_since(t0);
  return report;
}

RunReport run_double_well(const ExperimentConfig& cfg) {
  require(cfg, Experiment::double_well);
  const auto t0 = std::chrono::steady_clock::now();
  const ModelSpec model = double_well_model();
  const StateVector h = StateVector::Ones(1);
  const int stride = step_count(0.0, cfg.obs_interval, cfg.dt);
  const int cycles = cfg.cycles();
  const Grid1D grid;
  auto prior_density = [](double x) {
    return std::exp(-0.5 * (x - kDoubleWellModes) * (x - kDoubleWellModes)) +
           std::exp(-0.5 * (x + kDoubleWellModes) * (x + kDoubleWellModes));
  };
  GaussianMixture pi0;
  pi0.weights = Eigen::Vector2d(0.5, 0.5);
  pi0.means = {StateVector::Constant(1, -kDoubleWellModes), StateVector::Constant(1, kDoubleWellModes)};
  pi0.covariances = {Matrix::Identity(1, 1), Matrix::Identity(1, 1)};

  RunReport report;
  report.config = cfg;
  std::vector<CycleData> data(cfg.seeds.size());
  report.reference_means.resize(cfg.seeds.size());
  parallel_for(cfg.seeds.size(), [&](std::size_t s) {
    const std::uint64_t seed = cfg.seeds[s];
    RngStream truth_rng(seed, kTruthStream), obs_rng(seed, kObservationStream),
        init_rng(seed, kInitialEnsembleStream);
    CycleData& d = data[s];
    d.truth = truth_at_observations(model, StateVector::Constant(1, kDoubleWellStart), cfg.dt, stride,
                                    cycles, truth_rng);
    d.y = observe(d.truth, h, cfg.obs_variance, obs_rng);
    const Eigen::VectorXd x0 = sample_mixture_1d(pi0, cfg.ensemble_size, init_rng);
    d.initial = Ensemble(Matrix(x0.transpose()));

    FokkerPlanckPropagator fp(double_well_drift, grid, cfg.dt);
    GridDensity rho = GridDensity::from_function(grid, prior_density);
    auto& means = report.reference_means[s];
    means.reserve(static_cast<std::size_t>(cycles));
    for (int k = 0; k < cycles; ++k) {
      rho = fp.propagate(rho, cfg.obs_interval);
      rho = bayes_update(rho, ScalarObservation{h, cfg.obs_variance, d.y[k]});
      means.push_back(density_mean(rho));
      if (s == 0 && (k == 0 || k == cycles - 1)) {
        static std::mutex snapshot_mutex;
        std::lock_guard<std::mutex> lock(snapshot_mutex);
        report.snapshots.push_back({seed, (k + 1) * cfg.obs_interval, rho});
      }
    }
  });

  report.results = run_tasks(cfg, [&](const Task& task, FilterResult& r) {
    run_cycles(cfg, model, h, data[task.seed_index], &report.reference_means[task.seed_index], task, r);
  });
  report.wall_seconds = elapsed_since(t0);
  return report;
}

RunReport run_langevin(const ExperimentConfig& cfg) {
  require(cfg, Experiment::langevin);
  if (std::abs(cfg.obs_interval - cfg.dt) > 1e-12 * cfg.dt) {
    throw ConfigError("langevin assimilates every model step: obs_interval must equal dt");
  }
  const auto t0 = std::chrono::steady_clock::now();
  const ModelSpec model = langevin_model();
  const StateVector h = Eigen::Vector2d(0.0, 1.0);
  const int steps = cfg.cycles();
  const StateVector start = Eigen::Vector2d(1.0, 1.0);

  // truth[n] = (q, v) at t_n; dQ[n] is the observation increment over [t_n, t_n+1].
  struct Path {
    std::vector<Eigen::Vector2d> truth;
    std::vector<double> dQ;
    Ensemble initial;
  };
  std::vector<Path> paths(cfg.seeds.size());
  parallel_for(cfg.seeds.size(), [&](std::size_t s) {
    const std::uint64_t seed = cfg.seeds[s];
    RngStream truth_rng(seed, kTruthStream), obs_rng(seed, kObservationStream),
        init_rng(seed, kInitialEnsembleStream);
    Path& p = paths[s];
    p.truth.reserve(static_cast<std::size_t>(steps) + 1);
    p.dQ.reserve(static_cast<std::size_t>(steps));
    StateVector x = start;
    p.truth.push_back(x);
    const double c = cfg.obs_variance;
    for (int n = 0; n < steps; ++n) {
      p.dQ.push_back(x[1] * cfg.dt + std::sqrt(c * cfg.dt) * obs_rng.normal());
      x = step_euler_maruyama(model, x, n * cfg.dt, cfg.dt, truth_rng);
      p.truth.push_back(x);
    }
    Matrix m(2, cfg.ensemble_size);
    for (int i = 0; i < cfg.ensemble_size; ++i) {
      m(0, i) = start[0] + init_rng.normal();
      m(1, i) = start[1] + init_rng.normal();
    }
    p.initial = Ensemble(std::move(m));
  });

  RunReport report;
  report.config = cfg;
  report.results = run_tasks(cfg, [&](const Task& task, FilterResult& r) {
    const Path& p = paths[task.seed_index];
    const FilterSpec spec = task_spec(cfg, task);
    RngStream rng(r.seed, filter_stream(r.label));
    Ensemble e = p.initial;
    RmsAccumulator err;
    for (int n = 0; n < steps; ++n) {
      AnalysisOutcome out = continuous_observation_step(spec, e, p.dQ[n], cfg.dt, model, h, rng);
      e = std::move(out.ensemble);
      ++r.analyses;
      if (spec.kind == FilterKind::egmf_em && out.components == 2) ++r.two_component_analyses;
      const StateVector mean = ensemble_mean(e);
      if (n >= cfg.burn_in_cycles) err.add(mean, StateVector(p.truth[n + 1]));
      keep_mean(r, cfg, n, (n + 1) * cfg.dt, mean);
    }
    r.rms_truth = err.value();
  });
  report.wall_seconds = elapsed_since(t0);
  return report;
}

RunReport run_lorenz(const ExperimentConfig& cfg) {
  require(cfg, Experiment::lorenz63);
  const auto t0 = std::chrono::steady_clock::now();
  const ModelSpec model = lorenz63_model();
  const StateVector h = Eigen::Vector3d(1.0, 0.0, 0.0);
  const int stride = step_count(0.0, cfg.obs_interval, cfg.dt);
  const int cycles = cfg.cycles();

  std::vector<CycleData> data(cfg.seeds.size());
  parallel_for(cfg.seeds.size(), [&](std::size_t s) {
    const std::uint64_t seed = cfg.seeds[s];
    RngStream truth_rng(seed, kTruthStream), obs_rng(seed, kObservationStream),
        init_rng(seed, kInitialEnsembleStream);
    StateVector x = Eigen::Vector3d(1.0, 1.0, 1.0);
    for (int j = 0; j < kLorenzSpinUpSteps; ++j) x = step_model(model, x, 0.0, cfg.dt, truth_rng);
    CycleData& d = data[s];
    Matrix m(3, cfg.ensemble_size);
    for (int i = 0; i < cfg.ensemble_size; ++i) {
      for (int k = 0; k < 3; ++k) m(k, i) = x[k] + init_rng.normal();
    }
    d.initial = Ensemble(std::move(m));
    d.truth = truth_at_observations(model, x, cfg.dt, stride, cycles, truth_rng);
    d.y = observe(d.truth, h, cfg.obs_variance, obs_rng);
  });

  RunReport report;
  report.config = cfg;
  report.results = run_tasks(cfg, [&](const Task& task, FilterResult& r) {
    run_cycles(cfg, model, h, data[task.seed_index], nullptr, task, r);
  });
  report.wall_seconds = elapsed_since(t0);
  return report;
}

RunReport run_experiment(const ExperimentConfig& cfg) {
  switch (cfg.experiment) {
    case Experiment::single_bayes: return run_single_bayes(cfg);
    case Experiment::double_well: return run_double_well(cfg);
    case Experiment::langevin: return run_langevin(cfg);
    case Experiment::lorenz63: return run_lorenz(cfg);
  }
  throw ConfigError("unknown experiment");
}

// ------------------------------------------------------------------ reporting

std::vector<SweepPoint> sweep_medians(const RunReport& report) {
  struct Key {
    std::size_t order;
    std::string label;
    double c, rho;
  };
  std::vector<Key> keys;
  std::map<std::tuple<std::string, double, double>, std::vector<const FilterResult*>> groups;
  for (const auto& r : report.results) {
    auto key = std::make_tuple(r.label, r.bandwidth_factor, r.inflation);
    if (!groups.count(key)) keys.push_back({keys.size(), r.label, r.bandwidth_factor, r.inflation});
    groups[key].push_back(&r);
  }
  std::vector<SweepPoint> out;
  for (const auto& k : keys) {
    const auto& members = groups[std::make_tuple(k.label, k.c, k.rho)];
    std::vector<double> rms, frac;
    int failures = 0;
    for (const auto* r : members) {
      rms.push_back(r->rms());
      frac.push_back(r->two_component_fraction());
      if (r->failure) ++failures;
    }
    out.push_back({k.label, k.c, k.rho, median(rms), median(frac), failures});
  }
  return out;
}

std::vector<SweepPoint> tuned_inflation(const RunReport& report) {
  std::vector<SweepPoint> out;
  for (const auto& p : sweep_medians(report)) {
    auto it = std::find_if(out.begin(), out.end(), [&](const SweepPoint& q) {
      return q.label == p.label && q.bandwidth_factor == p.bandwidth_factor;
    });
    if (it == out.end()) {
      out.push_back(p);
    } else if (!std::isnan(p.median_rms) && (std::isnan(it->median_rms) || p.median_rms < it->median_rms)) {
      *it = p;
    }
  }
  return out;
}

namespace {

nlohmann::ordered_json number_or_null(double v) {
  return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr);
}

nlohmann::ordered_json to_json(const FilterResult& r) {
  nlohmann::ordered_json j;
  j["filter"] = r.label;
  j["kind"] = to_string(r.kind);
  j["seed"] = r.seed;
  j["M"] = r.ensemble_size;
  j["R"] = r.obs_variance;
  j["c"] = r.bandwidth_factor;
  j["inflation"] = r.inflation;
  j["rms"] = number_or_null(r.rms());
  j["rms_truth"] = number_or_null(r.rms_truth);
  if (r.rms_reference) j["rms_reference"] = number_or_null(*r.rms_reference);
  if (r.histogram_l1) j["histogram_l1"] = number_or_null(*r.histogram_l1);
  j["analyses"] = r.analyses;
  j["two_component_fraction"] = r.two_component_fraction();
  j["failure"] = r.failure ? nlohmann::ordered_json(*r.failure) : nlohmann::ordered_json(nullptr);
  return j;
}

nlohmann::ordered_json to_json(const SweepPoint& p) {
  nlohmann::ordered_json j;
  j["filter"] = p.label;
  j["c"] = p.bandwidth_factor;
  j["inflation"] = p.inflation;
  j["median_rms"] = number_or_null(p.median_rms);
  j["median_two_component_fraction"] = p.median_two_component_fraction;
  j["failures"] = p.failures;
  return j;
}

std::string format_double(double v) {
  if (!std::isfinite(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

void write_atomically(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out << content;
    out.flush();
    if (!out) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

}  // namespace

nlohmann::ordered_json summary_json(const RunReport& report, bool include_wall_time) {
  nlohmann::ordered_json j;
  j["experiment"] = to_string(report.config.experiment);
  j["seeds"] = report.config.seeds;
  j["config"] = to_json(report.config);
  auto& results = j["results"] = nlohmann::ordered_json::array();
  for (const auto& r : report.results) results.push_back(to_json(r));
  auto& medians = j["medians"] = nlohmann::ordered_json::array();
  for (const auto& p : sweep_medians(report)) medians.push_back(to_json(p));
  if (!report.config.inflations.empty() || !report.config.bandwidth_factors.empty()) {
    auto& tuned = j["tuned_inflation"] = nlohmann::ordered_json::array();
    for (const auto& p : tuned_inflation(report)) tuned.push_back(to_json(p));
  }
  if (include_wall_time) j["wall_seconds"] = report.wall_seconds;
  return j;
}

void write_outputs(const RunReport& report, const std::filesystem::path& dir) {
  report.config.validate();
  if (report.results.empty()) throw ConfigError("report has no filter results; nothing written");

  // Render everything before touching the file system.
  std::vector<std::pair<std::string, std::string>> files;
  files.emplace_back("summary.json", summary_json(report).dump(2) + "\n");

  std::ostringstream table;
  table << "filter,M,R,c,inflation,seed,rms\n";
  for (const auto& r : report.results) {
    table << r.label << ',' << r.ensemble_size << ',' << format_double(r.obs_variance) << ','
          << format_double(r.bandwidth_factor) << ',' << format_double(r.inflation) << ',' << r.seed
          << ',' << format_double(r.rms()) << '\n';
  }
  files.emplace_back("rms_table.csv", table.str());

  std::map<std::string, std::ostringstream> trajectories;
  for (const auto& r : report.results) {
    auto& os = trajectories[r.label];
    if (os.tellp() == 0) {
      os << "seed,c,inflation,t";
      const int n = r.means.empty() ? 0 : static_cast<int>(r.means.front().size());
      for (int k = 0; k < n; ++k) os << ",x" << (k + 1);
      os << '\n';
    }
    for (std::size_t k = 0; k < r.means.size(); ++k) {
      os << r.seed << ',' << format_double(r.bandwidth_factor) << ',' << format_double(r.inflation) << ','
         << format_double(r.times[k]);
      for (Eigen::Index d = 0; d < r.means[k].size(); ++d) os << ',' << format_double(r.means[k][d]);
      os << '\n';
    }
  }
  for (auto& [label, os] : trajectories) files.emplace_back(label + "_mean_trajectory.csv", os.str());

  if (!report.reference_means.empty()) {
    std::ostringstream os;
    os << "seed,t,mean\n";
    for (std::size_t s = 0; s < report.reference_means.size(); ++s) {
      const auto& means = report.reference_means[s];
      for (std::size_t k = 0; k < means.size(); ++k) {
        if (static_cast<int>(k) % report.config.trajectory_stride != 0) continue;
        os << report.config.seeds[s] << ',' << format_double((k + 1) * report.config.obs_interval) << ','
           << format_double(means[k]) << '\n';
      }
    }
    files.emplace_back("fokker_planck_mean_trajectory.csv", os.str());
  }
  for (const auto& snap : report.snapshots) {
    std::ostringstream os;
    write_density_csv(snap.density, os);
    std::ostringstream name;
    name << "fp_density_seed" << snap.seed << "_t" << format_double(snap.time) << ".csv";
    files.emplace_back(name.str(), os.str());
  }

  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
  for (const auto& [name, content] : files) write_atomically(dir / name, content);
}

}  // namespace egmf
