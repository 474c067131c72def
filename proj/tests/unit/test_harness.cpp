#include "egmf/config.hpp"
#include "egmf/error.hpp"
#include "egmf/harness.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

using namespace egmf;
namespace fs = std::filesystem;

namespace {

double gauss(double x, double mean, double var) {
  return std::exp(-0.5 * (x - mean) * (x - mean) / var) / std::sqrt(2.0 * std::numbers::pi * var);
}

ExperimentConfig small_double_well() {
  ExperimentConfig cfg = default_config(Experiment::double_well);
  cfg.horizon = 200.0;
  cfg.ensemble_size = 20;
  cfg.seeds = {1, 2};
  return cfg;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("egmf_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(AnalyticPosterior, BimodalExample) {
  const GaussianMixture post = analytic_posterior_1d(single_bayes_prior(), single_bayes_observation());
  EXPECT_NEAR(post.means[0][0], -2.7720, 1e-4);
  EXPECT_NEAR(post.means[1][0], std::numbers::pi, 1e-12);
  EXPECT_NEAR(post.covariances[0](0, 0), 16.0 / 17.0, 1e-12);
  EXPECT_NEAR(post.weights[0], 0.2385, 1e-4);
  EXPECT_NEAR(post.weights[1], 0.7615, 1e-4);
}

TEST(AnalyticPosterior, AgreesWithQuadrature) {
  const double pi = std::numbers::pi;
  double z = 0.0, m1 = 0.0, m2 = 0.0, left = 0.0;
  const double dx = 1e-4;
  for (double x = -20.0; x < 20.0; x += dx) {
    const double p = (0.5 * gauss(x, -pi, 1.0) + 0.5 * gauss(x, pi, 1.0)) * std::exp(-(pi - x) * (pi - x) / 32.0);
    z += p;
    m1 += x * p;
    m2 += x * x * p;
    if (x < 0.0) left += p;
  }
  const GaussianMixture post = analytic_posterior_1d(single_bayes_prior(), single_bayes_observation());
  double mean = 0.0, second = 0.0;
  for (int l = 0; l < 2; ++l) {
    mean += post.weights[l] * post.means[l][0];
    second += post.weights[l] * (post.covariances[l](0, 0) + post.means[l][0] * post.means[l][0]);
  }
  EXPECT_NEAR(mean, m1 / z, 1e-6);
  EXPECT_NEAR(second, m2 / z, 1e-6);
  // Most of the first component's weight lies left of zero.
  EXPECT_NEAR(post.weights[0], left / z, 0.01);
}

TEST(AnalyticPosterior, LimitsAndSingleComponent) {
  ScalarObservation flat = single_bayes_observation();
  flat.R = 1e14;
  const GaussianMixture same = analytic_posterior_1d(single_bayes_prior(), flat);
  EXPECT_NEAR(same.weights[0], 0.5, 1e-9);
  EXPECT_NEAR(same.means[0][0], -std::numbers::pi, 1e-9);

  GaussianMixture one;
  one.weights = Eigen::VectorXd::Ones(1);
  one.means = {StateVector::Constant(1, 1.0)};
  one.covariances = {Matrix::Constant(1, 1, 3.0)};
  const GaussianMixture k = analytic_posterior_1d(one, ScalarObservation{StateVector::Ones(1), 1.0, 5.0});
  EXPECT_NEAR(k.means[0][0], 1.0 + 0.75 * 4.0, 1e-12);
  EXPECT_NEAR(k.covariances[0](0, 0), 0.75, 1e-12);
}

TEST(HistogramL1, ExactAndDisjoint) {
  const GaussianMixture prior = single_bayes_prior();
  RngStream rng(3, 3);
  const Eigen::VectorXd big = sample_mixture_1d(prior, 200000, rng);
  EXPECT_LT(histogram_l1(big, prior), 0.03);
  const Eigen::VectorXd far = Eigen::VectorXd::Constant(10, 50.0);
  EXPECT_NEAR(histogram_l1(far, prior), 2.0, 1e-9);
}

TEST(SampleMixture, WeightsAndMoments) {
  GaussianMixture m = single_bayes_prior();
  m.weights = Eigen::Vector2d(0.25, 0.75);
  RngStream rng(8, 8);
  const Eigen::VectorXd x = sample_mixture_1d(m, 100000, rng);
  const double right = (x.array() > 0.0).cast<double>().mean();
  EXPECT_NEAR(right, 0.75, 0.01);
}

TEST(Median, HandlesNaN) {
  EXPECT_DOUBLE_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_DOUBLE_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
  EXPECT_DOUBLE_EQ(median({1.0, std::nan(""), 2.0}), 2.0);
  EXPECT_TRUE(std::isnan(median({})));
}

TEST(Config, DefaultsValidate) {
  for (auto e : {Experiment::single_bayes, Experiment::double_well, Experiment::langevin, Experiment::lorenz63}) {
    EXPECT_NO_THROW(default_config(e).validate());
    EXPECT_NO_THROW(default_config(e, true).validate());
    EXPECT_EQ(parse_experiment(to_string(e)), e);
  }
  EXPECT_EQ(default_config(Experiment::double_well).cycles(), 1000);
  EXPECT_EQ(default_config(Experiment::double_well, true).cycles(), 10000);
  EXPECT_EQ(default_config(Experiment::lorenz63, true).cycles(), 101000);
  EXPECT_EQ(default_config(Experiment::langevin, true).cycles(), 2000000);
  EXPECT_NO_THROW(lorenz_sweep_config().validate());
  EXPECT_NO_THROW(table1_config(20).validate());
}

TEST(Config, JsonRoundTrip) {
  const ExperimentConfig cfg = lorenz_sweep_config();
  const ExperimentConfig back = parse_config(nlohmann::json::parse(to_json(cfg).dump()));
  EXPECT_EQ(to_json(back).dump(), to_json(cfg).dump());
}

TEST(Config, OverridesAndRejections) {
  nlohmann::json j = {{"schema_version", 1}, {"experiment", "double_well"}, {"M", 20}, {"R", 4.0}};
  ExperimentConfig cfg = parse_config(j);
  EXPECT_EQ(cfg.ensemble_size, 20);
  EXPECT_EQ(cfg.obs_variance, 4.0);

  nlohmann::json unknown = j;
  unknown["ensemble"] = 5;
  EXPECT_THROW(parse_config(unknown), ConfigError);

  nlohmann::json bad_filter = j;
  bad_filter["filters"] = nlohmann::json::array({{{"kind", "egmf"}, {"label", "x"}, {"dss", 0.1}}});
  EXPECT_THROW(parse_config(bad_filter), ConfigError);

  nlohmann::json no_version = j;
  no_version.erase("schema_version");
  EXPECT_THROW(parse_config(no_version), ConfigError);

  nlohmann::json empty = j;
  empty["filters"] = nlohmann::json::array();
  EXPECT_THROW(parse_config(empty), ConfigError);

  nlohmann::json no_seeds = j;
  no_seeds["seeds"] = nlohmann::json::array();
  EXPECT_THROW(parse_config(no_seeds), ConfigError);

  nlohmann::json bad_ds = j;
  bad_ds["filters"] = nlohmann::json::array({{{"kind", "egmf"}, {"label", "x"}, {"ds", 0.3}}});
  EXPECT_THROW(parse_config(bad_ds), ConfigError);

  EXPECT_THROW(load_config("/nonexistent/egmf.json"), ConfigError);
}

TEST(Config, FilterEntriesStartFromKindDefaults) {
  nlohmann::json j = {{"schema_version", 1},
                      {"experiment", "double_well"},
                      {"filters", nlohmann::json::array({{{"kind", "egmf"}, {"label", "fine"}, {"ds", 0.01}}})}};
  const ExperimentConfig cfg = parse_config(j);
  ASSERT_EQ(cfg.filters.size(), 1u);
  EXPECT_EQ(cfg.filters[0].spec.analysis.ds, 0.01);
  EXPECT_EQ(cfg.filters[0].spec.analysis.u_cut, 100.0);
  EXPECT_EQ(cfg.filters[0].spec.analysis.em.varfloor, 5e-4);
}

TEST(Outputs, SummaryIsReproducible) {
  const ExperimentConfig cfg = small_double_well();
  const RunReport a = run_double_well(cfg);
  const RunReport b = run_double_well(cfg);
  EXPECT_EQ(summary_json(a, false).dump(2), summary_json(b, false).dump(2));

  const fs::path dir = scratch_dir("outputs");
  write_outputs(a, dir);
  const std::string table = slurp(dir / "rms_table.csv");
  EXPECT_EQ(table.substr(0, table.find('\n')), "filter,M,R,c,inflation,seed,rms");
  EXPECT_TRUE(fs::exists(dir / "summary.json"));
  EXPECT_TRUE(fs::exists(dir / "egmf_mean_trajectory.csv"));
  EXPECT_TRUE(fs::exists(dir / "fokker_planck_mean_trajectory.csv"));
  for (const auto& entry : fs::directory_iterator(dir)) {
    EXPECT_NE(entry.path().extension(), ".tmp");
  }
  fs::remove_all(dir);
}

TEST(Outputs, EmptyFilterListWritesNothing) {
  RunReport report;
  report.config = small_double_well();
  report.config.filters.clear();
  const fs::path dir = scratch_dir("empty");
  EXPECT_THROW(write_outputs(report, dir), ConfigError);
  EXPECT_FALSE(fs::exists(dir));
}

TEST(Runs, FiltersShareTruthAndAreOrderIndependent) {
  ExperimentConfig cfg = small_double_well();
  cfg.seeds = {3};
  const RunReport full = run_double_well(cfg);
  ExperimentConfig reversed = cfg;
  std::reverse(reversed.filters.begin(), reversed.filters.end());
  reversed.filters.pop_back();
  const RunReport part = run_double_well(reversed);
  for (const auto& r : part.results) {
    const auto it = std::find_if(full.results.begin(), full.results.end(),
                                 [&](const FilterResult& q) { return q.label == r.label; });
    ASSERT_NE(it, full.results.end());
    EXPECT_EQ(it->rms(), r.rms());
  }
  for (const auto& r : full.results) {
    EXPECT_GE(r.rms(), 0.0);
    EXPECT_GE(r.two_component_fraction(), 0.0);
    EXPECT_LE(r.two_component_fraction(), 1.0);
    EXPECT_EQ(r.analyses, 20);
    EXPECT_FALSE(r.failure.has_value());
  }
}

TEST(Runs, ThreadCountDoesNotChangeResults) {
  ExperimentConfig cfg = small_double_well();
  ::setenv("EGMF_THREADS", "1", 1);
  const RunReport serial = run_double_well(cfg);
  ::setenv("EGMF_THREADS", "3", 1);
  const RunReport parallel = run_double_well(cfg);
  ::setenv("EGMF_THREADS", "zero", 1);
  EXPECT_THROW(worker_threads(), ConfigError);
  ::unsetenv("EGMF_THREADS");
  EXPECT_EQ(summary_json(serial, false).dump(), summary_json(parallel, false).dump());
}

TEST(Runs, SingleBayesSmallEnsemble) {
  ExperimentConfig cfg = default_config(Experiment::single_bayes);
  cfg.ensemble_size = 200;
  cfg.seeds = {1};
  const RunReport report = run_single_bayes(cfg);
  ASSERT_EQ(report.results.size(), cfg.filters.size());
  for (const auto& r : report.results) {
    ASSERT_TRUE(r.histogram_l1.has_value());
    EXPECT_GT(*r.histogram_l1, 0.0);
    EXPECT_LT(*r.histogram_l1, 2.0);
  }
}

TEST(Runs, LangevinAndLorenzShortHorizons) {
  ExperimentConfig lv = default_config(Experiment::langevin);
  lv.horizon = 5.0;
  lv.seeds = {1};
  const RunReport a = run_langevin(lv);
  for (const auto& r : a.results) {
    EXPECT_EQ(r.analyses, 500);
    EXPECT_TRUE(std::isfinite(r.rms()));
  }
  ExperimentConfig lz = default_config(Experiment::lorenz63);
  lz.horizon = 40.0;
  lz.burn_in_cycles = 20;
  lz.seeds = {1};
  const RunReport b = run_lorenz(lz);
  for (const auto& r : b.results) {
    EXPECT_EQ(r.analyses, 200);
    EXPECT_TRUE(std::isfinite(r.rms()));
  }
}

TEST(Sweep, TunedInflationPicksSmallestMedian) {
  RunReport report;
  report.config = default_config(Experiment::lorenz63);
  auto add = [&](double c, double rho, double rms) {
    FilterResult r;
    r.label = "egmf_kde";
    r.bandwidth_factor = c;
    r.inflation = rho;
    r.rms_truth = rms;
    report.results.push_back(r);
  };
  add(0.5, 1.0, 5.0);
  add(0.5, 1.1, 4.0);
  add(0.5, 1.2, std::nan(""));
  add(0.7, 1.0, 3.0);
  const auto tuned = tuned_inflation(report);
  ASSERT_EQ(tuned.size(), 2u);
  EXPECT_EQ(tuned[0].inflation, 1.1);
  EXPECT_EQ(tuned[1].median_rms, 3.0);
}
