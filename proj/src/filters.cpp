#include "egmf/filters.hpp"

#include "egmf/error.hpp"

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace egmf {

namespace {

const boost::math::normal_distribution<double> kStandardNormal;

double normal_quantile(double p) { return boost::math::quantile(kStandardNormal, p); }

void check_finite(const Matrix& m, const char* where) {
  if (!m.allFinite()) {
    throw NumericalError(std::string("non-finite ensemble after ") + where);
  }
}

}  // namespace

std::string to_string(FilterKind kind) {
  switch (kind) {
    case FilterKind::enkf_po: return "enkf_po";
    case FilterKind::esrf_continuous: return "esrf";
    case FilterKind::rhf: return "rhf";
    case FilterKind::egmf_em: return "egmf_em";
    case FilterKind::egmf_kde: return "egmf_kde";
    case FilterKind::kalman_bucy: return "kalman_bucy";
  }
  return "unknown";
}

FilterKind parse_filter_kind(std::string_view name) {
  if (name == "enkf_po" || name == "enkf") return FilterKind::enkf_po;
  if (name == "esrf" || name == "esrf_continuous") return FilterKind::esrf_continuous;
  if (name == "rhf") return FilterKind::rhf;
  if (name == "egmf_em" || name == "egmf") return FilterKind::egmf_em;
  if (name == "egmf_kde") return FilterKind::egmf_kde;
  if (name == "kalman_bucy") return FilterKind::kalman_bucy;
  throw ConfigError("unknown filter kind '" + std::string(name) + "'");
}

void FilterSpec::validate() const {
  if (!(inflation >= 1.0)) {
    throw ConfigError("inflation must be >= 1");
  }
  if (components < 0) {
    throw ConfigError("components must be >= 0");
  }
  if (bandwidth_factor < 0.0) {
    throw ConfigError("bandwidth factor must be >= 0");
  }
  if (!(observation_intensity > 0.0)) {
    throw ConfigError("observation intensity must be positive");
  }
  if (kind == FilterKind::egmf_em || kind == FilterKind::egmf_kde ||
      kind == FilterKind::esrf_continuous) {
    analysis.validate();
  }
  if (kind == FilterKind::egmf_em && analysis.kalman == KalmanVariant::perturbed) {
    throw ConfigError("perturbed observations are only available for egmf_kde");
  }
}

Ensemble enkf_po_step(const Ensemble& e, const ScalarObservation& obs, RngStream& rng) {
  obs.validate(e.dimension());
  const Matrix P = ensemble_covariance(e);
  const StateVector ph = P * obs.h;
  const StateVector gain = ph / (obs.h.dot(ph) + obs.R);
  const double sd = std::sqrt(obs.R);
  Matrix out = e.matrix();
  for (int i = 0; i < e.size(); ++i) {
    const double perturbed = obs.y_obs + sd * rng.normal();
    out.col(i) += gain * (perturbed - obs.h.dot(e.member(i)));
  }
  check_finite(out, "EnKF update");
  return Ensemble(std::move(out));
}

Ensemble esrf_continuous_step(const Ensemble& e, std::span<const ScalarObservation> obs, double ds,
                              bool rate_limited) {
  AnalysisConfig steps_cfg;
  steps_cfg.ds = ds;
  steps_cfg.validate();
  for (const auto& o : obs) {
    o.validate(e.dimension());
  }
  Ensemble current = e;
  const int steps = steps_cfg.steps();
  double s = 0.0;
  for (int k = 0; rate_limited ? s < 1.0 - 1e-12 : k < steps; ++k) {
    const StateVector mean = ensemble_mean(current);
    const Matrix P = ensemble_covariance(current);
    const double h = rate_limited ? std::min({ds, kalman_step_limit(P, obs), 1.0 - s}) : ds;
    Matrix velocity = Matrix::Zero(e.dimension(), e.size());
    for (const auto& o : obs) {
      const StateVector ph = P * o.h;
      const double ybar = o.h.dot(mean);
      for (int i = 0; i < e.size(); ++i) {
        const double coeff = (-0.5 / o.R) * (o.h.dot(current.member(i)) + ybar - 2.0 * o.y_obs);
        velocity.col(i) += coeff * ph;
      }
    }
    Matrix next = current.matrix() + h * velocity;
    if (!next.allFinite()) {
      std::ostringstream msg;
      msg << "ESRF: non-finite ensemble at pseudo-time step " << k;
      throw NumericalError(msg.str());
    }
    current = Ensemble(std::move(next));
    s += h;
  }
  return current;
}

Ensemble esrf_continuous_step(const Ensemble& e, const ScalarObservation& obs, double ds,
                              bool rate_limited) {
  return esrf_continuous_step(e, std::span<const ScalarObservation>(&obs, 1), ds, rate_limited);
}

Eigen::VectorXd rhf_increments(const Eigen::VectorXd& y, const ScalarObservation& obs) {
  const auto M = static_cast<int>(y.size());
  Eigen::VectorXd increments = Eigen::VectorXd::Zero(M);
  if (M < 2) {
    return increments;
  }
  std::vector<int> order(static_cast<std::size_t>(M));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return y[a] < y[b]; });
  std::vector<double> ys(static_cast<std::size_t>(M));
  for (int j = 0; j < M; ++j) {
    ys[static_cast<std::size_t>(j)] = y[order[static_cast<std::size_t>(j)]];
  }
  const double mean = y.mean();
  const double sd = std::sqrt((y.array() - mean).square().sum() / (M - 1));
  if (!(sd > 0.0)) {
    return increments;
  }

  // Likelihood at the members, scaled so that its maximum is one.
  std::vector<double> lik(static_cast<std::size_t>(M));
  double top = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < M; ++j) {
    const double r = obs.y_obs - ys[static_cast<std::size_t>(j)];
    lik[static_cast<std::size_t>(j)] = -r * r / (2.0 * obs.R);
    top = std::max(top, lik[static_cast<std::size_t>(j)]);
  }
  for (auto& l : lik) {
    l = std::exp(l - top);
  }

  const double prior_mass = 1.0 / (M + 1);
  std::vector<double> interior(static_cast<std::size_t>(M - 1));
  double total = prior_mass * (lik.front() + lik.back());
  for (int k = 0; k + 1 < M; ++k) {
    const auto kk = static_cast<std::size_t>(k);
    interior[kk] = prior_mass * 0.5 * (lik[kk] + lik[kk + 1]);
    total += interior[kk];
  }
  const double left_mass = prior_mass * lik.front() / total;
  const double right_mass = prior_mass * lik.back() / total;
  for (auto& m : interior) {
    m /= total;
  }

  // Gaussian tails with the ensemble spread and prior mass 1/(M+1) beyond
  // the outermost members.
  const double tail_z = normal_quantile(prior_mass);  // negative
  const double left_center = ys.front() - sd * tail_z;
  const double right_center = ys.back() + sd * tail_z;

  for (int j = 0; j < M; ++j) {
    const double q = (j + 1) * prior_mass;
    double target;
    if (q <= left_mass) {
      target = left_center + sd * normal_quantile(q / left_mass * prior_mass);
    } else if (q >= 1.0 - right_mass) {
      const double upper = (1.0 - q) / right_mass * prior_mass;
      target = upper > 0.0 ? right_center - sd * normal_quantile(upper) : ys.back();
    } else {
      double cumulative = left_mass;
      target = ys.back();
      for (int k = 0; k + 1 < M; ++k) {
        const auto kk = static_cast<std::size_t>(k);
        if (interior[kk] > 0.0 && q <= cumulative + interior[kk]) {
          const double frac = std::clamp((q - cumulative) / interior[kk], 0.0, 1.0);
          target = ys[kk] + frac * (ys[kk + 1] - ys[kk]);
          break;
        }
        cumulative += interior[kk];
      }
    }
    increments[order[static_cast<std::size_t>(j)]] = target - ys[static_cast<std::size_t>(j)];
  }
  return increments;
}

Ensemble rhf_step(const Ensemble& e, const ScalarObservation& obs) {
  obs.validate(e.dimension());
  if (e.size() < 2) {
    return e;
  }
  const Matrix P = ensemble_covariance(e);
  const StateVector ph = P * obs.h;
  const double hph = obs.h.dot(ph);
  if (!(hph > 0.0)) {
    return e;
  }
  const Eigen::VectorXd dy = rhf_increments(e.project(obs.h), obs);
  Matrix out = e.matrix() + (ph / hph) * dy.transpose();
  check_finite(out, "RHF update");
  return Ensemble(std::move(out));
}

AnalysisOutcome egmf_step(const Ensemble& e, std::span<const ScalarObservation> obs,
                          const FilterSpec& spec, RngStream& rng, const AnalysisTrace& trace) {
  if (spec.kind == FilterKind::egmf_kde) {
    KdeFitter fitter{spec.bandwidth_factor, std::nullopt};
    return analysis_step(e, obs, fitter, spec.analysis, rng, trace);
  }
  if (spec.kind != FilterKind::egmf_em) {
    throw ConfigError("egmf_step needs an EGMF filter kind");
  }
  const EmFitter fitter =
      spec.components > 0 ? fixed_components(spec.components) : double_well_components(spec.policy_coordinate);
  return analysis_step(e, obs, fitter, spec.analysis, rng, trace);
}

Ensemble kalman_bucy_step(const Ensemble& e, double dQ, double dt, double c,
                          const ModelSpec& model, const StateVector& h, RngStream& rng) {
  if (!(c > 0.0) || !(dt > 0.0)) {
    throw ConfigError("Kalman-Bucy step needs c > 0 and dt > 0");
  }
  if (h.size() != e.dimension() || model.dimension != e.dimension()) {
    throw ConfigError("Kalman-Bucy step: dimension mismatch");
  }
  const StateVector mean = ensemble_mean(e);
  const Matrix P = ensemble_covariance(e);
  const StateVector gain = P * h / (2.0 * c);
  const double mean_rate = h.dot(mean) * dt;
  const std::uint64_t key = rng.fork_key();
  const double sqrt_dt = std::sqrt(dt);
  Matrix out(e.dimension(), e.size());
  for (int i = 0; i < e.size(); ++i) {
    RngStream member_rng(key, static_cast<std::uint64_t>(i));
    const StateVector x = e.member(i);
    StateVector next = x + dt * model.drift(x, 0.0);
    for (Eigen::Index k = 0; k < next.size(); ++k) {
      if (model.noise_amplitude[k] > 0.0) {
        next[k] += sqrt_dt * model.noise_amplitude[k] * member_rng.normal();
      }
    }
    next -= gain * (h.dot(x) * dt + mean_rate - 2.0 * dQ);
    out.col(i) = next;
  }
  check_finite(out, "Kalman-Bucy step");
  return Ensemble(std::move(out));
}

AnalysisOutcome continuous_observation_step(const FilterSpec& spec, const Ensemble& e, double dQ,
                                            double dt, const ModelSpec& model,
                                            const StateVector& h, RngStream& rng) {
  const double c = spec.observation_intensity;
  if (spec.kind == FilterKind::kalman_bucy) {
    return AnalysisOutcome{kalman_bucy_step(e, dQ, dt, c, model, h, rng), 1};
  }
  const ScalarObservation obs{h, c / dt, dQ / dt};
  AnalysisOutcome outcome = assimilate(spec, e, std::span<const ScalarObservation>(&obs, 1), rng);
  const Matrix increment = outcome.ensemble.matrix() - e.matrix();
  const std::uint64_t key = rng.fork_key();
  Matrix out(e.dimension(), e.size());
  for (int i = 0; i < e.size(); ++i) {
    RngStream member_rng(key, static_cast<std::uint64_t>(i));
    out.col(i) = step_euler_maruyama(model, e.member(i), 0.0, dt, member_rng) + increment.col(i);
  }
  check_finite(out, "continuous-observation step");
  outcome.ensemble = Ensemble(std::move(out));
  return outcome;
}

AnalysisOutcome assimilate(const FilterSpec& spec, const Ensemble& e,
                           std::span<const ScalarObservation> obs, RngStream& rng) {
  const Ensemble prior = inflate(e, spec.inflation);
  switch (spec.kind) {
    case FilterKind::enkf_po: {
      Ensemble current = prior;
      for (const auto& o : obs) {
        current = enkf_po_step(current, o, rng);
      }
      return AnalysisOutcome{std::move(current), 1};
    }
    case FilterKind::rhf: {
      Ensemble current = prior;
      for (const auto& o : obs) {
        current = rhf_step(current, o);
      }
      return AnalysisOutcome{std::move(current), 1};
    }
    case FilterKind::esrf_continuous:
      return AnalysisOutcome{
          esrf_continuous_step(prior, obs, spec.analysis.ds, spec.analysis.rate_limited_steps), 1};
    case FilterKind::egmf_em:
    case FilterKind::egmf_kde:
      return egmf_step(prior, obs, spec, rng);
    case FilterKind::kalman_bucy:
      throw ConfigError("kalman_bucy is a continuous-observation filter; use continuous_observation_step");
  }
  throw ConfigError("unknown filter kind");
}

}  // namespace egmf
