#include "egmf/transport.hpp"

#include "egmf/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace egmf {

namespace {

// Largest log-magnitude kept before a field is rescaled along its direction.
constexpr double kLogCeiling = 600.0;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double safe_log(double v) { return v > 0.0 ? std::log(v) : kNegInf; }

double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// log|ratio| and sign of ratio for the two exchange profiles, without the
// gap / sigma^2 factor: erf variant 1/2 erf(z/sqrt(2) sigma) / pi(z), t3
// variant Phi(z) / phi(z).
struct SignedLog {
  double log_mag;
  double sign;
};

SignedLog erf_ratio(double z, double sigma) {
  const double e = std::erf(z / (std::numbers::sqrt2 * sigma));
  return {std::log(0.5) + safe_log(std::abs(e)) - normal_logpdf(z, 0.0, sigma), sign_of(e)};
}

SignedLog t3_ratio(double z, double sigma) {
  const double phi_big = t3_cdf_centered(z, 0.0, sigma);
  return {safe_log(std::abs(phi_big)) - std::log(t3_pdf(z, 0.0, sigma)), sign_of(phi_big)};
}

template <typename Ratio>
StateVector exchange_field(const StateVector& x, const GaussianMixture& m,
                           const Eigen::Ref<const Eigen::VectorXd>& log_beta,
                           std::span<const MarginalComponent> marginals,
                           const ScalarObservation& obs, const Eigen::VectorXd& expectations,
                           Ratio ratio) {
  const int L = m.components();
  if (static_cast<int>(marginals.size()) != L || expectations.size() != L || log_beta.size() != L) {
    throw ConfigError("exchange field: component counts disagree");
  }
  const double mixture_e = m.weights.dot(expectations);
  const double y = obs.h.dot(x);
  std::vector<double> log_c(static_cast<std::size_t>(L), kNegInf);
  std::vector<double> sign(static_cast<std::size_t>(L), 0.0);
  double top = kNegInf;
  for (int l = 0; l < L; ++l) {
    const double gap = expectations[l] - mixture_e;
    const double sigma = marginals[l].sigma;
    if (!(sigma > 0.0)) {
      throw ConfigError("exchange field needs positive marginal standard deviations");
    }
    const SignedLog r = ratio(y - marginals[l].ybar, sigma);
    const auto k = static_cast<std::size_t>(l);
    sign[k] = sign_of(gap) * r.sign;
    if (sign[k] == 0.0) {
      continue;
    }
    log_c[k] = log_beta[l] + safe_log(std::abs(gap)) - 2.0 * std::log(sigma) + r.log_mag;
    top = std::max(top, log_c[k]);
  }
  StateVector u = StateVector::Zero(x.size());
  if (top == kNegInf) {
    return u;
  }
  const double shift = top > kLogCeiling ? top - kLogCeiling : 0.0;
  for (int l = 0; l < L; ++l) {
    const auto k = static_cast<std::size_t>(l);
    if (sign[k] == 0.0) {
      continue;
    }
    u += (sign[k] * std::exp(log_c[k] - shift)) * (m.covariances[l] * obs.h);
  }
  return u;
}

Eigen::VectorXd log_row(const Responsibilities& beta, int i) {
  return beta.row(i).transpose().unaryExpr([](double b) { return safe_log(b); });
}

void check_member_index(int i, const Ensemble& e) {
  if (i < 0 || i >= e.size()) {
    throw ConfigError("member index out of range");
  }
}

}  // namespace

void ScalarObservation::validate(int dimension) const {
  if (h.size() != dimension) {
    throw ConfigError("observation row has the wrong dimension");
  }
  if (h.isZero(0.0)) {
    throw ConfigError("observation row must have a nonzero entry");
  }
  if (!(R > 0.0)) {
    throw ConfigError("observation error variance must be positive");
  }
  if (!std::isfinite(y_obs)) {
    throw ConfigError("observed value is not finite");
  }
}

int AnalysisConfig::steps() const { return static_cast<int>(std::lround(1.0 / ds)); }

void AnalysisConfig::validate() const {
  if (!(ds > 0.0 && ds <= 1.0)) {
    throw ConfigError("ds must lie in (0, 1]");
  }
  const double n = 1.0 / ds;
  if (std::abs(n - std::round(n)) > 1e-9 * n) {
    throw ConfigError("1/ds must be an integer");
  }
  if (!(u_cut > 0.0)) {
    throw ConfigError("u_cut must be positive");
  }
  if (em.delta < 0.0 || em.varfloor < 0.0 || em.max_iter < 0 || em.tol < 0.0) {
    throw ConfigError("invalid EM parameters");
  }
}

EmFitter fixed_components(int L) {
  if (L < 1) {
    throw ConfigError("number of mixture components must be >= 1");
  }
  return EmFitter{[L](const Ensemble&) { return L; }};
}

EmFitter double_well_components(int coordinate) {
  return EmFitter{[coordinate](const Ensemble& e) { return l_policy_double_well(e, coordinate); }};
}

double negloglik(const StateVector& x, const ScalarObservation& obs) {
  const double r = obs.y_obs - obs.h.dot(x);
  return r * r / (2.0 * obs.R);
}

double expected_negloglik_component(const MarginalComponent& c, const ScalarObservation& obs) {
  const double r = obs.y_obs - c.ybar;
  return (r * r + c.sigma * c.sigma) / (2.0 * obs.R);
}

Eigen::VectorXd expected_negloglik_components(std::span<const MarginalComponent> marginals,
                                              const ScalarObservation& obs) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(marginals.size()));
  for (std::size_t l = 0; l < marginals.size(); ++l) {
    out[static_cast<Eigen::Index>(l)] = expected_negloglik_component(marginals[l], obs);
  }
  return out;
}

double expected_negloglik_mixture(std::span<const MarginalComponent> marginals,
                                  const Eigen::VectorXd& alphas, const ScalarObservation& obs) {
  return expected_negloglik_mixture(alphas, expected_negloglik_components(marginals, obs));
}

double expected_negloglik_mixture(const Eigen::VectorXd& alphas,
                                  const Eigen::VectorXd& component_expectations) {
  if (alphas.size() != component_expectations.size()) {
    throw ConfigError("weights and expectations differ in length");
  }
  return alphas.dot(component_expectations);
}

StateVector u_A_em(int i, const Ensemble& e, const GaussianMixture& m, const Responsibilities& beta,
                   const ScalarObservation& obs) {
  check_member_index(i, e);
  const double y = obs.h.dot(e.member(i));
  StateVector u = StateVector::Zero(e.dimension());
  for (int l = 0; l < m.components(); ++l) {
    const double coeff = beta(i, l) * (-0.5 / obs.R) * (y + obs.h.dot(m.means[l]) - 2.0 * obs.y_obs);
    u += coeff * (m.covariances[l] * obs.h);
  }
  return u;
}

StateVector u_A_kde(int i, const Ensemble& e, const GaussianMixture& kde,
                    const Responsibilities& beta, const ScalarObservation& obs) {
  if (kde.components() != e.size()) {
    throw ConfigError("kernel mixture must have one component per member");
  }
  return u_A_em(i, e, kde, beta, obs);
}

StateVector u_A_perturbed(int i, const Ensemble& e, const Matrix& B, const ScalarObservation& obs,
                          double perturbation) {
  check_member_index(i, e);
  const double residual = obs.h.dot(e.member(i)) - obs.y_obs + perturbation;
  return (-residual / obs.R) * (B * obs.h);
}

StateVector u_B_erf_log(const StateVector& x, const GaussianMixture& m,
                        const Eigen::Ref<const Eigen::VectorXd>& log_beta,
                        std::span<const MarginalComponent> marginals, const ScalarObservation& obs,
                        const Eigen::VectorXd& expectations) {
  return exchange_field(x, m, log_beta, marginals, obs, expectations, erf_ratio);
}

StateVector u_B_t3_log(const StateVector& x, const GaussianMixture& m,
                       const Eigen::Ref<const Eigen::VectorXd>& log_beta,
                       std::span<const MarginalComponent> marginals, const ScalarObservation& obs,
                       const Eigen::VectorXd& expectations) {
  return exchange_field(x, m, log_beta, marginals, obs, expectations, t3_ratio);
}

StateVector u_B_erf(int i, const Ensemble& e, const GaussianMixture& m, const Responsibilities& beta,
                    std::span<const MarginalComponent> marginals, const ScalarObservation& obs,
                    const Eigen::VectorXd& expectations) {
  check_member_index(i, e);
  return u_B_erf_log(e.member(i), m, log_row(beta, i), marginals, obs, expectations);
}

StateVector u_B_t3(int i, const Ensemble& e, const GaussianMixture& m, const Responsibilities& beta,
                   std::span<const MarginalComponent> marginals, const ScalarObservation& obs,
                   const Eigen::VectorXd& expectations) {
  check_member_index(i, e);
  return u_B_t3_log(e.member(i), m, log_row(beta, i), marginals, obs, expectations);
}

double t3_pdf(double y, double ybar, double sigma) {
  const double z = y - ybar;
  const double d = sigma * sigma + z * z;
  return 2.0 * sigma * sigma * sigma / (std::numbers::pi * d * d);
}

double t3_cdf_centered(double y, double ybar, double sigma) {
  const double z = y - ybar;
  return std::atan(z / sigma) / std::numbers::pi +
         (sigma / std::numbers::pi) * z / (sigma * sigma + z * z);
}

double exchange_profile_erf(double z, double sigma, double gap) {
  const SignedLog r = erf_ratio(z, sigma);
  if (r.sign == 0.0) {
    return 0.0;
  }
  return gap / (sigma * sigma) * r.sign * std::exp(r.log_mag);
}

StateVector clip_uB(const StateVector& u, double u_cut) {
  if (!(u_cut > 0.0)) {
    throw ConfigError("u_cut must be positive");
  }
  const double norm = u.lpNorm<Eigen::Infinity>();
  if (norm <= u_cut) {
    return u;
  }
  StateVector out = u * (u_cut / norm);
  // Rounding can leave the largest entry one ulp above the cut.
  for (Eigen::Index k = 0; k < out.size(); ++k) {
    out[k] = std::clamp(out[k], -u_cut, u_cut);
  }
  return out;
}

MixtureFlowState mixture_param_flow(const MixtureFlowState& state,
                                    std::span<const ScalarObservation> obs, double ds) {
  if (!(ds > 0.0)) {
    throw ConfigError("ds must be positive");
  }
  const GaussianMixture& m = state.mixture;
  const int L = m.components();
  Eigen::VectorXd misfit = Eigen::VectorXd::Zero(L);
  for (const auto& o : obs) {
    for (int l = 0; l < L; ++l) {
      const double r = o.h.dot(m.means[l]) - o.y_obs;
      misfit[l] += r * r / o.R;
    }
  }
  MixtureFlowState next = state;
  next.lambda = -m.weights.dot(misfit);
  for (int l = 0; l < L; ++l) {
    StateVector dmean = StateVector::Zero(m.dimension());
    Matrix dcov = Matrix::Zero(m.dimension(), m.dimension());
    for (const auto& o : obs) {
      const StateVector ph = m.covariances[l] * o.h;
      dmean -= ph * ((o.h.dot(m.means[l]) - o.y_obs) / o.R);
      dcov -= ph * ph.transpose() / o.R;
    }
    next.mixture.means[l] = m.means[l] + ds * dmean;
    Matrix cov = m.covariances[l] + ds * dcov;
    next.mixture.covariances[l] = 0.5 * (cov + cov.transpose());
    next.mixture.weights[l] = m.weights[l] + ds * (-0.5 * m.weights[l] * (misfit[l] + next.lambda));
  }
  for (int l = 0; l < L; ++l) {
    if (next.mixture.weights[l] < 0.0) {
      next.mixture.weights[l] = 0.0;
      ++next.clamp_events;
    }
  }
  const double total = next.mixture.weights.sum();
  if (!(total > 0.0)) {
    throw NumericalError("mixture flow: all weights vanished");
  }
  next.mixture.weights /= total;
  return next;
}

MixtureFlowState mixture_param_flow(const MixtureFlowState& state, const ScalarObservation& obs,
                                    double ds) {
  return mixture_param_flow(state, std::span<const ScalarObservation>(&obs, 1), ds);
}

double kalman_step_limit(const GaussianMixture& mixture, std::span<const ScalarObservation> obs) {
  double rate = 0.0;
  for (const auto& o : obs) {
    double top = 0.0;
    for (const auto& P : mixture.covariances) {
      top = std::max(top, o.h.dot(P * o.h) / o.R);
    }
    rate += top;
  }
  return rate > 0.0 ? 1.0 / rate : std::numeric_limits<double>::infinity();
}

double kalman_step_limit(const Matrix& B, std::span<const ScalarObservation> obs) {
  double rate = 0.0;
  for (const auto& o : obs) {
    rate += o.h.dot(B * o.h) / o.R;
  }
  return rate > 0.0 ? 1.0 / rate : std::numeric_limits<double>::infinity();
}

AnalysisOutcome analysis_step(const Ensemble& e, std::span<const ScalarObservation> obs,
                              const MixtureFitter& fitter, const AnalysisConfig& cfg,
                              RngStream& rng, const AnalysisTrace& trace) {
  cfg.validate();
  for (const auto& o : obs) {
    o.validate(e.dimension());
  }
  AnalysisOutcome outcome{e};
  if (obs.empty()) {
    return outcome;
  }
  const bool kernel = std::holds_alternative<KdeFitter>(fitter);
  if (cfg.kalman == KalmanVariant::perturbed && !kernel) {
    throw ConfigError("perturbed-observation u_A requires the kernel fitter");
  }
  const int M = e.size();
  const int N = e.dimension();
  const int steps = cfg.steps();
  const double ds = cfg.ds;

  // Perturbations are drawn once per analysis and held over all substeps.
  Matrix perturbations;
  if (cfg.kalman == KalmanVariant::perturbed) {
    perturbations.resize(static_cast<Eigen::Index>(obs.size()), M);
    for (std::size_t o = 0; o < obs.size(); ++o) {
      const double sd = std::sqrt(obs[o].R);
      for (int i = 0; i < M; ++i) {
        perturbations(static_cast<Eigen::Index>(o), i) = sd * rng.normal();
      }
    }
  }

  int L = 1;
  if (const auto* em = std::get_if<EmFitter>(&fitter)) {
    L = em->components(e);
    if (L < 1) {
      throw ConfigError("component policy returned L < 1");
    }
  } else {
    L = M;
  }
  outcome.components = L;

  Ensemble current = e;
  std::optional<GaussianMixture> previous_fit;
  std::optional<MixtureFlowState> flow;
  std::optional<Matrix> frozen_bandwidth;

  double s = 0.0;
  for (int k = 0;; ++k) {
    if (cfg.rate_limited_steps ? s >= 1.0 - 1e-12 : k == steps) {
      break;
    }
    if (!cfg.rate_limited_steps) {
      s = k * ds;
    }
    if (trace) {
      trace(s, current);
    }

    GaussianMixture mixture;
    Matrix bandwidth;
    if (kernel) {
      const auto& kde = std::get<KdeFitter>(fitter);
      if (kde.bandwidth) {
        bandwidth = *kde.bandwidth;
      } else if (frozen_bandwidth) {
        bandwidth = *frozen_bandwidth;
      } else {
        const double c = kde.bandwidth_factor > 0.0 ? kde.bandwidth_factor : kde_bandwidth(N, M);
        bandwidth = c * ensemble_covariance(current);
        if (!cfg.refit_each_step) {
          frozen_bandwidth = bandwidth;
        }
      }
      mixture = kde_mixture(current, bandwidth);
    } else if (flow) {
      mixture = flow->mixture;
    } else if (L == 1) {
      mixture = single_gaussian(current);
    } else {
      EmFit fit = em_fit(current, L, previous_fit, cfg.em);
      outcome.em_reinitializations += fit.reinitializations;
      mixture = std::move(fit.mixture);
      previous_fit = mixture;
    }
    if (!cfg.refit_each_step && !kernel && !flow) {
      flow = MixtureFlowState{mixture, 0.0, 0};
    }
    double h = ds;
    if (cfg.rate_limited_steps) {
      const double limit = kernel ? kalman_step_limit(bandwidth, obs) : kalman_step_limit(mixture, obs);
      h = std::min({ds, limit, 1.0 - s});
    }

    Matrix velocity = Matrix::Zero(N, M);
    Matrix log_beta;
    if (!cfg.marginal_responsibilities) {
      log_beta = log_responsibilities(mixture, current);
    }
    for (std::size_t o = 0; o < obs.size(); ++o) {
      const ScalarObservation& ob = obs[o];
      if (cfg.marginal_responsibilities) {
        log_beta = log_marginal_responsibilities(mixture, current, ob.h, cfg.em.varfloor);
      }
      const Responsibilities beta = log_beta.array().exp();
      const auto marg = L > 1 ? marginal(mixture, ob.h, cfg.em.varfloor) : std::vector<MarginalComponent>{};
      const Eigen::VectorXd expectations =
          L > 1 ? expected_negloglik_components(marg, ob) : Eigen::VectorXd{};
      for (int i = 0; i < M; ++i) {
        StateVector u = cfg.kalman == KalmanVariant::perturbed
                            ? u_A_perturbed(i, current, bandwidth, ob, perturbations(static_cast<Eigen::Index>(o), i))
                            : u_A_em(i, current, mixture, beta, ob);
        if (L > 1) {
          const StateVector x = current.member(i);
          StateVector ub = cfg.exchange == ExchangeVariant::erf
                               ? u_B_erf_log(x, mixture, log_beta.row(i).transpose(), marg, ob, expectations)
                               : u_B_t3_log(x, mixture, log_beta.row(i).transpose(), marg, ob, expectations);
          if (ub.lpNorm<Eigen::Infinity>() > cfg.u_cut) {
            ++outcome.clipped_fields;
            ub = clip_uB(ub, cfg.u_cut);
          }
          u += ub;
        }
        velocity.col(i) += u;
      }
    }

    Matrix next = current.matrix() + h * velocity;
    if (!next.allFinite()) {
      for (int i = 0; i < M; ++i) {
        if (!next.col(i).allFinite()) {
          std::ostringstream msg;
          msg << "analysis step: non-finite member " << i << " at pseudo-time step " << k;
          throw NumericalError(msg.str());
        }
      }
    }
    current = Ensemble(std::move(next));
    if (flow) {
      const int clamps_before = flow->clamp_events;
      flow = mixture_param_flow(*flow, obs, h);
      outcome.flow_clamps += flow->clamp_events - clamps_before;
    }
    s += h;
  }
  if (trace) {
    trace(1.0, current);
  }
  outcome.ensemble = std::move(current);
  return outcome;
}

}  // namespace egmf
