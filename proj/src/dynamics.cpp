#include "egmf/dynamics.hpp"

#include "egmf/error.hpp"

#include <cmath>
#include <ostream>
#include <sstream>

namespace egmf {

namespace {

void check_finite(const StateVector& x, const char* where) {
  if (!x.allFinite()) {
    throw NumericalError(std::string("integration blow-up in ") + where);
  }
}

}  // namespace

void ModelSpec::validate() const {
  if (dimension < 1) {
    throw ConfigError("model dimension must be positive");
  }
  if (!drift) {
    throw ConfigError("model has no drift");
  }
  if (noise_amplitude.size() != dimension) {
    throw ConfigError("noise amplitude must have the model dimension");
  }
  if ((noise_amplitude.array() < 0.0).any()) {
    throw ConfigError("noise amplitudes must be non-negative");
  }
  if (integrator == Integrator::rk4 && stochastic()) {
    throw ConfigError("rk4 is only available for deterministic models");
  }
}

double double_well_potential(double x) {
  const double r = x / 6.0;
  return std::cos(x) + 0.75 * r * r * r * r;
}

double double_well_potential_derivative(double x) { return -std::sin(x) + x * x * x / 432.0; }

double double_well_drift(double x) { return std::sin(x) - x * x * x / 432.0; }

Eigen::Vector2d langevin_drift(double q, double v) {
  return {v, double_well_drift(q) - kLangevinFriction * v};
}

Eigen::Vector3d lorenz63_drift(double x, double y, double z) {
  return {10.0 * (y - x), x * (28.0 - z) - y, x * y - (8.0 / 3.0) * z};
}

ModelSpec double_well_model() {
  ModelSpec m;
  m.dimension = 1;
  m.drift = [](const StateVector& x, double) {
    StateVector f(1);
    f[0] = double_well_drift(x[0]);
    return f;
  };
  m.noise_amplitude = StateVector::Ones(1);
  m.name = "double_well";
  return m;
}

ModelSpec langevin_model() {
  ModelSpec m;
  m.dimension = 2;
  m.drift = [](const StateVector& x, double) -> StateVector { return langevin_drift(x[0], x[1]); };
  m.noise_amplitude = StateVector(2);
  m.noise_amplitude << 0.0, std::sqrt(kLangevinNoiseVariance);
  m.name = "langevin";
  return m;
}

ModelSpec lorenz63_model() {
  ModelSpec m;
  m.dimension = 3;
  m.drift = [](const StateVector& x, double) -> StateVector { return lorenz63_drift(x[0], x[1], x[2]); };
  m.noise_amplitude = StateVector::Zero(3);
  m.name = "lorenz63";
  m.integrator = Integrator::rk4;
  return m;
}

StateVector step_euler(const ModelSpec& model, const StateVector& x, double t, double dt) {
  if (!(dt > 0.0)) {
    throw ConfigError("time step must be positive");
  }
  StateVector next = x + dt * model.drift(x, t);
  check_finite(next, "forward Euler step");
  return next;
}

StateVector step_euler_maruyama(const ModelSpec& model, const StateVector& x, double t, double dt,
                                RngStream& rng) {
  if (!(dt > 0.0)) {
    throw ConfigError("time step must be positive");
  }
  StateVector next = x + dt * model.drift(x, t);
  const double sqrt_dt = std::sqrt(dt);
  for (Eigen::Index k = 0; k < next.size(); ++k) {
    // Deterministic components consume no random numbers.
    if (model.noise_amplitude[k] > 0.0) {
      next[k] += sqrt_dt * model.noise_amplitude[k] * rng.normal();
    }
  }
  check_finite(next, "Euler-Maruyama step");
  return next;
}

StateVector step_rk4(const ModelSpec& model, const StateVector& x, double t, double dt) {
  if (!(dt > 0.0)) {
    throw ConfigError("time step must be positive");
  }
  const StateVector k1 = model.drift(x, t);
  const StateVector k2 = model.drift(x + 0.5 * dt * k1, t + 0.5 * dt);
  const StateVector k3 = model.drift(x + 0.5 * dt * k2, t + 0.5 * dt);
  const StateVector k4 = model.drift(x + dt * k3, t + dt);
  StateVector next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  check_finite(next, "RK4 step");
  return next;
}

StateVector step_model(const ModelSpec& model, const StateVector& x, double t, double dt, RngStream& rng) {
  if (model.stochastic()) {
    return step_euler_maruyama(model, x, t, dt, rng);
  }
  return model.integrator == Integrator::rk4 ? step_rk4(model, x, t, dt) : step_euler(model, x, t, dt);
}

int step_count(double t0, double t1, double dt) {
  if (!(dt > 0.0)) {
    throw ConfigError("time step must be positive");
  }
  const double ratio = (t1 - t0) / dt;
  const double rounded = std::round(ratio);
  if (rounded < 0.0 || std::abs(ratio - rounded) > 1e-9 * std::max(1.0, std::abs(ratio))) {
    throw ConfigError("interval is not a whole number of time steps");
  }
  return static_cast<int>(rounded);
}

Ensemble propagate_ensemble(const ModelSpec& model, const Ensemble& e, double t0, double t1,
                            double dt, RngStream& rng) {
  const int steps = step_count(t0, t1, dt);
  if (steps == 0) {
    return e;
  }
  const bool stochastic = model.stochastic();
  const std::uint64_t key = stochastic ? rng.fork_key() : 0;
  Matrix out(e.dimension(), e.size());
  for (int i = 0; i < e.size(); ++i) {
    RngStream member_rng(key, static_cast<std::uint64_t>(i));
    StateVector x = e.member(i);
    double t = t0;
    try {
      for (int k = 0; k < steps; ++k) {
        x = step_model(model, x, t, dt, member_rng);
        t = t0 + (k + 1) * dt;
      }
    } catch (const NumericalError& err) {
      std::ostringstream msg;
      msg << err.what() << " (member " << i << ", t=" << t << ")";
      throw NumericalError(msg.str());
    }
    out.col(i) = x;
  }
  return Ensemble(std::move(out));
}

Trajectory simulate(const ModelSpec& model, const StateVector& x0, double t0, double dt, int steps,
                    RngStream& rng) {
  model.validate();
  if (steps < 0) {
    throw ConfigError("negative step count");
  }
  Trajectory traj;
  traj.times.reserve(static_cast<std::size_t>(steps) + 1);
  traj.states.reserve(static_cast<std::size_t>(steps) + 1);
  traj.times.push_back(t0);
  traj.states.push_back(x0);
  StateVector x = x0;
  for (int k = 0; k < steps; ++k) {
    const double t = t0 + k * dt;
    x = step_model(model, x, t, dt, rng);
    traj.times.push_back(t0 + (k + 1) * dt);
    traj.states.push_back(x);
  }
  return traj;
}

std::vector<TimedObservation> synth_observations(const Trajectory& truth, const StateVector& h,
                                                 double R, double obs_interval, RngStream& rng) {
  if (R < 0.0) {
    throw ConfigError("observation error variance must be non-negative");
  }
  if (truth.times.size() < 2 || truth.times.size() != truth.states.size()) {
    throw ConfigError("observations need an aligned trajectory with at least two states");
  }
  const double spacing = truth.times[1] - truth.times[0];
  const double ratio = obs_interval / spacing;
  const double stride_d = std::round(ratio);
  if (stride_d < 1.0 || std::abs(ratio - stride_d) > 1e-9 * ratio) {
    throw ConfigError("observation interval is not a multiple of the trajectory spacing");
  }
  const auto stride = static_cast<std::size_t>(stride_d);
  const double sd = std::sqrt(R);
  std::vector<TimedObservation> obs;
  for (std::size_t k = stride; k < truth.states.size(); k += stride) {
    const double noise = sd > 0.0 ? sd * rng.normal() : 0.0;
    obs.push_back({truth.times[k], h.dot(truth.states[k]) + noise});
  }
  return obs;
}

void write_trajectory_csv(const Trajectory& trajectory, std::ostream& out) {
  const auto n = trajectory.states.empty() ? 0 : trajectory.states.front().size();
  out << 't';
  for (Eigen::Index j = 0; j < n; ++j) {
    out << ",x" << (j + 1);
  }
  out << '\n';
  out.precision(17);
  for (std::size_t k = 0; k < trajectory.states.size(); ++k) {
    out << trajectory.times[k];
    for (Eigen::Index j = 0; j < n; ++j) {
      out << ',' << trajectory.states[k][j];
    }
    out << '\n';
  }
}

}  // namespace egmf
