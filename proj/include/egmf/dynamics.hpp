#pragma once

#include "egmf/ensemble.hpp"
#include "egmf/rng.hpp"

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace egmf {

using DriftFn = std::function<StateVector(const StateVector&, double)>;

/// Time stepper used by propagate_ensemble. Stochastic models always use
/// Euler-Maruyama; rk4 is for deterministic models only.
enum class Integrator { euler, rk4 };

/// dx = drift(x, t) dt + diag(noise_amplitude) dw.
struct ModelSpec {
  int dimension = 0;
  DriftFn drift;
  StateVector noise_amplitude;  // zero for deterministic models
  std::string name;
  Integrator integrator = Integrator::euler;

  void validate() const;
  bool stochastic() const { return noise_amplitude.size() > 0 && noise_amplitude.maxCoeff() > 0.0; }
};

struct Trajectory {
  std::vector<double> times;
  std::vector<StateVector> states;
};

inline constexpr double kLangevinFriction = 0.25;
inline constexpr double kLangevinNoiseVariance = 0.35;

/// V(x) = cos(x) + (3/4)(x/6)^4
double double_well_potential(double x);
/// V'(x)
double double_well_potential_derivative(double x);
/// -V'(x) = sin(x) - x^3/432
double double_well_drift(double x);

/// (dq/dt, dv/dt) = (v, -V'(q) - gamma v)
Eigen::Vector2d langevin_drift(double q, double v);

Eigen::Vector3d lorenz63_drift(double x, double y, double z);

/// Brownian dynamics dx = -V'(x) dt + dw.
ModelSpec double_well_model();
/// Langevin dynamics in (q, v) with noise amplitude (0, sqrt(0.35)).
ModelSpec langevin_model();
/// Integrated with classical RK4: forward Euler at dt = 0.01 diverges from
/// the off-attractor states that analyses occasionally produce.
ModelSpec lorenz63_model();

StateVector step_euler(const ModelSpec& model, const StateVector& x, double t, double dt);
StateVector step_euler_maruyama(const ModelSpec& model, const StateVector& x, double t, double dt,
                                RngStream& rng);
/// Classical fourth-order Runge-Kutta step of the drift.
StateVector step_rk4(const ModelSpec& model, const StateVector& x, double t, double dt);
/// One step with the model's integrator; draws from rng only for stochastic models.
StateVector step_model(const ModelSpec& model, const StateVector& x, double t, double dt, RngStream& rng);

/// Number of dt steps spanning [t0, t1]; throws unless it is a whole number.
int step_count(double t0, double t1, double dt);

/// Advances every member independently over [t0, t1]. Member i draws its
/// noise from RngStream(key, i), where key is one draw from `rng`.
Ensemble propagate_ensemble(const ModelSpec& model, const Ensemble& e, double t0, double t1,
                            double dt, RngStream& rng);

/// Euler-Maruyama path with `steps` increments (steps + 1 states).
Trajectory simulate(const ModelSpec& model, const StateVector& x0, double t0, double dt, int steps,
                    RngStream& rng);

struct TimedObservation {
  double time = 0.0;
  double value = 0.0;
};

/// y(t_j) = h·x(t_j) + sqrt(R) xi_j at every multiple of obs_interval after
/// the first trajectory time. R = 0 gives exact observations.
std::vector<TimedObservation> synth_observations(const Trajectory& truth, const StateVector& h,
                                                 double R, double obs_interval, RngStream& rng);

/// Header `t,x1,...,xN`.
void write_trajectory_csv(const Trajectory& trajectory, std::ostream& out);

}  // namespace egmf
