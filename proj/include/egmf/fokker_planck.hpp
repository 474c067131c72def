#pragma once

#include "egmf/ensemble.hpp"
#include "egmf/transport.hpp"

#include <functional>
#include <iosfwd>
#include <vector>

namespace egmf {

/// Periodic 1-D grid x_k = lo + k dx, k = 0..n-1, with x = hi identified with lo.
struct Grid1D {
  double lo = -10.0;
  double hi = 10.0;
  double dx = 0.125;

  int size() const;
  double x(int k) const { return lo + k * dx; }
  void validate() const;
};

/// Probability vector on a periodic grid; sum(values) * dx = 1.
struct GridDensity {
  Grid1D grid;
  std::vector<double> values;

  double mass() const;
  /// Discretizes an unnormalized density on the grid and normalizes it.
  static GridDensity from_function(const Grid1D& grid, const std::function<double(double)>& f);
};

using ScalarDrift = std::function<double(double)>;

/// Column-stochastic one-step matrix for dp/dt = -(a p)' + D p'' on the
/// periodic grid. Fluxes between neighbours use exponential fitting
/// (Scharfetter-Gummel) with the drift averaged to the cell face, so all
/// off-diagonal rates are non-negative for any drift and a potential
/// drift a = -D U' keeps exp(-U) stationary to second order. Throws when
/// dt_sub makes a diagonal entry negative.
Matrix build_transition(const ScalarDrift& drift, const Grid1D& grid, double dt_sub,
                        double diffusion = 0.5);

/// Largest dt_model / 2^k for which build_transition stays non-negative.
double stable_substep(const ScalarDrift& drift, const Grid1D& grid, double dt_model,
                      double diffusion = 0.5);

/// Repeated application of one transition matrix, with cached matrix powers
/// for repeatedly used horizons.
class FokkerPlanckPropagator {
 public:
  FokkerPlanckPropagator(ScalarDrift drift, Grid1D grid, double dt_model, double diffusion = 0.5);

  double substep() const { return dt_sub_; }
  const Matrix& transition() const { return transition_; }

  /// Advances over T, which must be a whole number of substeps.
  GridDensity propagate(const GridDensity& rho, double T);
  /// Applies the one-step matrix `steps` times without forming powers.
  GridDensity apply_steps(const GridDensity& rho, long steps) const;

 private:
  const Matrix& power(long steps);

  Grid1D grid_;
  double dt_sub_;
  Matrix transition_;
  long cached_steps_ = -1;
  Matrix cached_power_;
};

/// Propagation under the double-well drift with D = 1/2 and the default substep.
GridDensity fp_propagate(const GridDensity& rho, double T);

/// Pointwise multiplication by exp(-(y_obs - h x)^2 / (2R)) and renormalization.
GridDensity bayes_update(const GridDensity& rho, const ScalarObservation& obs);

double density_mean(const GridDensity& rho);

/// exp(-2V)/Z on the grid: the stationary density of dx = -V' dt + dw.
GridDensity double_well_stationary(const Grid1D& grid);

/// sum_k |p_k - q_k| dx
double l1_distance(const GridDensity& p, const GridDensity& q);

/// Header `x,p`.
void write_density_csv(const GridDensity& rho, std::ostream& out);

}  // namespace egmf
