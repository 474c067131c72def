#include "egmf/fokker_planck.hpp"

#include "egmf/dynamics.hpp"
#include "egmf/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

namespace egmf {

namespace {

// Bernoulli function z / (e^z - 1).
double bernoulli(double z) {
  if (std::abs(z) < 1e-8) {
    return 1.0 - 0.5 * z;
  }
  return z / std::expm1(z);
}

void check_grid_match(const GridDensity& rho) {
  if (static_cast<int>(rho.values.size()) != rho.grid.size()) {
    throw ConfigError("density does not match its grid");
  }
}

}  // namespace

int Grid1D::size() const { return static_cast<int>(std::lround((hi - lo) / dx)); }

void Grid1D::validate() const {
  if (!(dx > 0.0) || !(hi > lo)) {
    throw ConfigError("grid needs dx > 0 and hi > lo");
  }
  const double n = (hi - lo) / dx;
  if (std::abs(n - std::round(n)) > 1e-9 * n || n < 3) {
    throw ConfigError("grid length must be a whole number (>= 3) of cells");
  }
}

double GridDensity::mass() const {
  double total = 0.0;
  for (double v : values) {
    total += v;
  }
  return total * grid.dx;
}

GridDensity GridDensity::from_function(const Grid1D& grid, const std::function<double(double)>& f) {
  grid.validate();
  GridDensity rho{grid, std::vector<double>(static_cast<std::size_t>(grid.size()))};
  for (int k = 0; k < grid.size(); ++k) {
    const double v = f(grid.x(k));
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ConfigError("density values must be finite and non-negative");
    }
    rho.values[static_cast<std::size_t>(k)] = v;
  }
  const double m = rho.mass();
  if (!(m > 0.0)) {
    throw ConfigError("density has zero mass on the grid");
  }
  for (auto& v : rho.values) {
    v /= m;
  }
  return rho;
}

Matrix build_transition(const ScalarDrift& drift, const Grid1D& grid, double dt_sub,
                        double diffusion) {
  grid.validate();
  if (!(dt_sub > 0.0) || !(diffusion > 0.0)) {
    throw ConfigError("transition needs dt_sub > 0 and diffusion > 0");
  }
  const int n = grid.size();
  const double dx = grid.dx;
  const double base = diffusion / (dx * dx);
  std::vector<double> a(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    a[static_cast<std::size_t>(k)] = drift(grid.x(k));
  }
  Matrix A = Matrix::Zero(n, n);
  for (int k = 0; k < n; ++k) {
    const int up = (k + 1) % n;
    const int down = (k + n - 1) % n;
    const double face_up = 0.5 * (a[static_cast<std::size_t>(k)] + a[static_cast<std::size_t>(up)]);
    const double face_down = 0.5 * (a[static_cast<std::size_t>(k)] + a[static_cast<std::size_t>(down)]);
    const double rate_up = base * bernoulli(-face_up * dx / diffusion);
    const double rate_down = base * bernoulli(face_down * dx / diffusion);
    const double stay = 1.0 - dt_sub * (rate_up + rate_down);
    if (stay < 0.0) {
      throw ConfigError("Fokker-Planck substep violates the stability bound");
    }
    A(up, k) += dt_sub * rate_up;
    A(down, k) += dt_sub * rate_down;
    A(k, k) += stay;
  }
  return A;
}

double stable_substep(const ScalarDrift& drift, const Grid1D& grid, double dt_model,
                      double diffusion) {
  grid.validate();
  double max_rate = 0.0;
  const double dx = grid.dx;
  const double base = diffusion / (dx * dx);
  const int n = grid.size();
  for (int k = 0; k < n; ++k) {
    const double ak = drift(grid.x(k));
    const double up = 0.5 * (ak + drift(grid.x((k + 1) % n)));
    const double down = 0.5 * (ak + drift(grid.x((k + n - 1) % n)));
    max_rate = std::max(max_rate, base * (bernoulli(-up * dx / diffusion) + bernoulli(down * dx / diffusion)));
  }
  double dt = dt_model;
  while (dt * max_rate > 1.0) {
    dt *= 0.5;
  }
  return dt;
}

FokkerPlanckPropagator::FokkerPlanckPropagator(ScalarDrift drift, Grid1D grid, double dt_model,
                                               double diffusion)
    : grid_(grid),
      dt_sub_(stable_substep(drift, grid, dt_model, diffusion)),
      transition_(build_transition(drift, grid, dt_sub_, diffusion)) {}

const Matrix& FokkerPlanckPropagator::power(long steps) {
  if (steps != cached_steps_) {
    Matrix result = Matrix::Identity(transition_.rows(), transition_.cols());
    Matrix base = transition_;
    long remaining = steps;
    while (remaining > 0) {
      if (remaining & 1L) {
        result = base * result;
      }
      remaining >>= 1;
      if (remaining > 0) {
        base = base * base;
      }
    }
    cached_power_ = std::move(result);
    cached_steps_ = steps;
  }
  return cached_power_;
}

GridDensity FokkerPlanckPropagator::propagate(const GridDensity& rho, double T) {
  check_grid_match(rho);
  if (T < 0.0) {
    throw ConfigError("propagation time must be non-negative");
  }
  const long steps = step_count(0.0, T, dt_sub_);
  if (steps == 0) {
    return rho;
  }
  const Eigen::Map<const Eigen::VectorXd> p(rho.values.data(), static_cast<Eigen::Index>(rho.values.size()));
  Eigen::VectorXd next = power(steps) * p;
  GridDensity out{rho.grid, std::vector<double>(next.data(), next.data() + next.size())};
  // Products of stochastic matrices drift from unit mass by rounding only.
  const double m = out.mass();
  for (auto& v : out.values) {
    v = std::max(v, 0.0) / m;
  }
  return out;
}

GridDensity FokkerPlanckPropagator::apply_steps(const GridDensity& rho, long steps) const {
  check_grid_match(rho);
  Eigen::VectorXd p = Eigen::Map<const Eigen::VectorXd>(rho.values.data(),
                                                        static_cast<Eigen::Index>(rho.values.size()));
  for (long s = 0; s < steps; ++s) {
    p = transition_ * p;
  }
  return GridDensity{rho.grid, std::vector<double>(p.data(), p.data() + p.size())};
}

GridDensity fp_propagate(const GridDensity& rho, double T) {
  FokkerPlanckPropagator prop(double_well_drift, rho.grid, 0.1);
  if (T == 0.0) {
    return rho;
  }
  return prop.propagate(rho, T);
}

GridDensity bayes_update(const GridDensity& rho, const ScalarObservation& obs) {
  check_grid_match(rho);
  obs.validate(1);
  const double h = obs.h[0];
  std::vector<double> log_post(rho.values.size());
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < rho.values.size(); ++k) {
    const double r = obs.y_obs - h * rho.grid.x(static_cast<int>(k));
    log_post[k] = rho.values[k] > 0.0 ? std::log(rho.values[k]) - r * r / (2.0 * obs.R)
                                      : -std::numeric_limits<double>::infinity();
    top = std::max(top, log_post[k]);
  }
  if (!std::isfinite(top)) {
    throw NumericalError("Bayes update: posterior mass underflows on the grid");
  }
  GridDensity out{rho.grid, std::vector<double>(rho.values.size())};
  for (std::size_t k = 0; k < log_post.size(); ++k) {
    out.values[k] = std::exp(log_post[k] - top);
  }
  const double m = out.mass();
  if (!(m > 0.0) || !std::isfinite(m)) {
    throw NumericalError("Bayes update: posterior mass underflows on the grid");
  }
  for (auto& v : out.values) {
    v /= m;
  }
  return out;
}

double density_mean(const GridDensity& rho) {
  check_grid_match(rho);
  double total = 0.0;
  for (std::size_t k = 0; k < rho.values.size(); ++k) {
    total += rho.grid.x(static_cast<int>(k)) * rho.values[k];
  }
  return total * rho.grid.dx;
}

GridDensity double_well_stationary(const Grid1D& grid) {
  return GridDensity::from_function(grid, [](double x) { return std::exp(-2.0 * double_well_potential(x)); });
}

double l1_distance(const GridDensity& p, const GridDensity& q) {
  check_grid_match(p);
  check_grid_match(q);
  if (p.values.size() != q.values.size()) {
    throw ConfigError("densities live on different grids");
  }
  double total = 0.0;
  for (std::size_t k = 0; k < p.values.size(); ++k) {
    total += std::abs(p.values[k] - q.values[k]);
  }
  return total * p.grid.dx;
}

void write_density_csv(const GridDensity& rho, std::ostream& out) {
  out << "x,p\n";
  out.precision(17);
  for (std::size_t k = 0; k < rho.values.size(); ++k) {
    out << rho.grid.x(static_cast<int>(k)) << ',' << rho.values[k] << '\n';
  }
}

}  // namespace egmf
