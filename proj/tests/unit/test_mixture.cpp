#include "egmf/error.hpp"
#include "egmf/mixture.hpp"
#include "egmf/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

using namespace egmf;

namespace {

Ensemble row(std::initializer_list<double> xs) {
  Matrix m(1, static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) m(0, i++) = x;
  return Ensemble(m);
}

Ensemble two_clusters(int per_cluster, double centre, double sd, std::uint64_t seed) {
  RngStream rng(seed, 0);
  Matrix x(1, 2 * per_cluster);
  for (int i = 0; i < per_cluster; ++i) {
    x(0, i) = -centre + sd * rng.normal();
    x(0, per_cluster + i) = centre + sd * rng.normal();
  }
  return Ensemble(x);
}

GaussianMixture two_component(double a, double b, double var_a, double var_b, double w_a) {
  GaussianMixture m;
  m.weights = Eigen::Vector2d(w_a, 1.0 - w_a);
  m.means = {StateVector::Constant(1, a), StateVector::Constant(1, b)};
  m.covariances = {Matrix::Constant(1, 1, var_a), Matrix::Constant(1, 1, var_b)};
  return m;
}

}  // namespace

TEST(GaussianLogpdf, StandardNormalValues) {
  const StateVector zero = StateVector::Zero(1);
  const Matrix one = Matrix::Identity(1, 1);
  EXPECT_NEAR(gaussian_logpdf(zero, zero, one), -0.918939, 1e-6);
  EXPECT_NEAR(gaussian_logpdf(StateVector::Ones(1), zero, one), -1.418939, 1e-6);
  EXPECT_NEAR(gaussian_logpdf(StateVector::Constant(1, 4.0), StateVector::Constant(1, 3.0), one),
              gaussian_logpdf(StateVector::Ones(1), zero, one), 1e-15);
  EXPECT_NEAR(normal_logpdf(1.0, 0.0, 1.0), -1.418939, 1e-6);
}

TEST(GaussianLogpdf, MatchesDirectFormulaInThreeDimensions) {
  Matrix P(3, 3);
  P << 2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5;
  StateVector mu(3), x(3);
  mu << 1.0, -1.0, 0.5;
  x << 0.2, 0.4, -0.3;
  const StateVector d = x - mu;
  const double direct = -0.5 * (3.0 * std::log(2.0 * std::numbers::pi) + std::log(P.determinant()) +
                                d.dot(P.inverse() * d));
  EXPECT_NEAR(gaussian_logpdf(x, mu, P), direct, 1e-12);
  Matrix indefinite = Matrix::Identity(3, 3);
  indefinite(2, 2) = -1.0;
  EXPECT_THROW(gaussian_logpdf(x, mu, indefinite), ConfigError);
}

TEST(Responsibilities, Cases) {
  const Ensemble e = row({-1.0, 0.0, 2.0});
  GaussianMixture one;
  one.weights = Eigen::VectorXd::Ones(1);
  one.means = {StateVector::Zero(1)};
  one.covariances = {Matrix::Identity(1, 1)};
  EXPECT_TRUE(responsibilities(one, e).isOnes());

  const Responsibilities same = responsibilities(two_component(0.0, 0.0, 1.0, 1.0, 0.5), e);
  EXPECT_LT((same.array() - 0.5).abs().maxCoeff(), 1e-15);

  const Responsibilities far = responsibilities(two_component(0.0, 10.0, 1.0, 1.0, 0.5), row({0.0}));
  EXPECT_NEAR(far(0, 0), 1.0, 1e-6);

  const Responsibilities r = responsibilities(two_component(-1.0, 1.5, 0.7, 2.0, 0.3), e);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(r.row(i).sum(), 1.0, 1e-12);
}

TEST(Responsibilities, MarginalFormMatchesFullDensityInOneDimension) {
  const GaussianMixture m = two_component(-2.0, 1.0, 0.5, 1.5, 0.4);
  const Ensemble e = row({-3.0, -1.0, 0.0, 0.5, 4.0});
  const Responsibilities full = responsibilities(m, e);
  const Responsibilities marg = marginal_responsibilities(m, e, StateVector::Ones(1));
  EXPECT_LT((full - marg).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(EmStep, SingleComponentGivesBiasedMoments) {
  const Ensemble e = row({1.0, 2.0, 4.0, 9.0});
  GaussianMixture init = default_em_init(e, 1, 0.0);
  const double delta = 1e-3;
  const GaussianMixture out = em_step(init, e, delta, 0.0);
  EXPECT_DOUBLE_EQ(out.weights[0], 1.0);
  EXPECT_DOUBLE_EQ(out.means[0][0], 4.0);
  // (9 + 4 + 0 + 25) / 4
  EXPECT_NEAR(out.covariances[0](0, 0), 9.5 + delta, 1e-12);
}

TEST(EmStep, VarianceFloorOnIdenticalMembers) {
  const Ensemble e = row({0.3, 0.3, 0.3, 0.3});
  GaussianMixture init;
  init.weights = Eigen::VectorXd::Ones(1);
  init.means = {StateVector::Constant(1, 0.3)};
  init.covariances = {Matrix::Constant(1, 1, 1.0)};
  const GaussianMixture out = em_step(init, e, 0.0, 0.0005);
  EXPECT_DOUBLE_EQ(out.covariances[0](0, 0), 0.0005);
}

TEST(EmStep, FloorClampsEigenvaluesInTwoDimensions) {
  Matrix x(2, 4);
  x << 0.0, 1.0, 2.0, 3.0,
       0.0, 1.0, 2.0, 3.0;
  GaussianMixture init;
  init.weights = Eigen::VectorXd::Ones(1);
  init.means = {StateVector::Zero(2)};
  init.covariances = {Matrix::Identity(2, 2)};
  const GaussianMixture out = em_step(init, Ensemble(x), 0.0, 0.01);
  const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Matrix>(out.covariances[0]).eigenvalues();
  EXPECT_NEAR(ev.minCoeff(), 0.01, 1e-12);
  EXPECT_NEAR(ev.maxCoeff(), 2.5, 1e-12);
}

TEST(EmStep, EmptyComponentIsReseeded) {
  const Ensemble e = row({-1.0, 0.0, 1.0, 5.0});
  GaussianMixture m = two_component(0.0, 1e6, 1.0, 1e-4, 0.5);
  EmEvents events;
  const GaussianMixture out = em_step(m, e, 1e-6, 0.0, &events);
  EXPECT_EQ(events.reinitializations, 1);
  EXPECT_DOUBLE_EQ(out.means[1][0], 5.0);
  EXPECT_NEAR(out.weights.sum(), 1.0, 1e-15);
}

TEST(EmStep, InvariantsAndMonotoneLikelihood) {
  for (std::uint64_t seed = 1; seed <= 15; ++seed) {
    RngStream rng(seed, 7);
    Matrix x(2, 40);
    for (int i = 0; i < 40; ++i) {
      const double shift = i < 25 ? -2.0 : 2.5;
      x(0, i) = shift + rng.normal();
      x(1, i) = 0.5 * shift + 0.7 * rng.normal();
    }
    const Ensemble e(x);
    GaussianMixture m = default_em_init(e, 2, 0.0);
    double ll = mixture_loglik(m, e);
    for (int it = 0; it < 30; ++it) {
      m = em_step(m, e, 0.0, 0.0);
      EXPECT_NEAR(m.weights.sum(), 1.0, 1e-12);
      for (const auto& P : m.covariances) EXPECT_EQ(P, P.transpose());
      const double next = mixture_loglik(m, e);
      EXPECT_GE(next, ll - 1e-9 * std::abs(ll));
      ll = next;
    }
  }
}

TEST(EmFit, SeparatedClustersRecoverSampleMeans) {
  const Ensemble e = two_clusters(25, 10.0, 1.0, 3);
  const EmFit fit = em_fit(e, 2, std::nullopt, EmParams{});
  ASSERT_TRUE(fit.converged);
  double left = 0.0, right = 0.0;
  for (int i = 0; i < 25; ++i) {
    left += e.member(i)[0] / 25.0;
    right += e.member(25 + i)[0] / 25.0;
  }
  const double lo = std::min(fit.mixture.means[0][0], fit.mixture.means[1][0]);
  const double hi = std::max(fit.mixture.means[0][0], fit.mixture.means[1][0]);
  EXPECT_NEAR(lo, left, 0.01);
  EXPECT_NEAR(hi, right, 0.01);
}

TEST(EmFit, BimodalEnsembleStraddlesZero) {
  const Ensemble e = two_clusters(30, std::numbers::pi, 0.8, 4);
  const EmFit fit = em_fit(e, 2, std::nullopt, EmParams{});
  EXPECT_LT(fit.mixture.means[0][0] * fit.mixture.means[1][0], 0.0);
}

TEST(EmFit, SingleComponentAndWarmStart) {
  const Ensemble e = row({0.0, 1.0, 3.0});
  const EmFit one = em_fit(e, 1, std::nullopt, EmParams{});
  EXPECT_TRUE(one.converged);
  EXPECT_LE(one.iterations, 2);
  const EmFit again = em_fit(e, 1, one.mixture, EmParams{});
  EXPECT_EQ(again.iterations, 1);
  EXPECT_THROW(em_fit(e, 0, std::nullopt, EmParams{}), ConfigError);
}

TEST(EmInit, QuantileSeeding) {
  const Ensemble e = row({4.0, 0.0, 2.0, 1.0, 3.0});
  const GaussianMixture m = default_em_init(e, 2, 0.0);
  EXPECT_DOUBLE_EQ(m.means[0][0], 1.0);
  EXPECT_DOUBLE_EQ(m.means[1][0], 3.0);
  EXPECT_DOUBLE_EQ(m.covariances[0](0, 0), 2.5);
}

TEST(LPolicy, NinetyPercentRule) {
  EXPECT_EQ(l_policy_double_well(row({3.0, 3.0, 3.0})), 1);
  EXPECT_EQ(l_policy_double_well(row({-1.0, 1.0, -2.0, 2.0})), 2);
  // Strictly more than 90%: 46 of 50 gives one component, 45 of 50 gives two.
  Matrix x = Matrix::Constant(1, 50, 2.0);
  for (int i = 46; i < 50; ++i) x(0, i) = -2.0;
  EXPECT_EQ(l_policy_double_well(Ensemble(x)), 1);
  x(0, 45) = -2.0;
  EXPECT_EQ(l_policy_double_well(Ensemble(x)), 2);
  // Zeros count for neither side.
  Matrix z = Matrix::Constant(1, 20, 1.0);
  z(0, 0) = 0.0;
  EXPECT_EQ(l_policy_double_well(Ensemble(z)), 1);
  z(0, 1) = 0.0;
  EXPECT_EQ(l_policy_double_well(Ensemble(z)), 2);
}

TEST(KdeBandwidth, Values) {
  EXPECT_NEAR(kde_bandwidth(2, 1), 0.62996, 1e-5);
  EXPECT_NEAR(kde_bandwidth(1, 1), 0.72298, 1e-5);
  EXPECT_NEAR(kde_bandwidth(3, 25), 0.23615, 1e-5);
  EXPECT_THROW(kde_bandwidth(0, 5), ConfigError);
}

TEST(KdeMixture, MomentsAndNormalization) {
  RngStream rng(12, 0);
  Matrix x(2, 9);
  for (int i = 0; i < 9; ++i) x.col(i) << rng.normal(), 2.0 * rng.normal() + 1.0;
  const Ensemble e(x);
  Matrix B(2, 2);
  B << 0.3, 0.05, 0.05, 0.2;
  const GaussianMixture m = kde_mixture(e, B);
  StateVector mean = StateVector::Zero(2);
  for (int l = 0; l < m.components(); ++l) mean += m.weights[l] * m.means[l];
  EXPECT_LT((mean - ensemble_mean(e)).norm(), 1e-14);
  // Law of total variance.
  Matrix cov = Matrix::Zero(2, 2);
  for (int l = 0; l < m.components(); ++l) {
    const StateVector d = m.means[l] - mean;
    cov += m.weights[l] * (m.covariances[l] + d * d.transpose());
  }
  EXPECT_LT((cov - (8.0 / 9.0 * ensemble_covariance(e) + B)).norm(), 1e-13);
  EXPECT_THROW(kde_mixture(e, -B), ConfigError);

  // One-dimensional density integrates to one.
  const GaussianMixture k1 = kde_mixture(row({-1.0, 0.5, 2.0}), Matrix::Constant(1, 1, 0.25));
  double integral = 0.0;
  const double h = 1e-3;
  for (double y = -10.0; y < 10.0; y += h) {
    double p = 0.0;
    for (int l = 0; l < 3; ++l) {
      p += k1.weights[l] * std::exp(normal_logpdf(y + 0.5 * h, k1.means[l][0], 0.5));
    }
    integral += p * h;
  }
  EXPECT_NEAR(integral, 1.0, 1e-9);
}

TEST(Marginal, Values) {
  GaussianMixture m;
  m.weights = Eigen::VectorXd::Ones(1);
  m.means = {StateVector::Constant(1, 1.0)};
  m.covariances = {Matrix::Constant(1, 1, 4.0)};
  EXPECT_DOUBLE_EQ(marginal(m, StateVector::Ones(1))[0].sigma, 2.0);

  GaussianMixture m2;
  m2.weights = Eigen::VectorXd::Ones(1);
  m2.means = {Eigen::Vector2d(3.0, -1.0)};
  m2.covariances = {Matrix::Identity(2, 2)};
  EXPECT_DOUBLE_EQ(marginal(m2, Eigen::Vector2d(1.0, 1.0))[0].sigma, std::sqrt(2.0));
  m2.covariances[0](0, 0) = 5.0;
  const auto first = marginal(m2, Eigen::Vector2d(1.0, 0.0));
  EXPECT_DOUBLE_EQ(first[0].ybar, 3.0);
  EXPECT_DOUBLE_EQ(first[0].sigma, std::sqrt(5.0));
  EXPECT_THROW(marginal(m2, Eigen::Vector2d(0.0, 0.0)), ConfigError);
  m2.covariances[0].setZero();
  EXPECT_DOUBLE_EQ(marginal(m2, Eigen::Vector2d(1.0, 0.0), 0.0004)[0].sigma, 0.02);
}

TEST(Responsibilities, PermutationEquivariant) {
  const Ensemble e = two_clusters(10, 2.0, 1.0, 8);
  const GaussianMixture m = em_step(default_em_init(e, 2, 1e-6), e, 1e-6, 0.0);
  GaussianMixture swapped = m;
  std::swap(swapped.means[0], swapped.means[1]);
  std::swap(swapped.covariances[0], swapped.covariances[1]);
  std::swap(swapped.weights[0], swapped.weights[1]);
  const Responsibilities a = responsibilities(m, e);
  const Responsibilities b = responsibilities(swapped, e);
  EXPECT_LT((a.col(0) - b.col(1)).cwiseAbs().maxCoeff(), 1e-14);
  Matrix reversed = e.matrix().rowwise().reverse();
  const Responsibilities c = responsibilities(m, Ensemble(reversed));
  EXPECT_LT((a.colwise().reverse() - c).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(MixtureCsv, Header) {
  std::ostringstream out;
  write_mixture_csv(two_component(0.0, 1.0, 1.0, 2.0, 0.5), out);
  EXPECT_EQ(out.str().substr(0, out.str().find('\n')), "component,alpha,mean_1,cov_11");
}
