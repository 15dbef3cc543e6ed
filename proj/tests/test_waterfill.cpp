#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dare/ensemble.hpp"
#include "dare/errors.hpp"
#include "dare/waterfill.hpp"

namespace dare {
namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index k = 0;
  for (double x : v) out(k++) = x;
  return out;
}

WaterFillProblem problem(Vector s2, Vector theta_sq, double budget) {
  WaterFillProblem p;
  p.s2 = std::move(s2);
  p.theta_star_sq = std::move(theta_sq);
  p.budget = budget;
  return p;
}

WaterFillProblem random_problem(std::mt19937_64& rng, int p_max) {
  std::uniform_int_distribution<int> dim(1, p_max);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int p = dim(rng);
  Vector s2(p), th(p);
  for (int k = 0; k < p; ++k) {
    s2(k) = std::pow(10.0, -2.0 + 4.0 * u(rng));
    th(k) = u(rng) < 0.2 ? 0.0 : std::pow(10.0, -3.0 + 4.0 * u(rng));
  }
  return problem(s2, th, std::pow(10.0, -2.0 + 3.0 * u(rng)));
}

TEST(WaterFill, SingleComponentTakesWholeBudget) {
  const auto sol = waterfill_solve(problem(vec({1.0}), vec({0.0}), 1.0));
  EXPECT_NEAR(sol.sigma2(0), 1.0, 1e-12);
}

TEST(WaterFill, EqualCostsSplitEvenly) {
  const auto sol = waterfill_solve(problem(vec({1.0, 1.0}), vec({0.0, 0.0}), 2.0));
  EXPECT_NEAR(sol.sigma2(0), 1.0, 1e-12);
  EXPECT_NEAR(sol.sigma2(1), 1.0, 1e-12);
}

TEST(WaterFill, LargePriorIsClipped) {
  const auto p = problem(vec({1.0, 1.0}), vec({0.0, 100.0}), 1.0);
  const auto sol = waterfill_solve(p);
  EXPECT_NEAR(sol.sigma2(0), 1.0, 1e-12);
  EXPECT_EQ(sol.sigma2(1), 0.0);
  EXPECT_EQ(sol.active_set, std::vector<int>{0});
  EXPECT_NEAR(sol.water_level, 1.0, 1e-12);
}

TEST(WaterFill, CostlyComponentGetsLess) {
  // Each component receives the same share u_k = s_k^2 sigma_k^2 = budget / p.
  const auto sol = waterfill_solve(problem(vec({1.0, 4.0}), vec({0.0, 0.0}), 2.0));
  EXPECT_NEAR(sol.sigma2(0), 1.0, 1e-12);
  EXPECT_NEAR(sol.sigma2(1), 0.25, 1e-12);
}

TEST(WaterFill, PriorShiftsTheLevel) {
  // sigma_0^2 = c, sigma_1^2 = c - 0.5, sum = 1.
  const auto sol = waterfill_solve(problem(vec({1.0, 1.0}), vec({0.0, 0.5}), 1.0));
  EXPECT_NEAR(sol.sigma2(0), 0.75, 1e-12);
  EXPECT_NEAR(sol.sigma2(1), 0.25, 1e-12);
}

TEST(WaterFill, InvalidProblemsThrow) {
  EXPECT_THROW(waterfill_solve(problem(Vector(0), Vector(0), 1.0)), ConfigError);
  EXPECT_THROW(waterfill_solve(problem(vec({1.0}), vec({0.0, 1.0}), 1.0)), ShapeError);
  EXPECT_THROW(waterfill_solve(problem(vec({0.0}), vec({0.0}), 1.0)), ConfigError);
  EXPECT_THROW(waterfill_solve(problem(vec({1.0}), vec({-1.0}), 1.0)), ConfigError);
  EXPECT_THROW(waterfill_solve(problem(vec({1.0}), vec({0.0}), 0.0)), ConfigError);
}

TEST(WaterFill, ClosedFormMatchesOracle) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 40; ++i) {
    const auto p = random_problem(rng, 6);
    const auto sol = waterfill_solve(p);
    const auto orc = waterfill_oracle(p);
    EXPECT_LT((sol.sigma2 - orc.sigma2).cwiseAbs().maxCoeff(), 1e-6) << "problem " << i;
    EXPECT_GE(waterfill_objective(p, sol.sigma2), orc.objective - 1e-12);
  }
}

TEST(WaterFill, KktResidualsVanish) {
  std::mt19937_64 rng(12);
  for (int i = 0; i < 100; ++i) {
    const auto p = random_problem(rng, 6);
    const auto sol = waterfill_solve(p);
    const auto kkt = kkt_residuals(p, sol);
    EXPECT_LT(kkt.budget, 1e-10);
    EXPECT_LT(kkt.complementary_slackness, 1e-8);
    EXPECT_LT(kkt.dual_feasibility, 1e-8);
    EXPECT_LT(budget_residual(p, sol.sigma2), 1e-10);
    EXPECT_GE(sol.sigma2.minCoeff(), 0.0);
  }
}

TEST(WaterFill, NoFeasiblePointBeatsClosedForm) {
  std::mt19937_64 rng(13);
  std::exponential_distribution<double> e(1.0);
  for (int i = 0; i < 20; ++i) {
    const auto p = random_problem(rng, 5);
    const double best = waterfill_objective(p, waterfill_solve(p).sigma2);
    for (int t = 0; t < 200; ++t) {
      Vector u(p.size());
      for (Eigen::Index k = 0; k < u.size(); ++k) u(k) = e(rng);
      u *= p.budget / u.sum();
      const Vector sigma2 = u.cwiseQuotient(p.s2);
      EXPECT_LE(waterfill_objective(p, sigma2), best + 1e-12);
    }
  }
}

TEST(WaterFill, LevelGrowsWithBudget) {
  const Vector s2 = vec({0.5, 1.0, 3.0}), th = vec({0.1, 0.0, 2.0});
  Vector prev = Vector::Zero(3);
  for (double b : {0.1, 0.5, 1.0, 5.0, 20.0}) {
    const auto sol = waterfill_solve(problem(s2, th, b));
    for (Eigen::Index k = 0; k < 3; ++k) EXPECT_GE(sol.sigma2(k), prev(k) - 1e-12);
    prev = sol.sigma2;
  }
}

TEST(WaterFill, ProjectionOntoSimplex) {
  const Vector u = project_to_simplex(vec({0.5, 0.5, 3.0}), 1.0);
  EXPECT_NEAR(u(2), 1.0, 1e-15);
  EXPECT_EQ(u(0), 0.0);
  const Vector w = project_to_simplex(vec({0.2, 0.3}), 1.0);
  EXPECT_NEAR(w(0), 0.45, 1e-15);
  EXPECT_NEAR(w(1), 0.55, 1e-15);
}

TEST(WaterFill, JsonRoundTrip) {
  const auto p = problem(vec({1.0, 4.0}), vec({0.0, 0.3}), 2.0);
  const auto q = problem_from_json(problem_to_json(p));
  EXPECT_TRUE(q.s2 == p.s2);
  EXPECT_TRUE(q.theta_star_sq == p.theta_star_sq);
  EXPECT_EQ(q.budget, p.budget);
  const auto s = waterfill_solve(p);
  const auto t = solution_from_json(solution_to_json(s));
  EXPECT_TRUE(t.sigma2 == s.sigma2);
  EXPECT_EQ(t.active_set, s.active_set);
  EXPECT_THROW(problem_from_json(nlohmann::json{{"s2", {1.0}}}), IngestionError);
}

TEST(Degeneracy, AllBudgetOnCheapestComponent) {
  const auto r = log_identity_degeneracy_demo(problem(vec({4.0, 1.0}), vec({0.0, 0.0}), 2.0));
  EXPECT_EQ(r.chosen_index, 1);
  EXPECT_FALSE(r.tie);
  EXPECT_EQ(r.sigma2(0), 0.0);
  EXPECT_EQ(r.sigma2(1), 2.0);
}

TEST(Degeneracy, TieTakesLowestIndex) {
  const auto r = log_identity_degeneracy_demo(problem(vec({1.0, 1.0}), vec({0.0, 0.0}), 1.0));
  EXPECT_EQ(r.chosen_index, 0);
  EXPECT_TRUE(r.tie);
  const auto q = log_identity_degeneracy_demo(problem(vec({3.0, 0.5, 0.5, 2.0}), Vector::Zero(4), 1.0));
  EXPECT_EQ(q.chosen_index, 1);
  EXPECT_TRUE(q.tie);
}

TEST(ReadoutVariance, VarianceOfLinearReadout) {
  EXPECT_EQ(corollary_variance(Vector::Zero(2), vec({3.0, 7.0})), 0.0);
  EXPECT_EQ(corollary_variance(vec({1.0, 0.0}), vec({3.0, 7.0})), 3.0);
  EXPECT_EQ(corollary_variance(vec({2.0, 1.0}), vec({3.0, 7.0})), 19.0);
  const auto sol = waterfill_solve(problem(vec({1.0, 4.0}), vec({0.0, 0.0}), 2.0));
  EXPECT_NEAR(corollary_variance(vec({1.0, 2.0}), sol), 2.0, 1e-12);
}

TEST(ReadoutVariance, MonteCarloAgrees) {
  std::mt19937_64 rng(14);
  std::normal_distribution<double> n(0.0, 1.0);
  const auto p = problem(vec({0.3, 1.0, 2.5}), vec({0.2, 0.0, 1.0}), 1.5);
  const auto sol = waterfill_solve(p);
  const Vector x = vec({1.0, -2.0, 0.5});
  const int draws = 200000;
  double sum = 0.0, sum2 = 0.0;
  for (int d = 0; d < draws; ++d) {
    double v = 0.0;
    for (Eigen::Index k = 0; k < 3; ++k) v += x(k) * std::sqrt(sol.sigma2(k)) * n(rng);
    sum += v;
    sum2 += v * v;
  }
  const double mean = sum / draws;
  const double var = sum2 / draws - mean * mean;
  const double want = corollary_variance(x, sol);
  EXPECT_NEAR(var / want, 1.0, 0.02);
}

Ensemble linear_ensemble(const std::vector<std::vector<double>>& weights) {
  Ensemble ens;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    auto net = init_network({static_cast<int>(weights[i].size()), 1}, {}, i);
    for (std::size_t k = 0; k < weights[i].size(); ++k) net.weights[0](static_cast<Eigen::Index>(k), 0) = weights[i][k];
    ens.members.push_back(net);
    ens.member_seeds.push_back(i);
  }
  return ens;
}

TEST(WeightVariance, SampleStatisticsPerInput) {
  const auto ens = linear_ensemble({{1, 0}, {3, 0}, {2, 1}, {2, -1}, {2, 0}});
  Matrix x(2, 2);
  x << 1, 2, -1, 0;
  const auto rep = empirical_weight_variance_vs_theory(ens, x);
  EXPECT_NEAR(rep.weight_mean(0), 2.0, 1e-15);
  EXPECT_NEAR(rep.weight_mean(1), 0.0, 1e-15);
  EXPECT_NEAR(rep.weight_variance(0), 0.5, 1e-15);
  EXPECT_NEAR(rep.weight_variance(1), 0.5, 1e-15);
  EXPECT_NEAR(rep.s2(0), 1.0, 1e-15);
  EXPECT_NEAR(rep.s2(1), 2.0, 1e-15);
  ASSERT_TRUE(rep.predicted_sigma2.has_value());
  EXPECT_EQ(rep.predicted_sigma2->size(), 2);
}

TEST(WeightVariance, RanksFollowInverseSecondMoment) {
  const auto ens = linear_ensemble({{0.1, 1, 3}, {-0.1, -1, -3}, {0.2, 2, 4}, {-0.2, -2, -4}, {0, 0, 1}});
  Matrix x(2, 3);
  x << 4, 1, 0.5, 4, 1, 0.5;
  const auto rep = empirical_weight_variance_vs_theory(ens, x);
  EXPECT_NEAR(rep.spearman_inverse_s2, 1.0, 1e-12);
}

TEST(WeightVariance, ConstantZeroFeatureRanksHighest) {
  const auto ens = linear_ensemble({{0.1, 5}, {-0.1, -5}, {0.2, 4}, {-0.2, -4}, {0, 0}});
  Matrix x(3, 2);
  x << 1, 0, -1, 0, 2, 0;
  const auto rep = empirical_weight_variance_vs_theory(ens, x);
  EXPECT_EQ(rep.s2(1), 0.0);
  EXPECT_NEAR(rep.spearman_inverse_s2, 1.0, 1e-12);
  EXPECT_FALSE(rep.predicted_sigma2.has_value());
}

TEST(WeightVariance, RejectsNonLinearOrSmallEnsembles) {
  auto small = linear_ensemble({{1}, {2}, {3}});
  EXPECT_THROW(empirical_weight_variance_vs_theory(small, Matrix::Ones(2, 1)), ConfigError);
  Ensemble deep;
  for (int i = 0; i < 5; ++i) deep.members.push_back(init_network({1, 3, 1}, {}, i));
  EXPECT_THROW(empirical_weight_variance_vs_theory(deep, Matrix::Ones(2, 1)), ShapeError);
}

}  // namespace
}  // namespace dare
