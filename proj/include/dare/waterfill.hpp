#pragma once

#include <optional>
#include <vector>

#include "dare/ensemble.hpp"
#include "dare/network.hpp"

namespace dare {

/// maximize sum_k log(sigma_k^2 + theta*_k^2)
/// subject to sum_k s_k^2 sigma_k^2 = budget, sigma^2 >= 0.
/// `budget` is the product delta * tau.
struct WaterFillProblem {
  Vector s2;
  Vector theta_star_sq;
  double budget = 0.0;

  Eigen::Index size() const { return s2.size(); }
  void validate() const;
};

struct WaterFillSolution {
  Vector sigma2;
  /// Water level: sigma_k^2 = max(C * budget / s_k^2 - theta*_k^2, 0).
  double water_level = 0.0;
  std::vector<int> active_set;
};

double waterfill_objective(const WaterFillProblem& problem, const Vector& sigma2);

/// |sum_k s_k^2 sigma_k^2 - budget|.
double budget_residual(const WaterFillProblem& problem, const Vector& sigma2);

struct KktResiduals {
  /// max_k |sigma_k^2 (alpha s_k^2 - 1 / (theta*_k^2 + sigma_k^2))|
  double complementary_slackness = 0.0;
  /// max_k max(0, 1 / (theta*_k^2 + sigma_k^2) - alpha s_k^2)
  double dual_feasibility = 0.0;
  double budget = 0.0;
};

/// alpha = 1 / (C * budget) is the multiplier of the budget constraint.
KktResiduals kkt_residuals(const WaterFillProblem& problem, const WaterFillSolution& solution);

/// Closed-form solution; C is bracketed by bisection and then solved exactly
/// on the identified active set.
WaterFillSolution waterfill_solve(const WaterFillProblem& problem);

struct OracleOptions {
  int max_iterations = 100000;
  double initial_step = 1e-3;
  /// Stop when the projected step moves no coordinate by more than this.
  double tolerance = 1e-14;
};

struct OracleResult {
  Vector sigma2;
  int iterations = 0;
  double objective = 0.0;
  double last_step_norm = 0.0;
};

/// Projected gradient ascent over the scaled simplex {u >= 0, sum u = budget}
/// with u_k = s_k^2 sigma_k^2. Does not use the closed form. Throws
/// VerificationError with residuals if it fails to converge.
OracleResult waterfill_oracle(const WaterFillProblem& problem, const OracleOptions& options = {});

/// Euclidean projection onto {u >= 0, sum u = total}.
Vector project_to_simplex(const Vector& v, double total);

/// Readout variance sum_k x_k^2 sigma_k^2.
double corollary_variance(const Vector& x, const WaterFillSolution& solution);
double corollary_variance(const Vector& x, const Vector& sigma2);

struct DegeneracyResult {
  Vector sigma2;
  int chosen_index = -1;
  bool tie = false;
};

/// Maximizer of sum_k sigma_k^2 (identity instead of log) under the same
/// budget: everything on argmin s_k^2, lowest index on ties.
DegeneracyResult log_identity_degeneracy_demo(const WaterFillProblem& problem);

struct WeightVarianceReport {
  /// Across-member variance of each input weight.
  Vector weight_variance;
  Vector weight_mean;
  /// Diagonal of X^T X / n.
  Vector s2;
  /// Spearman rank correlation between weight_variance and 1 / s2.
  double spearman_inverse_s2 = 0.0;
  /// Water-filling prediction with theta*^2 = weight_mean^2 and the budget
  /// implied by the members, when every s2 is positive.
  std::optional<Vector> predicted_sigma2;
  std::optional<double> spearman_predicted;
};

/// Members must be linear models (no hidden layer, scalar output).
WeightVarianceReport empirical_weight_variance_vs_theory(const Ensemble& linear_ensemble, const Matrix& x);

nlohmann::json problem_to_json(const WaterFillProblem& p);
WaterFillProblem problem_from_json(const nlohmann::json& j);
nlohmann::json solution_to_json(const WaterFillSolution& s);
WaterFillSolution solution_from_json(const nlohmann::json& j);

}  // namespace dare
