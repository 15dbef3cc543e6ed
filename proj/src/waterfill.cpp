#include "dare/waterfill.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "dare/errors.hpp"
#include "dare/metrics.hpp"

namespace dare {

void WaterFillProblem::validate() const {
  if (s2.size() == 0) throw ConfigError("water-filling problem is empty");
  if (theta_star_sq.size() != s2.size()) throw ShapeError("s2 and theta_star_sq lengths differ");
  if (!(budget > 0.0) || !std::isfinite(budget)) throw ConfigError("budget must be positive and finite");
  for (Eigen::Index k = 0; k < s2.size(); ++k) {
    if (!(s2(k) > 0.0) || !std::isfinite(s2(k))) throw ConfigError("s2 entries must be positive and finite");
    if (!(theta_star_sq(k) >= 0.0) || !std::isfinite(theta_star_sq(k)))
      throw ConfigError("theta_star_sq entries must be non-negative and finite");
  }
}

double waterfill_objective(const WaterFillProblem& problem, const Vector& sigma2) {
  double f = 0.0;
  for (Eigen::Index k = 0; k < sigma2.size(); ++k) f += std::log(sigma2(k) + problem.theta_star_sq(k));
  return f;
}

double budget_residual(const WaterFillProblem& problem, const Vector& sigma2) {
  return std::abs(problem.s2.dot(sigma2) - problem.budget);
}

KktResiduals kkt_residuals(const WaterFillProblem& problem, const WaterFillSolution& solution) {
  KktResiduals r;
  const double alpha = 1.0 / (solution.water_level * problem.budget);
  for (Eigen::Index k = 0; k < problem.size(); ++k) {
    const double total = problem.theta_star_sq(k) + solution.sigma2(k);
    const double inv = total > 0.0 ? 1.0 / total : std::numeric_limits<double>::infinity();
    const double gap = alpha * problem.s2(k) - inv;
    if (solution.sigma2(k) > 0.0)
      r.complementary_slackness = std::max(r.complementary_slackness, std::abs(solution.sigma2(k) * gap));
    r.dual_feasibility = std::max(r.dual_feasibility, std::max(0.0, -gap));
  }
  r.budget = budget_residual(problem, solution.sigma2);
  return r;
}

WaterFillSolution waterfill_solve(const WaterFillProblem& problem) {
  problem.validate();
  const Eigen::Index p = problem.size();
  const double budget = problem.budget;
  // In units of s_k^2 sigma_k^2 the allocation is max(C * budget - a_k, 0).
  const Vector a = problem.s2.cwiseProduct(problem.theta_star_sq);
  auto filled = [&](double level) {
    double total = 0.0;
    for (Eigen::Index k = 0; k < p; ++k) total += std::max(level * budget - a(k), 0.0);
    return total;
  };

  double lo = 0.0;
  double hi = (budget + a.maxCoeff()) / budget;
  for (int it = 0; it < 200 && hi - lo > 1e-15 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (filled(mid) < budget)
      lo = mid;
    else
      hi = mid;
  }

  // On a fixed active set the budget equation is linear in C.
  double level = hi;
  for (int pass = 0; pass < 4; ++pass) {
    double sum_a = 0.0;
    int active = 0;
    for (Eigen::Index k = 0; k < p; ++k) {
      if (level * budget > a(k)) {
        sum_a += a(k);
        ++active;
      }
    }
    if (active == 0) break;
    const double exact = (budget + sum_a) / (static_cast<double>(active) * budget);
    if (exact == level) break;
    level = exact;
  }

  WaterFillSolution sol;
  sol.water_level = level;
  sol.sigma2.resize(p);
  for (Eigen::Index k = 0; k < p; ++k) {
    sol.sigma2(k) = std::max(level * budget / problem.s2(k) - problem.theta_star_sq(k), 0.0);
    if (sol.sigma2(k) > 0.0) sol.active_set.push_back(static_cast<int>(k));
  }
  return sol;
}

Vector project_to_simplex(const Vector& v, double total) {
  const Eigen::Index n = v.size();
  std::vector<double> sorted(v.data(), v.data() + n);
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  double cumulative = 0.0;
  double shift = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    cumulative += sorted[static_cast<std::size_t>(i)];
    const double candidate = (cumulative - total) / static_cast<double>(i + 1);
    if (sorted[static_cast<std::size_t>(i)] - candidate > 0.0) shift = candidate;
  }
  return (v.array() - shift).cwiseMax(0.0).matrix();
}

namespace {

double shifted_log_sum(const Vector& u, const Vector& c) {
  double f = 0.0;
  for (Eigen::Index k = 0; k < u.size(); ++k) {
    const double t = u(k) + c(k);
    if (t <= 0.0) return -std::numeric_limits<double>::infinity();
    f += std::log(t);
  }
  return f;
}

Vector shifted_log_grad(const Vector& u, const Vector& c) {
  return (u + c).cwiseInverse();
}

}  // namespace

OracleResult waterfill_oracle(const WaterFillProblem& problem, const OracleOptions& options) {
  problem.validate();
  const Eigen::Index p = problem.size();
  const double budget = problem.budget;
  // Work in u_k = s_k^2 sigma_k^2 so the feasible set is a plain simplex;
  // log(sigma_k^2 + theta_k^2) = log(u_k + c_k) - log(s_k^2).
  const Vector c = problem.s2.cwiseProduct(problem.theta_star_sq);
  Vector u = Vector::Constant(p, budget / static_cast<double>(p));
  double f = shifted_log_sum(u, c);
  Vector g = shifted_log_grad(u, c);
  double step = options.initial_step;
  const double tol = options.tolerance * std::max(1.0, budget);

  OracleResult result;
  double move = std::numeric_limits<double>::infinity();
  int it = 0;
  for (; it < options.max_iterations; ++it) {
    Vector candidate;
    double f_new = 0.0;
    double t = step;
    bool accepted = false;
    for (int bt = 0; bt < 80; ++bt) {
      candidate = project_to_simplex(u + t * g, budget);
      f_new = shifted_log_sum(candidate, c);
      // The gain is summed as log1p terms since f_new - f cancels near the
      // optimum. The rounding drift of sum(d) away from zero, weighted by the
      // mean gradient on the support, is removed from both sides of the test.
      const Vector d = candidate - u;
      double g_support = 0.0;
      int support = 0;
      for (Eigen::Index k = 0; k < p; ++k)
        if (candidate(k) > 0.0) {
          g_support += g(k);
          ++support;
        }
      const double drift = support > 0 ? d.sum() * g_support / support : 0.0;
      double gain = 0.0;
      for (Eigen::Index k = 0; k < p; ++k) gain += std::log1p(d(k) / (u(k) + c(k)));
      if (std::isfinite(f_new) && std::isfinite(gain) && gain - drift >= 1e-4 * (g.dot(d) - drift)) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) break;
    const Vector s = candidate - u;
    move = s.cwiseAbs().maxCoeff();
    const Vector g_new = shifted_log_grad(candidate, c);
    const Vector y = g_new - g;
    u = std::move(candidate);
    f = f_new;
    g = g_new;
    if (move <= tol) {
      ++it;
      break;
    }
    // Barzilai-Borwein step for the concave objective (s . y < 0).
    const double sy = s.dot(y);
    step = sy < 0.0 ? std::clamp(s.squaredNorm() / -sy, 1e-12, 1e12) : options.initial_step;
  }

  // Stationarity check independent of the step length actually taken.
  const Vector probe = project_to_simplex(u + g, budget);
  const double stationarity = (probe - u).cwiseAbs().maxCoeff();
  result.iterations = it;
  result.last_step_norm = move;
  result.sigma2 = u.cwiseQuotient(problem.s2);
  result.objective = waterfill_objective(problem, result.sigma2);
  if (stationarity > 1e-9 * std::max(1.0, budget)) {
    std::ostringstream msg;
    msg << "water-filling oracle did not converge after " << it << " iterations: stationarity residual "
        << stationarity << ", last step " << move << ", budget residual "
        << budget_residual(problem, result.sigma2);
    throw VerificationError(msg.str());
  }
  return result;
}

double corollary_variance(const Vector& x, const Vector& sigma2) {
  if (x.size() != sigma2.size()) throw ShapeError("corollary_variance: input length mismatch");
  return x.cwiseProduct(x).dot(sigma2);
}

double corollary_variance(const Vector& x, const WaterFillSolution& solution) {
  return corollary_variance(x, solution.sigma2);
}

DegeneracyResult log_identity_degeneracy_demo(const WaterFillProblem& problem) {
  problem.validate();
  DegeneracyResult r;
  Eigen::Index best = 0;
  for (Eigen::Index k = 1; k < problem.size(); ++k)
    if (problem.s2(k) < problem.s2(best)) best = k;
  for (Eigen::Index k = 0; k < problem.size(); ++k)
    if (k != best && problem.s2(k) == problem.s2(best)) r.tie = true;
  r.chosen_index = static_cast<int>(best);
  r.sigma2 = Vector::Zero(problem.size());
  r.sigma2(best) = problem.budget / problem.s2(best);
  return r;
}

WeightVarianceReport empirical_weight_variance_vs_theory(const Ensemble& linear_ensemble, const Matrix& x) {
  const auto& members = linear_ensemble.members;
  if (members.size() < 5)
    throw ConfigError("empirical weight variance needs at least 5 members, got " +
                      std::to_string(members.size()));
  for (const auto& m : members)
    if (m.depth() != 1 || m.output_dim() != 1) throw ShapeError("members must be linear scalar-output models");
  const Eigen::Index p = members.front().input_dim();
  if (x.cols() != p) throw ShapeError("feature matrix width does not match members");
  if (x.rows() == 0) throw ConfigError("feature matrix is empty");

  const double m = static_cast<double>(members.size());
  WeightVarianceReport rep;
  rep.weight_mean = Vector::Zero(p);
  for (const auto& net : members) rep.weight_mean += net.weights[0].col(0);
  rep.weight_mean /= m;
  rep.weight_variance = Vector::Zero(p);
  for (const auto& net : members)
    rep.weight_variance += (net.weights[0].col(0) - rep.weight_mean).cwiseAbs2();
  rep.weight_variance /= (m - 1.0);
  rep.s2 = x.cwiseAbs2().colwise().mean().transpose();

  std::vector<double> inv_s2(static_cast<std::size_t>(p));
  for (Eigen::Index k = 0; k < p; ++k)
    inv_s2[static_cast<std::size_t>(k)] =
        rep.s2(k) > 0.0 ? 1.0 / rep.s2(k) : std::numeric_limits<double>::infinity();
  rep.spearman_inverse_s2 = spearman(to_std_vector(rep.weight_variance), inv_s2);

  if ((rep.s2.array() > 0.0).all()) {
    WaterFillProblem prob;
    prob.s2 = rep.s2;
    prob.theta_star_sq = rep.weight_mean.cwiseAbs2();
    prob.budget = rep.s2.dot(rep.weight_variance);
    if (prob.budget > 0.0) {
      const auto sol = waterfill_solve(prob);
      rep.predicted_sigma2 = sol.sigma2;
      rep.spearman_predicted = spearman(to_std_vector(rep.weight_variance), to_std_vector(sol.sigma2));
    }
  }
  return rep;
}

nlohmann::json problem_to_json(const WaterFillProblem& p) {
  return {{"s2", to_std_vector(p.s2)}, {"theta_star_sq", to_std_vector(p.theta_star_sq)}, {"budget", p.budget}};
}

WaterFillProblem problem_from_json(const nlohmann::json& j) {
  try {
    WaterFillProblem p;
    const auto s2 = j.at("s2").get<std::vector<double>>();
    const auto th = j.at("theta_star_sq").get<std::vector<double>>();
    p.s2 = Eigen::Map<const Vector>(s2.data(), static_cast<Eigen::Index>(s2.size()));
    p.theta_star_sq = Eigen::Map<const Vector>(th.data(), static_cast<Eigen::Index>(th.size()));
    p.budget = j.at("budget").get<double>();
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(std::string("malformed water-filling problem: ") + e.what());
  }
}

nlohmann::json solution_to_json(const WaterFillSolution& s) {
  return {{"sigma2", to_std_vector(s.sigma2)}, {"water_level", s.water_level}, {"active_set", s.active_set}};
}

WaterFillSolution solution_from_json(const nlohmann::json& j) {
  try {
    WaterFillSolution s;
    const auto v = j.at("sigma2").get<std::vector<double>>();
    s.sigma2 = Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
    s.water_level = j.at("water_level").get<double>();
    s.active_set = j.at("active_set").get<std::vector<int>>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(std::string("malformed water-filling solution: ") + e.what());
  }
}

}  // namespace dare
