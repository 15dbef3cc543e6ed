#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dare/ensemble.hpp"
#include "dare/network.hpp"

namespace dare {

/// Mean Gaussian NLL of the targets, including 0.5 log(2 pi).
double nll_regression(const PredictiveDistribution& pred, const Matrix& targets);

/// Central-interval confidence levels i / (n_levels + 1), i = 1 ... n_levels.
std::vector<double> ece_levels(int n_levels);

/// Fraction of targets inside the central p-interval of N(mu, var), per level.
std::vector<double> interval_coverage(const PredictiveDistribution& pred, const Matrix& targets,
                                      const std::vector<double>& levels);

/// mean_p |coverage(p) - p| over the central-interval levels.
double ece_regression(const PredictiveDistribution& pred, const Matrix& targets, int n_levels = 9);

/// Confidence-binned ECE with `n_bins` equal-width bins on the max probability.
double ece_classification(const Matrix& probs, const std::vector<int>& labels, int n_bins = 10);

double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels);

/// P(random OOD score > random ID score), ties count one half.
double auroc(const std::vector<double>& scores_ood, const std::vector<double>& scores_id);

/// Empirical quantile that linearly interpolates the empirical CDF: with
/// h = q * n over the sorted sample x_1 <= ... <= x_n,
/// Q = x_floor(h) + (h - floor(h)) (x_floor(h)+1 - x_floor(h)), clamped to [x_1, x_n].
double empirical_quantile(std::vector<double> values, double q);

struct DetectionResult {
  double threshold = 0.0;
  /// true = flagged out-of-distribution.
  std::vector<bool> flags;
  double flagged_fraction() const;
};

/// Flag test scores strictly above the `percentile` (0, 100] of val_scores.
DetectionResult percentile_threshold_detect(const std::vector<double>& val_scores,
                                            const std::vector<double>& test_scores, double percentile);

/// Average ranks (1-based), ties share their mean rank.
std::vector<double> average_ranks(const std::vector<double>& values);
double spearman(const std::vector<double>& a, const std::vector<double>& b);
double pearson(const std::vector<double>& a, const std::vector<double>& b);

std::vector<double> to_std_vector(const Vector& v);

struct SplitMetrics {
  std::size_t n = 0;
  std::optional<double> nll;
  std::optional<double> ece;
  std::optional<double> auroc;
  std::optional<double> accuracy;
  std::optional<double> flagged_fraction;
};

struct EvalReport {
  std::string method;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::map<std::string, SplitMetrics> splits;
  std::map<std::string, double> extras;

  /// Throws VerificationError if a metric is out of its valid range.
  void validate() const;
  nlohmann::json to_json() const;
};

}  // namespace dare
