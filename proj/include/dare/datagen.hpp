#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dare/network.hpp"
#include "dare/train.hpp"

namespace dare {

/// z-score statistics fit on one set and applied unchanged to others.
struct Standardizer {
  Vector means;
  Vector stds;

  static Standardizer fit(const Matrix& x);
  static Standardizer identity(Eigen::Index width);
  Matrix transform(const Matrix& x) const;
  Matrix inverse_transform(const Matrix& x) const;
};

struct Dataset {
  std::string name;
  Matrix x;
  /// Regression targets, or one column of class indices for classification.
  Matrix y;
  /// Class labels when the dataset is a classification one.
  std::vector<int> labels;
  std::vector<std::string> feature_names;
  std::vector<std::string> target_names;
  /// Statistics applied to `x` (identity when not standardized).
  Standardizer standardization;

  Eigen::Index size() const { return x.rows(); }
  void validate() const;
  Dataset subset(const std::vector<Eigen::Index>& rows) const;
  TrainData regression_data() const { return {x, y}; }
};

struct OodSplit {
  Dataset in_distribution;
  Dataset out_of_distribution;
  std::string split_rule;
  double threshold = 0.0;
};

/// Outer arc (cos t, sin t) labelled 0 and inner arc (1 - cos t, 0.5 - sin t)
/// labelled 1, with t evenly spaced on [0, pi] per arc, plus isotropic
/// Gaussian noise of standard deviation `noise`.
Dataset two_moons(int n, double noise, std::uint64_t seed);

/// Stand-in 1-D regression problem with an empty gap inside the support:
/// x ~ Uniform([support_lo, gap_lo] U [gap_hi, support_hi]),
/// y = x sin(x) + noise_a * e1 + noise_b * x * e2 with e1, e2 ~ N(0, 1).
struct Regression1dConfig {
  double support_lo = 0.0;
  double gap_lo = 2.0;
  double gap_hi = 3.0;
  double support_hi = 5.0;
  double noise_a = 0.3;
  double noise_b = 0.3;
  /// Version tag of the generative form, recorded in run manifests.
  std::string version = "xsinx-gap-v1";

  void validate() const;
  /// Distance from x to the sampled support (0 inside it).
  double distance_to_support(double x) const;
  bool in_support(double x) const { return distance_to_support(x) == 0.0; }
};

double regression_1d_mean(double x);

/// Draws all x values first, then (e1, e2) pairs point by point, from one
/// std::mt19937_64 seeded with `seed`.
Dataset regression_1d(int n, std::uint64_t seed, const Regression1dConfig& config = {});

/// Draws targets at the given inputs using the same generative form.
Matrix regression_1d_targets(const Matrix& x, std::uint64_t seed, const Regression1dConfig& config = {});

/// RFC-4180 style CSV with a header row.
Dataset load_csv(const std::string& path, const std::vector<std::string>& target_cols, bool standardize);
void write_csv(const std::string& path, const Dataset& dataset);

/// Parses CSV text into header + rows of raw fields.
std::pair<std::vector<std::string>, std::vector<std::vector<std::string>>> parse_csv(const std::string& text);

/// Converts a single integer-valued target column into class labels.
Dataset as_classification(Dataset dataset);

/// Rows whose `feature` value is <= the empirical `quantile` go in-distribution.
/// Standardization is refit on the in-distribution part and applied to both.
OodSplit feature_shift_split(const Dataset& dataset, int feature, double quantile);

struct TrainValTest {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Shuffled split; fractions of train and val, the remainder is test.
TrainValTest split_dataset(const Dataset& dataset, double train_fraction, double val_fraction,
                           std::uint64_t seed);

/// Row-major lattice (axis 0 slowest) over 1-D or 2-D bounds.
Matrix eval_grid(const std::vector<std::pair<double, double>>& bounds, const std::vector<int>& resolution);

/// Points on a circle, used for far-field probes.
Matrix ring_points(double cx, double cy, double radius, int count);

/// Euclidean distance from each query row to its nearest reference row.
Vector nearest_distance(const Matrix& queries, const Matrix& reference);

nlohmann::json dataset_manifest(const Dataset& d, const std::string& source, const std::string& split_rule,
                                std::uint64_t seed);

}  // namespace dare
