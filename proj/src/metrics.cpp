#include "dare/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "dare/errors.hpp"

namespace dare {

namespace {

void check_pred(const PredictiveDistribution& pred, const Matrix& targets) {
  if (pred.mean.rows() != targets.rows() || pred.mean.cols() != targets.cols() ||
      pred.variance.rows() != targets.rows() || pred.variance.cols() != targets.cols())
    throw ShapeError("predictive distribution and targets differ in shape");
  if (targets.size() == 0) throw ConfigError("no targets to evaluate");
}

}  // namespace

double nll_regression(const PredictiveDistribution& pred, const Matrix& targets) {
  check_pred(pred, targets);
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  double total = 0.0;
  for (Eigen::Index j = 0; j < targets.cols(); ++j)
    for (Eigen::Index i = 0; i < targets.rows(); ++i) {
      const double var = pred.variance(i, j);
      if (!(var > 0.0)) throw ConfigError("nll_regression: predicted variance must be positive");
      const double r = targets(i, j) - pred.mean(i, j);
      total += 0.5 * std::log(var) + r * r / (2.0 * var) + half_log_2pi;
    }
  return total / static_cast<double>(targets.size());
}

std::vector<double> ece_levels(int n_levels) {
  if (n_levels < 2) throw ConfigError("ece_regression needs at least 2 levels");
  std::vector<double> levels(static_cast<std::size_t>(n_levels));
  for (int i = 0; i < n_levels; ++i) levels[static_cast<std::size_t>(i)] = (i + 1.0) / (n_levels + 1.0);
  return levels;
}

std::vector<double> interval_coverage(const PredictiveDistribution& pred, const Matrix& targets,
                                      const std::vector<double>& levels) {
  check_pred(pred, targets);
  // y lies in the central p-interval iff erf(|y - mu| / (sigma sqrt 2)) <= p.
  std::vector<double> mass;
  mass.reserve(static_cast<std::size_t>(targets.size()));
  for (Eigen::Index j = 0; j < targets.cols(); ++j)
    for (Eigen::Index i = 0; i < targets.rows(); ++i) {
      const double r = std::abs(targets(i, j) - pred.mean(i, j));
      const double sigma = std::sqrt(std::max(pred.variance(i, j), 0.0));
      double m = 0.0;
      if (r > 0.0) m = sigma > 0.0 ? std::erf(r / (sigma * std::numbers::sqrt2)) : 1.0;
      mass.push_back(m);
    }
  std::sort(mass.begin(), mass.end());
  std::vector<double> coverage;
  coverage.reserve(levels.size());
  for (double p : levels) {
    const auto inside = std::upper_bound(mass.begin(), mass.end(), p) - mass.begin();
    coverage.push_back(static_cast<double>(inside) / static_cast<double>(mass.size()));
  }
  return coverage;
}

double ece_regression(const PredictiveDistribution& pred, const Matrix& targets, int n_levels) {
  const auto levels = ece_levels(n_levels);
  const auto coverage = interval_coverage(pred, targets, levels);
  double total = 0.0;
  for (std::size_t i = 0; i < levels.size(); ++i) total += std::abs(coverage[i] - levels[i]);
  return total / static_cast<double>(levels.size());
}

double ece_classification(const Matrix& probs, const std::vector<int>& labels, int n_bins) {
  if (probs.rows() == 0) throw ConfigError("ece_classification: empty input");
  if (static_cast<std::size_t>(probs.rows()) != labels.size()) throw ShapeError("probs and labels differ in length");
  if (n_bins < 1) throw ConfigError("ece_classification needs at least one bin");
  std::vector<double> conf_sum(static_cast<std::size_t>(n_bins), 0.0);
  std::vector<double> correct(static_cast<std::size_t>(n_bins), 0.0);
  std::vector<double> count(static_cast<std::size_t>(n_bins), 0.0);
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    Eigen::Index c = 0;
    const double conf = probs.row(i).maxCoeff(&c);
    const int bin = std::min(n_bins - 1, static_cast<int>(std::floor(conf * n_bins)));
    const auto b = static_cast<std::size_t>(std::max(bin, 0));
    conf_sum[b] += conf;
    correct[b] += (c == labels[static_cast<std::size_t>(i)]) ? 1.0 : 0.0;
    count[b] += 1.0;
  }
  const double n = static_cast<double>(probs.rows());
  double ece = 0.0;
  for (std::size_t b = 0; b < count.size(); ++b)
    if (count[b] > 0.0) ece += (count[b] / n) * std::abs(correct[b] / count[b] - conf_sum[b] / count[b]);
  return ece;
}

double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels) {
  if (predicted.size() != labels.size()) throw ShapeError("accuracy: length mismatch");
  if (labels.empty()) throw ConfigError("accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::vector<double> average_ranks(const std::vector<double>& values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && values[idx[j + 1]] == values[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double auroc(const std::vector<double>& scores_ood, const std::vector<double>& scores_id) {
  if (scores_ood.empty() || scores_id.empty()) throw ConfigError("auroc: both score sets must be non-empty");
  const double n_ood = static_cast<double>(scores_ood.size());
  const double n_id = static_cast<double>(scores_id.size());
  if (scores_ood.size() + scores_id.size() <= 10000) {
    double wins = 0.0;
    for (double o : scores_ood)
      for (double i : scores_id) wins += o > i ? 1.0 : (o == i ? 0.5 : 0.0);
    return wins / (n_ood * n_id);
  }
  std::vector<double> all(scores_ood);
  all.insert(all.end(), scores_id.begin(), scores_id.end());
  const auto ranks = average_ranks(all);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < scores_ood.size(); ++i) rank_sum += ranks[i];
  return (rank_sum - n_ood * (n_ood + 1.0) / 2.0) / (n_ood * n_id);
}

double empirical_quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ConfigError("quantile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("quantile level must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  const double h = q * n;
  if (h <= 1.0) return values.front();
  if (h >= n) return values.back();
  const auto j = static_cast<std::size_t>(std::floor(h));
  const double frac = h - static_cast<double>(j);
  // 1-based x_j is values[j - 1].
  return values[j - 1] + frac * (values[j] - values[j - 1]);
}

double DetectionResult::flagged_fraction() const {
  if (flags.empty()) return 0.0;
  return static_cast<double>(std::count(flags.begin(), flags.end(), true)) / static_cast<double>(flags.size());
}

DetectionResult percentile_threshold_detect(const std::vector<double>& val_scores,
                                            const std::vector<double>& test_scores, double percentile) {
  if (val_scores.empty()) throw ConfigError("percentile_threshold_detect: empty validation scores");
  if (!(percentile > 0.0 && percentile <= 100.0)) throw ConfigError("percentile must lie in (0, 100]");
  DetectionResult r;
  r.threshold = empirical_quantile(val_scores, percentile / 100.0);
  r.flags.reserve(test_scores.size());
  for (double s : test_scores) r.flags.push_back(s > r.threshold);
  return r;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw ConfigError("correlation needs two equal-length samples");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  return pearson(average_ranks(a), average_ranks(b));
}

std::vector<double> to_std_vector(const Vector& v) { return {v.data(), v.data() + v.size()}; }

void EvalReport::validate() const {
  for (const auto& [name, s] : splits) {
    if (s.n == 0) throw VerificationError("split '" + name + "' has no points");
    if (s.auroc && (*s.auroc < 0.0 || *s.auroc > 1.0)) throw VerificationError("auroc out of [0, 1]");
    if (s.ece && *s.ece < 0.0) throw VerificationError("negative ece");
  }
}

namespace {

nlohmann::json optional_number(const std::optional<double>& v) {
  if (!v || !std::isfinite(*v)) return nullptr;
  return *v;
}

}  // namespace

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["method"] = method;
  j["seed"] = seed;
  j["config_hash"] = config_hash;
  nlohmann::json sp = nlohmann::json::object();
  for (const auto& [name, s] : splits) {
    sp[name] = {{"n", s.n},
                {"nll", optional_number(s.nll)},
                {"ece", optional_number(s.ece)},
                {"auroc", optional_number(s.auroc)},
                {"accuracy", optional_number(s.accuracy)},
                {"flagged_fraction", optional_number(s.flagged_fraction)}};
  }
  j["splits"] = std::move(sp);
  nlohmann::json ex = nlohmann::json::object();
  for (const auto& [k, v] : extras) ex[k] = optional_number(v);
  j["extras"] = std::move(ex);
  return j;
}

}  // namespace dare
