#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dare/datagen.hpp"
#include "dare/ensemble.hpp"
#include "dare/metrics.hpp"
#include "dare/train.hpp"
#include "dare/waterfill.hpp"

namespace dare {

inline constexpr const char* kCodeVersion = "dare-lab 0.3.0";

/// Process exit codes of the experiment runner.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitDivergence = 3,
  kExitVerification = 4,
};

enum class ExperimentKind { two_moons, regression_1d, tabular_ood, waterfill_verify, delta_sweep };

std::string to_string(ExperimentKind kind);
ExperimentKind parse_experiment_kind(const std::string& name);

/// A trained method: "dare" (controlled anti-regularization),
/// "de_mse" / "de_nll" (vanilla deep ensembles with the named loss).
enum class Method { dare, de_mse, de_nll };

std::string to_string(Method m);
Method parse_method(const std::string& name);

enum class TabularTask { regression, classification };

struct TwoMoonsParams {
  int n_train = 200;
  int n_val = 50;
  int n_test = 200;
  double noise = 0.1;
};

struct Regression1dParams {
  int n_train = 200;
  int n_val = 50;
  int n_test = 200;
  Regression1dConfig generator;
  /// Evaluation range extends this far beyond the support on each side.
  double eval_margin = 3.0;
  int grid_points = 201;
};

struct TabularParams {
  std::string csv_path;
  std::vector<std::string> target_cols;
  TabularTask task = TabularTask::regression;
  std::string shift_feature;
  double quantile = 0.7;
  double train_fraction = 0.6;
  double val_fraction = 0.2;
};

struct EvaluationParams {
  double percentile = 95.0;
  /// Two-moons far-field points are grid points at least this far from training data.
  double far_distance = 3.0;
  double grid_margin = 5.0;
  int grid_resolution = 60;
  int ece_levels = 9;
  int ece_bins = 10;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::two_moons;
  std::string name = "experiment";
  std::vector<std::uint64_t> seeds = {0};
  int members = 5;
  int workers = 1;
  std::vector<Method> methods = {Method::dare, Method::de_mse};
  NetworkSpec network;
  TrainConfig train;
  /// When set, tau = (1 + delta) * (DE validation loss) for DARE.
  std::optional<double> tau_delta;
  TwoMoonsParams two_moons;
  Regression1dParams regression;
  TabularParams tabular;
  /// delta_sweep evaluates on this dataset kind (regression_1d or tabular_ood).
  ExperimentKind sweep_dataset = ExperimentKind::regression_1d;
  std::vector<double> deltas = {0.0, 0.25, 0.5};
  EvaluationParams evaluation;
  int waterfill_problems = 100;
  int waterfill_p_max = 6;
  std::filesystem::path output_dir = "runs/experiment";

  /// Throws ConfigError; checks referenced files exist.
  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

/// Named presets: two_moons_paper, regression1d_paper, tabular_ood_default,
/// waterfill_verify_default, delta_sweep_default.
ExperimentConfig preset(const std::string& name);
std::vector<std::string> preset_names();

/// Loads a JSON config, optionally layered (merge-patch) over a preset.
ExperimentConfig load_experiment_config(const std::optional<std::filesystem::path>& path,
                                        const std::optional<std::string>& preset_name);

/// In-memory data for one seed of an experiment.
struct PreparedData {
  enum class Task { binary, multiclass, regression };
  Task task = Task::regression;
  int num_classes = 0;
  TrainData train;
  TrainData val;
  std::vector<int> train_labels;
  std::vector<int> val_labels;
  Matrix test_x;
  Matrix test_y;
  std::vector<int> test_labels;
  Matrix ood_x;
  Matrix ood_y;
  std::vector<int> ood_labels;
  /// Plotting grid (inputs in model space) and its display coordinates.
  Matrix grid_x;
  Matrix grid_display;
  std::string split_rule;
};

PreparedData prepare_data(const ExperimentConfig& config, ExperimentKind dataset_kind, std::uint64_t seed);

/// Loss used by `method` on this task.
LossKind method_loss(Method method, PreparedData::Task task);

/// Targets in the layout expected by `loss`.
Matrix training_targets(LossKind loss, const Matrix& y, const std::vector<int>& labels, int num_classes);

/// Uncertainty score for each row (higher = more uncertain).
Vector uncertainty_scores(const Ensemble& ens, PreparedData::Task task, const Matrix& x);

struct MethodRun {
  Method method = Method::dare;
  std::uint64_t seed = 0;
  double tau = 0.0;
  EnsembleTraining training;
  EvalReport report;
};

/// Trains one method on prepared data. tau is taken from `tau` (DARE) or
/// -inf (vanilla). Member seeds start at seed * 1000.
MethodRun train_method(const ExperimentConfig& config, const PreparedData& data, Method method,
                       std::uint64_t seed, double tau);

/// Mean over members of the checkpoint validation loss.
double mean_validation_loss(const EnsembleTraining& training);

EvalReport evaluate_method(const ExperimentConfig& config, const PreparedData& data, const MethodRun& run);

struct RunArtifact {
  std::filesystem::path directory;
  std::vector<EvalReport> reports;
  nlohmann::json manifest;
  std::vector<std::string> errors;
  int exit_code = kExitOk;
};

RunArtifact run_experiment(const ExperimentConfig& config);

struct DeltaSweepRow {
  double delta = 0.0;
  double id_nll_mean = 0.0;
  double id_nll_std = 0.0;
  double ood_nll_mean = 0.0;
  double ood_nll_std = 0.0;
  std::vector<double> id_nll;
  std::vector<double> ood_nll;
};

RunArtifact run_delta_sweep(const ExperimentConfig& config, const std::vector<double>& deltas,
                            std::vector<DeltaSweepRow>* rows = nullptr);

struct WaterfillCase {
  WaterFillProblem problem;
  WaterFillSolution closed_form;
  Vector oracle_sigma2;
  double max_abs_diff = 0.0;
  KktResiduals kkt;
  double objective_gap = 0.0;
};

struct WaterfillVerifyReport {
  std::vector<WaterfillCase> cases;
  double worst_diff = 0.0;
  double worst_budget_residual = 0.0;
  double worst_slackness = 0.0;
  double worst_objective_gap = 0.0;
  bool passed = false;
  std::size_t worst_index = 0;

  nlohmann::json to_json(bool include_cases) const;
};

inline constexpr double kWaterfillSigmaTolerance = 1e-6;
inline constexpr double kWaterfillBudgetTolerance = 1e-10;
inline constexpr double kWaterfillSlacknessTolerance = 1e-8;

/// Random problems (p <= p_max) plus the fixed clipping case
/// s2 = (1, 0.01), theta*^2 = (4, 0), budget = 1.
WaterfillVerifyReport run_waterfill_verify(int n_problems, int p_max, std::uint64_t seed);

/// Random valid problem with p in [1, p_max].
WaterFillProblem random_waterfill_problem(std::mt19937_64& rng, int p_max);

/// Trains DARE on the configured dataset and writes the per-layer analysis of member 0.
RunArtifact run_analyze_layers(const ExperimentConfig& config, const std::optional<Matrix>& probe_points);

}  // namespace dare
