#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dare/network.hpp"
#include "dare/train.hpp"

namespace dare {

/// Member architecture: hidden widths plus activations. Input and output
/// widths come from the data and the loss kind.
struct NetworkSpec {
  std::vector<int> hidden = {100, 100, 100};
  HiddenActivation hidden_activation = HiddenActivation::relu;
  double leaky_slope = 0.01;

  std::vector<int> layer_dims(int input_dim, int output_dim) const;
};

struct Ensemble {
  std::vector<MlpNetwork> members;
  LossKind loss_kind = LossKind::mse;
  TrainConfig member_config;
  std::vector<std::uint64_t> member_seeds;

  std::size_t size() const { return members.size(); }
  /// Throws ConfigError/ShapeError if the invariants do not hold.
  void validate() const;
};

struct MemberFailure {
  std::uint64_t seed = 0;
  std::string reason;
};

struct EnsembleTraining {
  Ensemble ensemble;
  std::vector<TrainResult> member_results;
  std::vector<MemberFailure> failures;
};

/// Trains M members with seeds config.seed + 0 ... config.seed + M - 1,
/// optionally on several threads. Results do not depend on `workers`.
/// Diverged members are listed in `failures` and left out of the ensemble;
/// if every member fails a DivergenceError is thrown.
EnsembleTraining train_ensemble(const TrainData& train, const TrainData& val, const TrainConfig& config,
                                const NetworkSpec& spec, int members, int workers = 1);

struct PredictiveDistribution {
  Matrix mean;
  Matrix variance;
};

/// Uniform Gaussian-mixture moments. gaussian_nll members contribute their
/// predicted variance; mse members contribute zero aleatoric variance.
PredictiveDistribution predict_regression(const Ensemble& ens, const Matrix& x_batch);

/// Per-member raw outputs (member-major).
std::vector<Matrix> member_outputs(const Ensemble& ens, const Matrix& x_batch);

/// Fit-to-scaled-one-hot term plus inter-member spread, for classification_mse members.
Vector ood_score_classification(const Ensemble& ens, const Matrix& x_batch);

/// Entropy of the mean softmax distribution.
Vector entropy_score_softmax(const Ensemble& ens, const Matrix& x_batch);

/// Mean of min(h^2, (1-h)^2) over members plus the (population) variance of h.
Vector binary_uncertainty_score(const Ensemble& ens, const Matrix& x_batch);

/// Mean class probabilities / scores used for accuracy: argmax of the mean member output.
std::vector<int> predict_classes(const Ensemble& ens, const Matrix& x_batch);

struct LayerStats {
  int layer = 0;
  /// Component indices sorted by descending training variance.
  std::vector<int> order;
  Vector variance;
  /// Mean |outgoing weight| per component, aligned to `order`.
  Vector mean_abs_weight;
  /// Probe activations (rows = probe points), columns aligned to `order`.
  Matrix probe_activations;
};

struct LayerAnalysis {
  std::vector<LayerStats> layers;

  void write_layer_csv(std::size_t layer_index, std::ostream& os) const;
};

/// Activation variance vs outgoing-weight magnitude for layers 0 ... L.
LayerAnalysis internal_analysis(const MlpNetwork& member, const Matrix& train_x,
                                const std::optional<Matrix>& probe_points = std::nullopt);

nlohmann::json ensemble_to_json(const Ensemble& ens);
Ensemble ensemble_from_json(const nlohmann::json& j);

}  // namespace dare
