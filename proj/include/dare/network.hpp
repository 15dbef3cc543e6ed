#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace dare {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class HiddenActivation { relu, leaky_relu, linear };
enum class OutputActivation { linear, softmax };

struct ActivationSpec {
  HiddenActivation hidden = HiddenActivation::relu;
  OutputActivation output = OutputActivation::linear;
  double leaky_slope = 0.01;
};

std::string to_string(HiddenActivation a);
std::string to_string(OutputActivation a);
HiddenActivation parse_hidden_activation(const std::string& name);
OutputActivation parse_output_activation(const std::string& name);

/// Fully-connected network. Batches are laid out one sample per row, so
/// layer l maps an (n x p_l) activation to (n x p_{l+1}) through
/// `weights[l]` (p_l x p_{l+1}) and `biases[l]` (p_{l+1}).
struct MlpNetwork {
  std::vector<int> layer_dims;
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
  ActivationSpec activations;

  /// Number of weight layers (L + 1 for L hidden layers).
  std::size_t depth() const { return weights.size(); }
  int input_dim() const { return layer_dims.front(); }
  int output_dim() const { return layer_dims.back(); }
  std::size_t weight_count() const;
  std::size_t bias_count() const;
  bool all_finite() const;
};

/// Parameter-shaped container; used for gradients and Adam moments.
struct Gradient {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;

  static Gradient zeros_like(const MlpNetwork& net);
  bool congruent_with(const MlpNetwork& net) const;
  bool all_finite() const;
  double max_abs() const;
  Gradient& operator+=(const Gradient& other);
};

/// Per-layer activations phi_0 ... phi_{L+1}; the last entry is the network
/// output after the output activation. `pre_activations[l]` holds the affine
/// input of layer l + 1.
struct ForwardTrace {
  std::vector<Matrix> activations;
  std::vector<Matrix> pre_activations;
};

struct ForwardResult {
  Matrix outputs;
  ForwardTrace trace;
};

/// Glorot-uniform weights, zero biases. Deterministic in `seed`.
MlpNetwork init_network(const std::vector<int>& layer_dims, const ActivationSpec& activations,
                        std::uint64_t seed);

ForwardResult forward(const MlpNetwork& net, const Matrix& x_batch);

/// Output-only forward pass (no trace).
Matrix predict(const MlpNetwork& net, const Matrix& x_batch);

/// Reverse-mode gradient of sum(outputs .* upstream_grad) with respect to
/// every weight and bias.
Gradient backward(const MlpNetwork& net, const Matrix& x_batch, const Matrix& upstream_grad,
                  const ForwardTrace& trace);

nlohmann::json network_to_json(const MlpNetwork& net);
MlpNetwork network_from_json(const nlohmann::json& j);

}  // namespace dare
