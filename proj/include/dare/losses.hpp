#pragma once

#include <string>

#include "dare/network.hpp"

namespace dare {

/// Training loss. `softmax_cross_entropy` is only used for the vanilla
/// DE(NLL) baseline; anti-regularized members never train with softmax.
enum class LossKind { mse, gaussian_nll, classification_mse, softmax_cross_entropy };

std::string to_string(LossKind kind);
LossKind parse_loss_kind(const std::string& name);

/// Network output width needed for a target of width `target_dim`.
int output_width(LossKind kind, int target_dim);
OutputActivation required_output_activation(LossKind kind);

/// Which parameters the anti-regularizer sees.
enum class ParamScope { weights_only, weights_and_biases };

std::string to_string(ParamScope scope);
ParamScope parse_param_scope(const std::string& name);

/// Floor inside log(theta^2 + eps) that removes the singularity at zero.
inline constexpr double kAntiRegEpsilon = 1e-8;
/// Additive floor on the softplus variance head.
inline constexpr double kVarianceFloor = 1e-6;

struct LossValue {
  double value = 0.0;
  /// d value / d predictions, same shape as the predictions.
  Matrix upstream;
};

struct GaussianNllValue {
  double value = 0.0;
  Matrix grad_mean;
  Matrix grad_rawvar;
};

struct RegTerm {
  double value = 0.0;
  Gradient gradient;
};

double softplus(double x);
double sigmoid(double x);
/// Variance head mapping: softplus(raw) + 1e-6.
double variance_from_raw(double raw);

LossValue mse_loss(const Matrix& pred, const Matrix& target);

/// Batch mean of 0.5 log(var) + (y - mu)^2 / (2 var) + 0.5 log(2 pi).
GaussianNllValue gaussian_nll_loss(const Matrix& pred_mean, const Matrix& pred_rawvar,
                                   const Matrix& target);

/// Mean squared error between raw logits and targets C * e_c.
LossValue classification_mse_loss(const Matrix& logits, const Matrix& one_hot_scaled_target);

/// Mean negative log-probability of the one-hot target under softmax outputs.
LossValue softmax_cross_entropy_loss(const Matrix& probs, const Matrix& one_hot_target);

/// Dispatches on `kind`. For gaussian_nll the first half of the output
/// columns are means and the second half raw variances.
LossValue compute_loss(LossKind kind, const Matrix& outputs, const Matrix& target);

/// (1/d) sum_k log(theta_k^2 + eps) over the parameters in scope.
RegTerm anti_reg(const MlpNetwork& net, ParamScope scope = ParamScope::weights_only);

/// Value only; avoids allocating the gradient.
double anti_reg_value(const MlpNetwork& net, ParamScope scope = ParamScope::weights_only);

/// min(h^2, (1 - h)^2) for a binary scalar output.
double single_net_classif_uncertainty(double output);

/// Rows C * e_{label} for C = num_classes, or plain one-hot when `scaled` is false.
Matrix one_hot(const std::vector<int>& labels, int num_classes, bool scaled);

}  // namespace dare
