#include "dare/losses.hpp"

#include <cmath>
#include <numbers>

#include "dare/errors.hpp"

namespace dare {

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::mse:
      return "mse";
    case LossKind::gaussian_nll:
      return "gaussian_nll";
    case LossKind::classification_mse:
      return "classification_mse";
    case LossKind::softmax_cross_entropy:
      return "softmax_cross_entropy";
  }
  return "unknown";
}

LossKind parse_loss_kind(const std::string& name) {
  if (name == "mse") return LossKind::mse;
  if (name == "gaussian_nll" || name == "nll") return LossKind::gaussian_nll;
  if (name == "classification_mse") return LossKind::classification_mse;
  if (name == "softmax_cross_entropy" || name == "softmax_nll") return LossKind::softmax_cross_entropy;
  throw ConfigError("unknown loss kind '" + name + "'");
}

int output_width(LossKind kind, int target_dim) {
  return kind == LossKind::gaussian_nll ? 2 * target_dim : target_dim;
}

OutputActivation required_output_activation(LossKind kind) {
  return kind == LossKind::softmax_cross_entropy ? OutputActivation::softmax : OutputActivation::linear;
}

std::string to_string(ParamScope scope) {
  return scope == ParamScope::weights_only ? "weights_only" : "weights_and_biases";
}

ParamScope parse_param_scope(const std::string& name) {
  if (name == "weights_only") return ParamScope::weights_only;
  if (name == "weights_and_biases") return ParamScope::weights_and_biases;
  throw ConfigError("unknown parameter scope '" + name + "'");
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double variance_from_raw(double raw) { return softplus(raw) + kVarianceFloor; }

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(what) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
  if (a.size() == 0) throw ShapeError(std::string(what) + ": empty batch");
}

LossValue squared_error(const Matrix& pred, const Matrix& target) {
  const double count = static_cast<double>(pred.size());
  const Matrix diff = pred - target;
  LossValue out;
  out.value = diff.squaredNorm() / count;
  out.upstream = (2.0 / count) * diff;
  return out;
}

}  // namespace

LossValue mse_loss(const Matrix& pred, const Matrix& target) {
  check_same_shape(pred, target, "mse_loss");
  return squared_error(pred, target);
}

GaussianNllValue gaussian_nll_loss(const Matrix& pred_mean, const Matrix& pred_rawvar,
                                   const Matrix& target) {
  check_same_shape(pred_mean, target, "gaussian_nll_loss");
  check_same_shape(pred_rawvar, target, "gaussian_nll_loss");
  if (!pred_mean.allFinite() || !pred_rawvar.allFinite() || !target.allFinite())
    throw DivergenceError("gaussian_nll_loss: non-finite input");

  const double count = static_cast<double>(target.size());
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  GaussianNllValue out;
  out.grad_mean.resize(target.rows(), target.cols());
  out.grad_rawvar.resize(target.rows(), target.cols());
  double total = 0.0;
  for (Eigen::Index j = 0; j < target.cols(); ++j) {
    for (Eigen::Index i = 0; i < target.rows(); ++i) {
      const double raw = pred_rawvar(i, j);
      const double var = variance_from_raw(raw);
      const double r = pred_mean(i, j) - target(i, j);
      total += 0.5 * std::log(var) + r * r / (2.0 * var) + half_log_2pi;
      out.grad_mean(i, j) = r / var / count;
      const double dvar = 0.5 / var - r * r / (2.0 * var * var);
      out.grad_rawvar(i, j) = dvar * sigmoid(raw) / count;
    }
  }
  out.value = total / count;
  return out;
}

LossValue classification_mse_loss(const Matrix& logits, const Matrix& one_hot_scaled_target) {
  check_same_shape(logits, one_hot_scaled_target, "classification_mse_loss");
  return squared_error(logits, one_hot_scaled_target);
}

LossValue softmax_cross_entropy_loss(const Matrix& probs, const Matrix& one_hot_target) {
  check_same_shape(probs, one_hot_target, "softmax_cross_entropy_loss");
  const double n = static_cast<double>(probs.rows());
  constexpr double kFloor = 1e-300;
  LossValue out;
  out.upstream = Matrix::Zero(probs.rows(), probs.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    for (Eigen::Index j = 0; j < probs.cols(); ++j) {
      const double t = one_hot_target(i, j);
      if (t == 0.0) continue;
      const double p = std::max(probs(i, j), kFloor);
      total -= t * std::log(p);
      out.upstream(i, j) = -t / (p * n);
    }
  }
  out.value = total / n;
  return out;
}

LossValue compute_loss(LossKind kind, const Matrix& outputs, const Matrix& target) {
  switch (kind) {
    case LossKind::mse:
      return mse_loss(outputs, target);
    case LossKind::classification_mse:
      return classification_mse_loss(outputs, target);
    case LossKind::softmax_cross_entropy:
      return softmax_cross_entropy_loss(outputs, target);
    case LossKind::gaussian_nll: {
      const Eigen::Index q = target.cols();
      if (outputs.cols() != 2 * q || outputs.rows() != target.rows())
        throw ShapeError("gaussian_nll needs 2 output columns per target column");
      auto nll = gaussian_nll_loss(outputs.leftCols(q), outputs.rightCols(q), target);
      LossValue out;
      out.value = nll.value;
      out.upstream.resize(outputs.rows(), outputs.cols());
      out.upstream.leftCols(q) = nll.grad_mean;
      out.upstream.rightCols(q) = nll.grad_rawvar;
      return out;
    }
  }
  throw ConfigError("unhandled loss kind");
}

namespace {

std::size_t scoped_count(const MlpNetwork& net, ParamScope scope) {
  return net.weight_count() + (scope == ParamScope::weights_and_biases ? net.bias_count() : 0);
}

}  // namespace

RegTerm anti_reg(const MlpNetwork& net, ParamScope scope) {
  const std::size_t d = scoped_count(net, scope);
  if (d == 0) throw ConfigError("anti_reg: no parameters in scope");
  const double inv_d = 1.0 / static_cast<double>(d);
  RegTerm term;
  term.gradient = Gradient::zeros_like(net);
  double total = 0.0;
  auto accumulate = [&](const auto& param, auto& grad) {
    for (Eigen::Index k = 0; k < param.size(); ++k) {
      const double t = param.data()[k];
      const double denom = t * t + kAntiRegEpsilon;
      total += std::log(denom);
      grad.data()[k] = 2.0 * t * inv_d / denom;
    }
  };
  for (std::size_t l = 0; l < net.depth(); ++l) {
    accumulate(net.weights[l], term.gradient.weights[l]);
    if (scope == ParamScope::weights_and_biases) accumulate(net.biases[l], term.gradient.biases[l]);
  }
  term.value = total * inv_d;
  return term;
}

double anti_reg_value(const MlpNetwork& net, ParamScope scope) {
  const std::size_t d = scoped_count(net, scope);
  if (d == 0) throw ConfigError("anti_reg: no parameters in scope");
  double total = 0.0;
  auto accumulate = [&](const auto& param) {
    for (Eigen::Index k = 0; k < param.size(); ++k) {
      const double t = param.data()[k];
      total += std::log(t * t + kAntiRegEpsilon);
    }
  };
  for (std::size_t l = 0; l < net.depth(); ++l) {
    accumulate(net.weights[l]);
    if (scope == ParamScope::weights_and_biases) accumulate(net.biases[l]);
  }
  return total / static_cast<double>(d);
}

double single_net_classif_uncertainty(double output) {
  const double a = output * output;
  const double b = (1.0 - output) * (1.0 - output);
  return std::min(a, b);
}

Matrix one_hot(const std::vector<int>& labels, int num_classes, bool scaled) {
  if (num_classes < 1) throw ConfigError("one_hot: num_classes must be positive");
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), num_classes);
  const double v = scaled ? static_cast<double>(num_classes) : 1.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) throw ConfigError("one_hot: label out of range");
    out(static_cast<Eigen::Index>(i), labels[i]) = v;
  }
  return out;
}

}  // namespace dare
