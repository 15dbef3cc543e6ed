#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "dare/errors.hpp"
#include "dare/losses.hpp"
#include "dare/network.hpp"

namespace dare {

enum class LambdaMode { controlled, always_off, always_on };
enum class ControlLossSource { current_batch, epoch_running_mean };

std::string to_string(LambdaMode mode);
LambdaMode parse_lambda_mode(const std::string& name);
std::string to_string(ControlLossSource source);
ControlLossSource parse_control_loss_source(const std::string& name);

struct TrainConfig {
  double tau = -std::numeric_limits<double>::infinity();
  LambdaMode lambda_mode = LambdaMode::controlled;
  LossKind loss_kind = LossKind::mse;
  double learning_rate = 0.001;
  int batch_size = 128;
  int max_epochs = 100;
  std::uint64_t seed = 0;
  ParamScope param_scope = ParamScope::weights_only;
  ControlLossSource control_loss_source = ControlLossSource::current_batch;
  /// When false the final network is returned and validation data is optional.
  bool checkpointing = true;

  /// Throws ConfigError on invalid hyperparameters.
  void validate() const;
};

struct AdamState {
  static constexpr double beta1 = 0.9;
  static constexpr double beta2 = 0.999;
  static constexpr double epsilon = 1e-8;

  Gradient first_moment;
  Gradient second_moment;
  std::int64_t step = 0;

  static AdamState for_network(const MlpNetwork& net);
};

/// Applies one Adam update that descends along `gradient`.
void adam_apply(MlpNetwork& net, const Gradient& gradient, AdamState& state, double learning_rate);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double mean_log_theta2 = 0.0;
  double mean_lambda = 0.0;
};

struct TrainTelemetry {
  /// anti_reg value of the freshly initialized network.
  double initial_log_theta2 = 0.0;
  std::vector<EpochRecord> epochs;

  void write_csv(std::ostream& os) const;
};

/// 1 iff loss <= tau. NaN loss raises DivergenceError.
int lambda_update(double loss, double tau);

/// tau = (1 + delta) * de_val_loss.
double select_tau(double de_val_loss, double delta);

/// Loss of the current parameters on one batch together with its gradient.
struct BatchEvaluation {
  double loss = 0.0;
  Gradient loss_gradient;
};

BatchEvaluation evaluate_batch(const MlpNetwork& net, const Matrix& x, const Matrix& y, LossKind kind);

/// Full-set loss L_S (no anti-regularization).
double dataset_loss(const MlpNetwork& net, const Matrix& x, const Matrix& y, LossKind kind);

/// Adam step on grad L - lambda * grad R. With lambda == 0 the anti-reg
/// term is never formed, so the update is exactly the vanilla one.
void apply_update(MlpNetwork& net, const Gradient& loss_gradient, int lambda, const TrainConfig& config,
                  AdamState& state);

/// evaluate_batch followed by apply_update; returns the batch loss.
double train_step(MlpNetwork& net, const Matrix& x, const Matrix& y, const TrainConfig& config,
                  AdamState& state, int lambda);

/// Snapshot handed to a step observer before the update is applied.
struct StepContext {
  int epoch = 0;
  int batch = 0;
  int lambda = 0;
  double control_loss = 0.0;
  const MlpNetwork* net_before = nullptr;
  const AdamState* state_before = nullptr;
  const Gradient* loss_gradient = nullptr;
  const MlpNetwork* net_after = nullptr;
};

using StepObserver = std::function<void(const StepContext&)>;

struct TrainData {
  Matrix x;
  Matrix y;
};

struct TrainResult {
  MlpNetwork best_net;
  MlpNetwork final_net;
  TrainTelemetry telemetry;
  /// Epoch of the returned checkpoint (-1 when checkpointing is disabled).
  int checkpoint_epoch = -1;
  double checkpoint_val_loss = std::numeric_limits<double>::quiet_NaN();
  /// Set when no epoch reached validation loss <= tau; best_net is then the
  /// lowest-validation-loss network.
  bool tau_never_reached = false;
};

/// Training diverged; carries the telemetry up to the failure.
class TrainingDivergence : public DivergenceError {
 public:
  TrainingDivergence(const std::string& what, TrainTelemetry telemetry)
      : DivergenceError(what), telemetry_(std::move(telemetry)) {}
  const TrainTelemetry& telemetry() const { return telemetry_; }

 private:
  TrainTelemetry telemetry_;
};

/// Non-finite tau values are written as the strings "-inf"/"inf".
nlohmann::json train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Mini-batch Adam training with the binary lambda control.
TrainResult train_network(MlpNetwork net, const TrainData& train, const TrainData& val,
                          const TrainConfig& config, const StepObserver& observer = {});

}  // namespace dare
