#include "dare/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>

#include "dare/errors.hpp"

namespace dare {

std::string to_string(LambdaMode mode) {
  switch (mode) {
    case LambdaMode::controlled:
      return "controlled";
    case LambdaMode::always_off:
      return "always_off";
    case LambdaMode::always_on:
      return "always_on";
  }
  return "unknown";
}

LambdaMode parse_lambda_mode(const std::string& name) {
  if (name == "controlled") return LambdaMode::controlled;
  if (name == "always_off") return LambdaMode::always_off;
  if (name == "always_on") return LambdaMode::always_on;
  throw ConfigError("unknown lambda mode '" + name + "'");
}

std::string to_string(ControlLossSource source) {
  return source == ControlLossSource::current_batch ? "current_batch" : "epoch_running_mean";
}

ControlLossSource parse_control_loss_source(const std::string& name) {
  if (name == "current_batch") return ControlLossSource::current_batch;
  if (name == "epoch_running_mean") return ControlLossSource::epoch_running_mean;
  throw ConfigError("unknown control loss source '" + name + "'");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("learning_rate must be positive and finite");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (std::isnan(tau)) throw ConfigError("tau must not be NaN");
  if (loss_kind == LossKind::softmax_cross_entropy && lambda_mode != LambdaMode::always_off)
    throw ConfigError("softmax_cross_entropy is only supported for vanilla (always_off) members");
}

AdamState AdamState::for_network(const MlpNetwork& net) {
  AdamState s;
  s.first_moment = Gradient::zeros_like(net);
  s.second_moment = Gradient::zeros_like(net);
  return s;
}

void adam_apply(MlpNetwork& net, const Gradient& gradient, AdamState& state, double learning_rate) {
  if (!gradient.congruent_with(net) || !state.first_moment.congruent_with(net) ||
      !state.second_moment.congruent_with(net))
    throw ShapeError("adam_apply: gradient or moments not congruent with network");
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(AdamState::beta1, t);
  const double c2 = 1.0 - std::pow(AdamState::beta2, t);
  auto update = [&](auto& param, const auto& g, auto& m, auto& v) {
    m.array() = AdamState::beta1 * m.array() + (1.0 - AdamState::beta1) * g.array();
    v.array() = AdamState::beta2 * v.array() + (1.0 - AdamState::beta2) * g.array().square();
    param.array() -= learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + AdamState::epsilon);
  };
  for (std::size_t l = 0; l < net.depth(); ++l) {
    update(net.weights[l], gradient.weights[l], state.first_moment.weights[l],
           state.second_moment.weights[l]);
    update(net.biases[l], gradient.biases[l], state.first_moment.biases[l], state.second_moment.biases[l]);
  }
}

void TrainTelemetry::write_csv(std::ostream& os) const {
  os << "epoch,train_loss,val_loss,mean_log_theta2,mean_lambda\n";
  os.precision(17);
  for (const auto& e : epochs)
    os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.mean_log_theta2 << ','
       << e.mean_lambda << '\n';
}

int lambda_update(double loss, double tau) {
  if (std::isnan(loss)) throw DivergenceError("loss is NaN");
  return loss <= tau ? 1 : 0;
}

double select_tau(double de_val_loss, double delta) {
  if (delta < 0.0) throw ConfigError("delta must be non-negative");
  return (1.0 + delta) * de_val_loss;
}

BatchEvaluation evaluate_batch(const MlpNetwork& net, const Matrix& x, const Matrix& y, LossKind kind) {
  auto fwd = forward(net, x);
  auto loss = compute_loss(kind, fwd.outputs, y);
  BatchEvaluation out;
  out.loss = loss.value;
  out.loss_gradient = backward(net, x, loss.upstream, fwd.trace);
  return out;
}

double dataset_loss(const MlpNetwork& net, const Matrix& x, const Matrix& y, LossKind kind) {
  return compute_loss(kind, predict(net, x), y).value;
}

void apply_update(MlpNetwork& net, const Gradient& loss_gradient, int lambda, const TrainConfig& config,
                  AdamState& state) {
  if (lambda != 0 && lambda != 1) throw ConfigError("lambda must be 0 or 1");
  if (!loss_gradient.all_finite()) throw DivergenceError("non-finite loss gradient");
  if (lambda == 0) {
    adam_apply(net, loss_gradient, state, config.learning_rate);
    return;
  }
  // Minimizing L - R: add -grad R.
  Gradient combined = loss_gradient;
  const RegTerm reg = anti_reg(net, config.param_scope);
  for (std::size_t l = 0; l < net.depth(); ++l) {
    combined.weights[l] -= reg.gradient.weights[l];
    combined.biases[l] -= reg.gradient.biases[l];
  }
  if (!combined.all_finite()) throw DivergenceError("non-finite anti-regularized gradient");
  adam_apply(net, combined, state, config.learning_rate);
}

double train_step(MlpNetwork& net, const Matrix& x, const Matrix& y, const TrainConfig& config,
                  AdamState& state, int lambda) {
  auto eval = evaluate_batch(net, x, y, config.loss_kind);
  if (!std::isfinite(eval.loss)) throw DivergenceError("non-finite batch loss");
  apply_update(net, eval.loss_gradient, lambda, config, state);
  return eval.loss;
}

namespace {

void gather_rows(const Matrix& src, const std::vector<Eigen::Index>& idx, std::size_t begin,
                 std::size_t end, Matrix& dst) {
  dst.resize(static_cast<Eigen::Index>(end - begin), src.cols());
  for (std::size_t i = begin; i < end; ++i) dst.row(static_cast<Eigen::Index>(i - begin)) = src.row(idx[i]);
}

void check_data(const MlpNetwork& net, const TrainData& data, LossKind kind, const char* name) {
  if (data.x.rows() != data.y.rows())
    throw ShapeError(std::string(name) + ": feature and target row counts differ");
  if (data.x.cols() != net.input_dim())
    throw ShapeError(std::string(name) + ": feature width does not match network input");
  if (output_width(kind, static_cast<int>(data.y.cols())) != net.output_dim())
    throw ShapeError(std::string(name) + ": target width does not match network output for " +
                     to_string(kind));
}

}  // namespace

TrainResult train_network(MlpNetwork net, const TrainData& train, const TrainData& val,
                          const TrainConfig& config, const StepObserver& observer) {
  config.validate();
  if (train.x.rows() == 0) throw ConfigError("training set is empty");
  check_data(net, train, config.loss_kind, "train");
  const bool have_val = val.x.rows() > 0;
  if (config.checkpointing && !have_val)
    throw ConfigError("validation set required when checkpointing is enabled");
  if (have_val) check_data(net, val, config.loss_kind, "validation");
  if (net.activations.output != required_output_activation(config.loss_kind))
    throw ConfigError("network output activation incompatible with " + to_string(config.loss_kind));

  TrainResult result;
  result.telemetry.initial_log_theta2 = anti_reg_value(net, config.param_scope);

  const auto n = static_cast<std::size_t>(train.x.rows());
  const auto batch = static_cast<std::size_t>(config.batch_size);
  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::mt19937_64 shuffle_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);

  AdamState state = AdamState::for_network(net);
  Matrix xb, yb;
  double best_val = std::numeric_limits<double>::infinity();
  bool have_best = false;
  bool have_checkpoint = false;

  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    double lambda_sum = 0.0;
    int batches = 0;
    for (std::size_t begin = 0; begin < n; begin += batch) {
      const std::size_t end = std::min(n, begin + batch);
      gather_rows(train.x, order, begin, end, xb);
      gather_rows(train.y, order, begin, end, yb);

      auto eval = evaluate_batch(net, xb, yb, config.loss_kind);
      if (!std::isfinite(eval.loss)) {
        throw TrainingDivergence("non-finite training loss at epoch " + std::to_string(epoch),
                                 std::move(result.telemetry));
      }
      loss_sum += eval.loss;
      ++batches;

      const double control_loss =
          config.control_loss_source == ControlLossSource::current_batch ? eval.loss : loss_sum / batches;
      int lambda = 0;
      switch (config.lambda_mode) {
        case LambdaMode::controlled:
          lambda = lambda_update(control_loss, config.tau);
          break;
        case LambdaMode::always_off:
          lambda = 0;
          break;
        case LambdaMode::always_on:
          lambda = 1;
          break;
      }
      lambda_sum += lambda;

      std::optional<MlpNetwork> before;
      std::optional<AdamState> state_before;
      if (observer) {
        before = net;
        state_before = state;
      }
      try {
        apply_update(net, eval.loss_gradient, lambda, config, state);
      } catch (const DivergenceError& e) {
        throw TrainingDivergence(e.what(), std::move(result.telemetry));
      }
      if (!net.all_finite())
        throw TrainingDivergence("non-finite parameters at epoch " + std::to_string(epoch),
                                 std::move(result.telemetry));
      if (observer) {
        StepContext ctx;
        ctx.epoch = epoch;
        ctx.batch = batches - 1;
        ctx.lambda = lambda;
        ctx.control_loss = control_loss;
        ctx.net_before = &*before;
        ctx.state_before = &*state_before;
        ctx.loss_gradient = &eval.loss_gradient;
        ctx.net_after = &net;
        observer(ctx);
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / batches;
    rec.mean_lambda = lambda_sum / batches;
    rec.mean_log_theta2 = anti_reg_value(net, config.param_scope);
    if (have_val) {
      rec.val_loss = dataset_loss(net, val.x, val.y, config.loss_kind);
      if (!std::isfinite(rec.val_loss)) {
        result.telemetry.epochs.push_back(rec);
        throw TrainingDivergence("non-finite validation loss at epoch " + std::to_string(epoch),
                                 std::move(result.telemetry));
      }
    }
    result.telemetry.epochs.push_back(rec);

    if (config.checkpointing) {
      if (rec.val_loss <= config.tau) {
        result.best_net = net;
        result.checkpoint_epoch = epoch;
        result.checkpoint_val_loss = rec.val_loss;
        have_checkpoint = true;
      } else if (!have_checkpoint && rec.val_loss < best_val) {
        best_val = rec.val_loss;
        result.best_net = net;
        result.checkpoint_epoch = epoch;
        result.checkpoint_val_loss = rec.val_loss;
        have_best = true;
      }
    }
  }

  result.final_net = net;
  if (!config.checkpointing) {
    result.best_net = net;
  } else if (!have_checkpoint) {
    result.tau_never_reached = true;
    if (!have_best) {
      result.best_net = net;
      result.checkpoint_epoch = config.max_epochs - 1;
      result.checkpoint_val_loss = result.telemetry.epochs.back().val_loss;
    }
  }
  return result;
}

}  // namespace dare

namespace dare {

nlohmann::json train_config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  if (std::isfinite(c.tau))
    j["tau"] = c.tau;
  else
    j["tau"] = c.tau > 0 ? "inf" : "-inf";
  j["lambda_mode"] = to_string(c.lambda_mode);
  j["loss_kind"] = to_string(c.loss_kind);
  j["learning_rate"] = c.learning_rate;
  j["batch_size"] = c.batch_size;
  j["max_epochs"] = c.max_epochs;
  j["seed"] = c.seed;
  j["param_scope"] = to_string(c.param_scope);
  j["control_loss_source"] = to_string(c.control_loss_source);
  j["checkpointing"] = c.checkpointing;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    if (j.contains("tau")) {
      const auto& t = j.at("tau");
      if (t.is_string()) {
        const auto s = t.get<std::string>();
        if (s == "-inf")
          c.tau = -std::numeric_limits<double>::infinity();
        else if (s == "inf")
          c.tau = std::numeric_limits<double>::infinity();
        else
          throw ConfigError("tau must be a number, \"inf\" or \"-inf\"");
      } else {
        c.tau = t.get<double>();
      }
    }
    if (j.contains("lambda_mode")) c.lambda_mode = parse_lambda_mode(j.at("lambda_mode").get<std::string>());
    if (j.contains("loss_kind")) c.loss_kind = parse_loss_kind(j.at("loss_kind").get<std::string>());
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.seed = j.value("seed", c.seed);
    if (j.contains("param_scope")) c.param_scope = parse_param_scope(j.at("param_scope").get<std::string>());
    if (j.contains("control_loss_source"))
      c.control_loss_source = parse_control_loss_source(j.at("control_loss_source").get<std::string>());
    c.checkpointing = j.value("checkpointing", c.checkpointing);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid training config: ") + e.what());
  }
  return c;
}

}  // namespace dare
