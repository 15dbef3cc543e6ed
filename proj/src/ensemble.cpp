#include "dare/ensemble.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <numeric>
#include <ostream>
#include <set>
#include <thread>

#include "dare/errors.hpp"
#include "dare/losses.hpp"

namespace dare {

std::vector<int> NetworkSpec::layer_dims(int input_dim, int output_dim) const {
  std::vector<int> dims;
  dims.reserve(hidden.size() + 2);
  dims.push_back(input_dim);
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(output_dim);
  return dims;
}

void Ensemble::validate() const {
  if (members.empty()) throw ConfigError("ensemble has no members");
  if (member_seeds.size() != members.size()) throw ConfigError("ensemble seed list does not match member count");
  std::set<std::uint64_t> unique(member_seeds.begin(), member_seeds.end());
  if (unique.size() != member_seeds.size()) throw ConfigError("ensemble member seeds must be distinct");
  for (const auto& m : members)
    if (m.layer_dims != members.front().layer_dims) throw ShapeError("ensemble members differ in shape");
}

EnsembleTraining train_ensemble(const TrainData& train, const TrainData& val, const TrainConfig& config,
                                const NetworkSpec& spec, int members, int workers) {
  if (members < 1) throw ConfigError("ensemble needs at least one member");
  config.validate();
  const int out_dim = output_width(config.loss_kind, static_cast<int>(train.y.cols()));
  const auto dims = spec.layer_dims(static_cast<int>(train.x.cols()), out_dim);
  ActivationSpec act;
  act.hidden = spec.hidden_activation;
  act.leaky_slope = spec.leaky_slope;
  act.output = required_output_activation(config.loss_kind);

  const auto count = static_cast<std::size_t>(members);
  std::vector<std::optional<TrainResult>> results(count);
  std::vector<std::string> errors(count);
  std::atomic<std::size_t> next{0};

  auto worker = [&]() {
    for (std::size_t m = next.fetch_add(1); m < count; m = next.fetch_add(1)) {
      TrainConfig member_cfg = config;
      member_cfg.seed = config.seed + m;
      try {
        MlpNetwork net = init_network(dims, act, member_cfg.seed);
        results[m] = train_network(std::move(net), train, val, member_cfg);
      } catch (const DivergenceError& e) {
        errors[m] = e.what();
      }
    }
  };

  const int threads = std::clamp(workers, 1, members);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  }

  EnsembleTraining out;
  out.ensemble.loss_kind = config.loss_kind;
  out.ensemble.member_config = config;
  for (std::size_t m = 0; m < count; ++m) {
    const std::uint64_t seed = config.seed + m;
    if (results[m]) {
      out.ensemble.members.push_back(results[m]->best_net);
      out.ensemble.member_seeds.push_back(seed);
      out.member_results.push_back(std::move(*results[m]));
    } else {
      out.failures.push_back({seed, errors[m]});
    }
  }
  if (out.ensemble.members.empty()) throw DivergenceError("every ensemble member diverged");
  return out;
}

std::vector<Matrix> member_outputs(const Ensemble& ens, const Matrix& x_batch) {
  std::vector<Matrix> outs;
  outs.reserve(ens.size());
  for (const auto& m : ens.members) outs.push_back(predict(m, x_batch));
  return outs;
}

PredictiveDistribution predict_regression(const Ensemble& ens, const Matrix& x_batch) {
  if (ens.members.empty()) throw ConfigError("empty ensemble");
  if (ens.loss_kind != LossKind::gaussian_nll && ens.loss_kind != LossKind::mse)
    throw ConfigError("predict_regression needs gaussian_nll or mse members, got " + to_string(ens.loss_kind));
  const auto outs = member_outputs(ens, x_batch);
  const Eigen::Index q =
      ens.loss_kind == LossKind::gaussian_nll ? outs.front().cols() / 2 : outs.front().cols();
  const double inv_m = 1.0 / static_cast<double>(outs.size());
  Matrix mean = Matrix::Zero(x_batch.rows(), q);
  Matrix second = Matrix::Zero(x_batch.rows(), q);
  for (const auto& o : outs) {
    const Matrix mu = o.leftCols(q);
    mean += mu;
    second += mu.cwiseProduct(mu);
    if (ens.loss_kind == LossKind::gaussian_nll)
      second += o.rightCols(q).unaryExpr([](double r) { return variance_from_raw(r); });
  }
  mean *= inv_m;
  second *= inv_m;
  PredictiveDistribution pd;
  pd.variance = (second - mean.cwiseProduct(mean)).cwiseMax(0.0);
  pd.mean = std::move(mean);
  return pd;
}

Vector ood_score_classification(const Ensemble& ens, const Matrix& x_batch) {
  if (ens.members.empty()) throw ConfigError("empty ensemble");
  if (ens.loss_kind != LossKind::classification_mse)
    throw ConfigError("ood_score_classification needs classification_mse members");
  const auto outs = member_outputs(ens, x_batch);
  const Eigen::Index n = x_batch.rows();
  const Eigen::Index classes = outs.front().cols();
  const double inv_m = 1.0 / static_cast<double>(outs.size());
  Matrix mean = Matrix::Zero(n, classes);
  for (const auto& o : outs) mean += o;
  mean *= inv_m;
  Vector score = Vector::Zero(n);
  for (const auto& o : outs) {
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index c = 0;
      o.row(i).maxCoeff(&c);
      double fit = 0.0;
      for (Eigen::Index k = 0; k < classes; ++k) {
        const double target = k == c ? static_cast<double>(classes) : 0.0;
        fit += (o(i, k) - target) * (o(i, k) - target);
      }
      score(i) += inv_m * (fit + (o.row(i) - mean.row(i)).squaredNorm());
    }
  }
  return score;
}

Vector entropy_score_softmax(const Ensemble& ens, const Matrix& x_batch) {
  if (ens.members.empty()) throw ConfigError("empty ensemble");
  if (ens.loss_kind != LossKind::softmax_cross_entropy)
    throw ConfigError("entropy_score_softmax needs softmax members");
  const auto outs = member_outputs(ens, x_batch);
  Matrix mean = Matrix::Zero(x_batch.rows(), outs.front().cols());
  for (const auto& o : outs) mean += o;
  mean /= static_cast<double>(outs.size());
  Vector h = Vector::Zero(x_batch.rows());
  for (Eigen::Index i = 0; i < mean.rows(); ++i)
    for (Eigen::Index k = 0; k < mean.cols(); ++k) {
      const double p = mean(i, k);
      if (p > 0.0) h(i) -= p * std::log(p);
    }
  return h;
}

Vector binary_uncertainty_score(const Ensemble& ens, const Matrix& x_batch) {
  if (ens.members.empty()) throw ConfigError("empty ensemble");
  const auto outs = member_outputs(ens, x_batch);
  if (outs.front().cols() != 1) throw ShapeError("binary_uncertainty_score needs scalar-output members");
  const double inv_m = 1.0 / static_cast<double>(outs.size());
  const Eigen::Index n = x_batch.rows();
  Vector member_term = Vector::Zero(n);
  Vector mean = Vector::Zero(n);
  Vector second = Vector::Zero(n);
  for (const auto& o : outs) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double h = o(i, 0);
      member_term(i) += single_net_classif_uncertainty(h);
      mean(i) += h;
      second(i) += h * h;
    }
  }
  member_term *= inv_m;
  mean *= inv_m;
  second *= inv_m;
  return member_term + (second - mean.cwiseProduct(mean)).cwiseMax(0.0);
}

std::vector<int> predict_classes(const Ensemble& ens, const Matrix& x_batch) {
  if (ens.members.empty()) throw ConfigError("empty ensemble");
  const auto outs = member_outputs(ens, x_batch);
  Matrix mean = Matrix::Zero(outs.front().rows(), outs.front().cols());
  for (const auto& o : outs) mean += o;
  mean /= static_cast<double>(outs.size());
  std::vector<int> labels(static_cast<std::size_t>(mean.rows()));
  for (Eigen::Index i = 0; i < mean.rows(); ++i) {
    if (mean.cols() == 1) {
      labels[static_cast<std::size_t>(i)] = mean(i, 0) >= 0.5 ? 1 : 0;
    } else {
      Eigen::Index c = 0;
      mean.row(i).maxCoeff(&c);
      labels[static_cast<std::size_t>(i)] = static_cast<int>(c);
    }
  }
  return labels;
}

LayerAnalysis internal_analysis(const MlpNetwork& member, const Matrix& train_x,
                                const std::optional<Matrix>& probe_points) {
  if (train_x.rows() == 0) throw ConfigError("internal_analysis needs training points");
  const auto fwd = forward(member, train_x);
  std::optional<ForwardTrace> probe_trace;
  if (probe_points && probe_points->rows() > 0) probe_trace = forward(member, *probe_points).trace;

  LayerAnalysis analysis;
  // Layers 0 ... L: every representation that is multiplied by a weight matrix.
  for (std::size_t l = 0; l < member.depth(); ++l) {
    const Matrix& act = fwd.trace.activations[l];
    const Eigen::Index width = act.cols();
    const Vector mean = act.colwise().mean().transpose();
    Vector var(width);
    for (Eigen::Index k = 0; k < width; ++k)
      var(k) = (act.col(k).array() - mean(k)).square().mean();

    LayerStats stats;
    stats.layer = static_cast<int>(l);
    stats.order.resize(static_cast<std::size_t>(width));
    std::iota(stats.order.begin(), stats.order.end(), 0);
    std::stable_sort(stats.order.begin(), stats.order.end(), [&](int a, int b) { return var(a) > var(b); });
    stats.variance.resize(width);
    stats.mean_abs_weight.resize(width);
    const Matrix& w = member.weights[l];
    for (Eigen::Index r = 0; r < width; ++r) {
      const int k = stats.order[static_cast<std::size_t>(r)];
      stats.variance(r) = var(k);
      stats.mean_abs_weight(r) = w.row(k).cwiseAbs().mean();
    }
    if (probe_trace) {
      const Matrix& pa = probe_trace->activations[l];
      stats.probe_activations.resize(pa.rows(), width);
      for (Eigen::Index r = 0; r < width; ++r) stats.probe_activations.col(r) = pa.col(stats.order[static_cast<std::size_t>(r)]);
    }
    analysis.layers.push_back(std::move(stats));
  }
  return analysis;
}

void LayerAnalysis::write_layer_csv(std::size_t layer_index, std::ostream& os) const {
  const auto& s = layers.at(layer_index);
  os << "rank,component,train_variance,mean_abs_weight";
  for (Eigen::Index p = 0; p < s.probe_activations.rows(); ++p) os << ",probe_" << p;
  os << '\n';
  os.precision(17);
  for (Eigen::Index r = 0; r < s.variance.size(); ++r) {
    os << r << ',' << s.order[static_cast<std::size_t>(r)] << ',' << s.variance(r) << ','
       << s.mean_abs_weight(r);
    for (Eigen::Index p = 0; p < s.probe_activations.rows(); ++p) os << ',' << s.probe_activations(p, r);
    os << '\n';
  }
}

nlohmann::json ensemble_to_json(const Ensemble& ens) {
  nlohmann::json j;
  j["loss_kind"] = to_string(ens.loss_kind);
  j["member_config"] = train_config_to_json(ens.member_config);
  j["member_seeds"] = ens.member_seeds;
  nlohmann::json members = nlohmann::json::array();
  for (const auto& m : ens.members) members.push_back(network_to_json(m));
  j["members"] = std::move(members);
  return j;
}

Ensemble ensemble_from_json(const nlohmann::json& j) {
  try {
    Ensemble ens;
    ens.loss_kind = parse_loss_kind(j.at("loss_kind").get<std::string>());
    ens.member_config = train_config_from_json(j.at("member_config"));
    ens.member_seeds = j.at("member_seeds").get<std::vector<std::uint64_t>>();
    for (const auto& m : j.at("members")) ens.members.push_back(network_from_json(m));
    ens.validate();
    return ens;
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(std::string("malformed ensemble JSON: ") + e.what());
  }
}

}  // namespace dare
