#include "dare/network.hpp"

#include <cmath>
#include <random>

#include "dare/errors.hpp"

namespace dare {

std::string to_string(HiddenActivation a) {
  switch (a) {
    case HiddenActivation::relu:
      return "relu";
    case HiddenActivation::leaky_relu:
      return "leaky_relu";
    case HiddenActivation::linear:
      return "linear";
  }
  return "unknown";
}

std::string to_string(OutputActivation a) {
  return a == OutputActivation::softmax ? "softmax" : "linear";
}

HiddenActivation parse_hidden_activation(const std::string& name) {
  if (name == "relu") return HiddenActivation::relu;
  if (name == "leaky_relu") return HiddenActivation::leaky_relu;
  if (name == "linear") return HiddenActivation::linear;
  throw ConfigError("unknown hidden activation '" + name + "'");
}

OutputActivation parse_output_activation(const std::string& name) {
  if (name == "linear") return OutputActivation::linear;
  if (name == "softmax") return OutputActivation::softmax;
  throw ConfigError("unknown output activation '" + name + "'");
}

std::size_t MlpNetwork::weight_count() const {
  std::size_t n = 0;
  for (const auto& w : weights) n += static_cast<std::size_t>(w.size());
  return n;
}

std::size_t MlpNetwork::bias_count() const {
  std::size_t n = 0;
  for (const auto& b : biases) n += static_cast<std::size_t>(b.size());
  return n;
}

bool MlpNetwork::all_finite() const {
  for (const auto& w : weights)
    if (!w.allFinite()) return false;
  for (const auto& b : biases)
    if (!b.allFinite()) return false;
  return true;
}

Gradient Gradient::zeros_like(const MlpNetwork& net) {
  Gradient g;
  g.weights.reserve(net.depth());
  g.biases.reserve(net.depth());
  for (std::size_t l = 0; l < net.depth(); ++l) {
    g.weights.push_back(Matrix::Zero(net.weights[l].rows(), net.weights[l].cols()));
    g.biases.push_back(Vector::Zero(net.biases[l].size()));
  }
  return g;
}

bool Gradient::congruent_with(const MlpNetwork& net) const {
  if (weights.size() != net.depth() || biases.size() != net.depth()) return false;
  for (std::size_t l = 0; l < net.depth(); ++l) {
    if (weights[l].rows() != net.weights[l].rows() || weights[l].cols() != net.weights[l].cols())
      return false;
    if (biases[l].size() != net.biases[l].size()) return false;
  }
  return true;
}

bool Gradient::all_finite() const {
  for (const auto& w : weights)
    if (!w.allFinite()) return false;
  for (const auto& b : biases)
    if (!b.allFinite()) return false;
  return true;
}

double Gradient::max_abs() const {
  double m = 0.0;
  for (const auto& w : weights)
    if (w.size() > 0) m = std::max(m, w.cwiseAbs().maxCoeff());
  for (const auto& b : biases)
    if (b.size() > 0) m = std::max(m, b.cwiseAbs().maxCoeff());
  return m;
}

Gradient& Gradient::operator+=(const Gradient& other) {
  if (other.weights.size() != weights.size()) throw ShapeError("gradient depth mismatch");
  for (std::size_t l = 0; l < weights.size(); ++l) {
    weights[l] += other.weights[l];
    biases[l] += other.biases[l];
  }
  return *this;
}

MlpNetwork init_network(const std::vector<int>& layer_dims, const ActivationSpec& activations,
                        std::uint64_t seed) {
  if (layer_dims.size() < 2)
    throw ConfigError("a network needs at least an input and an output layer");
  for (int d : layer_dims)
    if (d < 1) throw ConfigError("layer widths must be positive");
  if (activations.leaky_slope < 0.0 || !std::isfinite(activations.leaky_slope))
    throw ConfigError("leaky_relu slope must be finite and non-negative");

  MlpNetwork net;
  net.layer_dims = layer_dims;
  net.activations = activations;
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) {
    const int fan_in = layer_dims[l];
    const int fan_out = layer_dims[l + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Matrix w(fan_in, fan_out);
    // Fill row-major so the draw order matches the JSON layout.
    for (int i = 0; i < fan_in; ++i)
      for (int j = 0; j < fan_out; ++j) w(i, j) = dist(rng);
    net.weights.push_back(std::move(w));
    net.biases.push_back(Vector::Zero(fan_out));
  }
  return net;
}

namespace {

void check_input(const MlpNetwork& net, const Matrix& x) {
  if (net.depth() == 0) throw ShapeError("network has no layers");
  if (x.cols() != net.input_dim())
    throw ShapeError("input has " + std::to_string(x.cols()) + " columns, network expects " +
                     std::to_string(net.input_dim()));
}

Matrix apply_hidden(const Matrix& z, const ActivationSpec& spec) {
  switch (spec.hidden) {
    case HiddenActivation::relu:
      return z.cwiseMax(0.0);
    case HiddenActivation::leaky_relu: {
      const double s = spec.leaky_slope;
      return z.unaryExpr([s](double v) { return v > 0.0 ? v : s * v; });
    }
    case HiddenActivation::linear:
      return z;
  }
  return z;
}

// Derivative of the hidden activation evaluated at the pre-activation.
Matrix hidden_derivative(const Matrix& z, const ActivationSpec& spec) {
  switch (spec.hidden) {
    case HiddenActivation::relu:
      return z.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; });
    case HiddenActivation::leaky_relu: {
      const double s = spec.leaky_slope;
      return z.unaryExpr([s](double v) { return v > 0.0 ? 1.0 : s; });
    }
    case HiddenActivation::linear:
      return Matrix::Ones(z.rows(), z.cols());
  }
  return Matrix::Ones(z.rows(), z.cols());
}

Matrix softmax_rows(const Matrix& z) {
  Matrix out(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    out.row(i) = (z.row(i).array() - m).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

Matrix affine(const Matrix& a, const Matrix& w, const Vector& b) {
  Matrix z = a * w;
  z.rowwise() += b.transpose();
  return z;
}

}  // namespace

ForwardResult forward(const MlpNetwork& net, const Matrix& x_batch) {
  check_input(net, x_batch);
  ForwardResult result;
  auto& trace = result.trace;
  trace.activations.reserve(net.depth() + 1);
  trace.pre_activations.reserve(net.depth());
  trace.activations.push_back(x_batch);
  for (std::size_t l = 0; l < net.depth(); ++l) {
    trace.pre_activations.push_back(affine(trace.activations.back(), net.weights[l], net.biases[l]));
    const Matrix& z = trace.pre_activations.back();
    const bool last = (l + 1 == net.depth());
    if (!last) {
      trace.activations.push_back(apply_hidden(z, net.activations));
    } else if (net.activations.output == OutputActivation::softmax) {
      trace.activations.push_back(softmax_rows(z));
    } else {
      trace.activations.push_back(z);
    }
  }
  result.outputs = trace.activations.back();
  return result;
}

Matrix predict(const MlpNetwork& net, const Matrix& x_batch) {
  check_input(net, x_batch);
  Matrix a = x_batch;
  for (std::size_t l = 0; l < net.depth(); ++l) {
    Matrix z = affine(a, net.weights[l], net.biases[l]);
    if (l + 1 < net.depth()) {
      a = apply_hidden(z, net.activations);
    } else if (net.activations.output == OutputActivation::softmax) {
      a = softmax_rows(z);
    } else {
      a = std::move(z);
    }
  }
  return a;
}

Gradient backward(const MlpNetwork& net, const Matrix& x_batch, const Matrix& upstream_grad,
                  const ForwardTrace& trace) {
  check_input(net, x_batch);
  const std::size_t depth = net.depth();
  if (trace.activations.size() != depth + 1 || trace.pre_activations.size() != depth)
    throw ShapeError("forward trace does not match network depth");
  if (trace.activations.front().rows() != x_batch.rows() ||
      trace.activations.front().cols() != x_batch.cols() || trace.activations.front() != x_batch)
    throw ShapeError("forward trace was produced on a different batch");
  for (std::size_t l = 0; l <= depth; ++l)
    if (trace.activations[l].cols() != net.layer_dims[l])
      throw ShapeError("forward trace layer width mismatch");
  const Matrix& out = trace.activations.back();
  if (upstream_grad.rows() != out.rows() || upstream_grad.cols() != out.cols())
    throw ShapeError("upstream gradient shape does not match network output");

  Gradient grad = Gradient::zeros_like(net);

  // delta = d objective / d pre-activation of the current layer.
  Matrix delta;
  if (net.activations.output == OutputActivation::softmax) {
    const Matrix& s = out;
    const Vector dots = (upstream_grad.cwiseProduct(s)).rowwise().sum();
    delta = s.cwiseProduct(upstream_grad - dots.replicate(1, s.cols()));
  } else {
    delta = upstream_grad;
  }

  for (std::size_t l = depth; l-- > 0;) {
    const Matrix& a_in = trace.activations[l];
    grad.weights[l].noalias() = a_in.transpose() * delta;
    grad.biases[l] = delta.colwise().sum().transpose();
    if (l == 0) break;
    Matrix upstream = delta * net.weights[l].transpose();
    delta = upstream.cwiseProduct(hidden_derivative(trace.pre_activations[l - 1], net.activations));
  }
  return grad;
}

nlohmann::json network_to_json(const MlpNetwork& net) {
  nlohmann::json j;
  j["layer_dims"] = net.layer_dims;
  j["activations"] = {{"hidden", to_string(net.activations.hidden)},
                      {"output", to_string(net.activations.output)},
                      {"leaky_slope", net.activations.leaky_slope}};
  nlohmann::json ws = nlohmann::json::array();
  nlohmann::json bs = nlohmann::json::array();
  for (std::size_t l = 0; l < net.depth(); ++l) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < net.weights[l].rows(); ++i) {
      std::vector<double> row(static_cast<std::size_t>(net.weights[l].cols()));
      for (Eigen::Index k = 0; k < net.weights[l].cols(); ++k)
        row[static_cast<std::size_t>(k)] = net.weights[l](i, k);
      rows.push_back(row);
    }
    ws.push_back(std::move(rows));
    bs.push_back(std::vector<double>(net.biases[l].data(), net.biases[l].data() + net.biases[l].size()));
  }
  j["weights"] = std::move(ws);
  j["biases"] = std::move(bs);
  return j;
}

MlpNetwork network_from_json(const nlohmann::json& j) {
  try {
    MlpNetwork net;
    net.layer_dims = j.at("layer_dims").get<std::vector<int>>();
    const auto& act = j.at("activations");
    net.activations.hidden = parse_hidden_activation(act.at("hidden").get<std::string>());
    net.activations.output = parse_output_activation(act.at("output").get<std::string>());
    net.activations.leaky_slope = act.value("leaky_slope", 0.01);
    const auto& ws = j.at("weights");
    const auto& bs = j.at("biases");
    if (net.layer_dims.size() < 2 || ws.size() + 1 != net.layer_dims.size() || bs.size() != ws.size())
      throw ShapeError("network JSON layer count mismatch");
    for (std::size_t l = 0; l < ws.size(); ++l) {
      const int rows = net.layer_dims[l];
      const int cols = net.layer_dims[l + 1];
      if (ws[l].size() != static_cast<std::size_t>(rows)) throw ShapeError("weight row count mismatch");
      Matrix w(rows, cols);
      for (int i = 0; i < rows; ++i) {
        const auto row = ws[l][static_cast<std::size_t>(i)].get<std::vector<double>>();
        if (row.size() != static_cast<std::size_t>(cols)) throw ShapeError("weight column count mismatch");
        for (int k = 0; k < cols; ++k) w(i, k) = row[static_cast<std::size_t>(k)];
      }
      const auto b = bs[l].get<std::vector<double>>();
      if (b.size() != static_cast<std::size_t>(cols)) throw ShapeError("bias length mismatch");
      net.weights.push_back(std::move(w));
      net.biases.push_back(Eigen::Map<const Vector>(b.data(), cols));
    }
    if (!net.all_finite()) throw IngestionError("network JSON contains non-finite values");
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(std::string("malformed network JSON: ") + e.what());
  }
}

}  // namespace dare
