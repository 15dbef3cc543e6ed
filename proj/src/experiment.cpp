#include "dare/experiment.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "dare/errors.hpp"
#include "dare/io.hpp"

namespace dare {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::two_moons: return "two_moons";
    case ExperimentKind::regression_1d: return "regression_1d";
    case ExperimentKind::tabular_ood: return "tabular_ood";
    case ExperimentKind::waterfill_verify: return "waterfill_verify";
    case ExperimentKind::delta_sweep: return "delta_sweep";
  }
  return "?";
}

ExperimentKind parse_experiment_kind(const std::string& name) {
  for (auto k : {ExperimentKind::two_moons, ExperimentKind::regression_1d, ExperimentKind::tabular_ood,
                 ExperimentKind::waterfill_verify, ExperimentKind::delta_sweep})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown experiment kind '" + name + "'");
}

std::string to_string(Method m) {
  switch (m) {
    case Method::dare: return "dare";
    case Method::de_mse: return "de_mse";
    case Method::de_nll: return "de_nll";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  for (auto m : {Method::dare, Method::de_mse, Method::de_nll})
    if (to_string(m) == name) return m;
  throw ConfigError("unknown method '" + name + "' (expected dare, de_mse or de_nll)");
}

namespace {

std::string to_string(TabularTask t) { return t == TabularTask::regression ? "regression" : "classification"; }

TabularTask parse_tabular_task(const std::string& s) {
  if (s == "regression") return TabularTask::regression;
  if (s == "classification") return TabularTask::classification;
  throw ConfigError("tabular task must be 'regression' or 'classification'");
}

const std::set<std::string> kTopLevelKeys = {
    "kind",     "name",      "seeds",   "members", "workers",    "methods",    "network",  "train",
    "tau_delta", "two_moons", "regression_1d", "tabular", "sweep", "evaluation", "waterfill", "output_dir"};

json tau_to_json(double tau) {
  if (std::isinf(tau)) return tau < 0 ? "-inf" : "inf";
  return tau;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (members < 1) throw ConfigError("members must be at least 1");
  if (workers < 1) throw ConfigError("workers must be at least 1");
  if (tau_delta && !(*tau_delta >= 0.0)) throw ConfigError("tau_delta must be non-negative");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  for (int h : network.hidden)
    if (h < 1) throw ConfigError("hidden widths must be positive");
  if (!(evaluation.percentile > 0.0 && evaluation.percentile <= 100.0))
    throw ConfigError("evaluation.percentile must lie in (0, 100]");
  if (evaluation.grid_resolution < 2) throw ConfigError("evaluation.grid_resolution must be at least 2");
  if (evaluation.ece_levels < 2 || evaluation.ece_bins < 1) throw ConfigError("invalid ECE settings");
  TrainConfig probe = train;
  probe.loss_kind = LossKind::mse;
  probe.validate();
  std::set<Method> seen;
  for (auto m : methods)
    if (!seen.insert(m).second) throw ConfigError("method '" + to_string(m) + "' listed twice");

  auto check_dataset = [&](ExperimentKind k) {
    if (k == ExperimentKind::two_moons) {
      if (two_moons.n_train < 2 || two_moons.n_val < 2 || two_moons.n_test < 2)
        throw ConfigError("two_moons sizes must be at least 2");
      if (two_moons.noise < 0.0) throw ConfigError("two_moons.noise must be non-negative");
    } else if (k == ExperimentKind::regression_1d) {
      regression.generator.validate();
      if (regression.n_train < 1 || regression.n_val < 1 || regression.n_test < 1)
        throw ConfigError("regression_1d sizes must be positive");
      if (regression.grid_points < 2 || !(regression.eval_margin > 0.0))
        throw ConfigError("regression_1d evaluation grid is invalid");
    } else if (k == ExperimentKind::tabular_ood) {
      if (tabular.csv_path.empty()) throw ConfigError("tabular.csv_path is required");
      if (!fs::exists(tabular.csv_path)) throw ConfigError("tabular.csv_path '" + tabular.csv_path + "' does not exist");
      if (tabular.target_cols.empty()) throw ConfigError("tabular.target_cols is required");
      if (tabular.shift_feature.empty()) throw ConfigError("tabular.shift_feature is required");
      if (!(tabular.quantile > 0.0 && tabular.quantile < 1.0)) throw ConfigError("tabular.quantile must lie in (0, 1)");
      if (tabular.train_fraction <= 0.0 || tabular.val_fraction <= 0.0 ||
          tabular.train_fraction + tabular.val_fraction >= 1.0)
        throw ConfigError("tabular split fractions must leave a non-empty test part");
    } else {
      throw ConfigError("'" + to_string(k) + "' is not a dataset kind");
    }
  };

  switch (kind) {
    case ExperimentKind::waterfill_verify:
      if (waterfill_problems < 1 || waterfill_p_max < 1) throw ConfigError("waterfill settings must be positive");
      break;
    case ExperimentKind::delta_sweep:
      if (sweep_dataset == ExperimentKind::tabular_ood && tabular.task != TabularTask::regression)
        throw ConfigError("delta_sweep needs a regression dataset");
      check_dataset(sweep_dataset);
      if (deltas.empty()) throw ConfigError("sweep.deltas must not be empty");
      for (double d : deltas)
        if (!(d >= 0.0)) throw ConfigError("sweep.deltas must be non-negative");
      break;
    default:
      if (methods.empty()) throw ConfigError("at least one method is required");
      check_dataset(kind);
  }
}

json ExperimentConfig::to_json() const {
  json j;
  j["kind"] = dare::to_string(kind);
  j["name"] = name;
  j["seeds"] = seeds;
  j["members"] = members;
  j["workers"] = workers;
  std::vector<std::string> ms;
  for (auto m : methods) ms.push_back(dare::to_string(m));
  j["methods"] = ms;
  j["network"] = {{"hidden", network.hidden},
                  {"activation", dare::to_string(network.hidden_activation)},
                  {"leaky_slope", network.leaky_slope}};
  json t = train_config_to_json(train);
  t.erase("loss_kind");
  t.erase("seed");
  t["tau"] = tau_to_json(train.tau);
  j["train"] = t;
  j["tau_delta"] = tau_delta ? json(*tau_delta) : json(nullptr);
  j["two_moons"] = {{"n_train", two_moons.n_train},
                    {"n_val", two_moons.n_val},
                    {"n_test", two_moons.n_test},
                    {"noise", two_moons.noise}};
  const auto& g = regression.generator;
  j["regression_1d"] = {{"n_train", regression.n_train},
                        {"n_val", regression.n_val},
                        {"n_test", regression.n_test},
                        {"eval_margin", regression.eval_margin},
                        {"grid_points", regression.grid_points},
                        {"generator",
                         {{"support_lo", g.support_lo},
                          {"gap_lo", g.gap_lo},
                          {"gap_hi", g.gap_hi},
                          {"support_hi", g.support_hi},
                          {"noise_a", g.noise_a},
                          {"noise_b", g.noise_b},
                          {"version", g.version}}}};
  j["tabular"] = {{"csv_path", tabular.csv_path},
                  {"target_cols", tabular.target_cols},
                  {"task", to_string(tabular.task)},
                  {"shift_feature", tabular.shift_feature},
                  {"quantile", tabular.quantile},
                  {"train_fraction", tabular.train_fraction},
                  {"val_fraction", tabular.val_fraction}};
  j["sweep"] = {{"dataset", dare::to_string(sweep_dataset)}, {"deltas", deltas}};
  j["evaluation"] = {{"percentile", evaluation.percentile},
                     {"far_distance", evaluation.far_distance},
                     {"grid_margin", evaluation.grid_margin},
                     {"grid_resolution", evaluation.grid_resolution},
                     {"ece_levels", evaluation.ece_levels},
                     {"ece_bins", evaluation.ece_bins}};
  j["waterfill"] = {{"problems", waterfill_problems}, {"p_max", waterfill_p_max}};
  j["output_dir"] = output_dir.string();
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!kTopLevelKeys.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  ExperimentConfig c;
  try {
    if (j.contains("kind")) c.kind = parse_experiment_kind(j.at("kind").get<std::string>());
    c.name = j.value("name", c.name);
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    c.members = j.value("members", c.members);
    c.workers = j.value("workers", c.workers);
    if (j.contains("methods")) {
      c.methods.clear();
      for (const auto& m : j.at("methods")) c.methods.push_back(parse_method(m.get<std::string>()));
    }
    if (j.contains("network")) {
      const auto& n = j.at("network");
      if (n.contains("hidden")) c.network.hidden = n.at("hidden").get<std::vector<int>>();
      if (n.contains("activation"))
        c.network.hidden_activation = parse_hidden_activation(n.at("activation").get<std::string>());
      c.network.leaky_slope = n.value("leaky_slope", c.network.leaky_slope);
    }
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("tau_delta") && !j.at("tau_delta").is_null()) c.tau_delta = j.at("tau_delta").get<double>();
    if (j.contains("two_moons")) {
      const auto& t = j.at("two_moons");
      c.two_moons.n_train = t.value("n_train", c.two_moons.n_train);
      c.two_moons.n_val = t.value("n_val", c.two_moons.n_val);
      c.two_moons.n_test = t.value("n_test", c.two_moons.n_test);
      c.two_moons.noise = t.value("noise", c.two_moons.noise);
    }
    if (j.contains("regression_1d")) {
      const auto& r = j.at("regression_1d");
      auto& p = c.regression;
      p.n_train = r.value("n_train", p.n_train);
      p.n_val = r.value("n_val", p.n_val);
      p.n_test = r.value("n_test", p.n_test);
      p.eval_margin = r.value("eval_margin", p.eval_margin);
      p.grid_points = r.value("grid_points", p.grid_points);
      if (r.contains("generator")) {
        const auto& g = r.at("generator");
        auto& q = p.generator;
        q.support_lo = g.value("support_lo", q.support_lo);
        q.gap_lo = g.value("gap_lo", q.gap_lo);
        q.gap_hi = g.value("gap_hi", q.gap_hi);
        q.support_hi = g.value("support_hi", q.support_hi);
        q.noise_a = g.value("noise_a", q.noise_a);
        q.noise_b = g.value("noise_b", q.noise_b);
        q.version = g.value("version", q.version);
      }
    }
    if (j.contains("tabular")) {
      const auto& t = j.at("tabular");
      auto& p = c.tabular;
      p.csv_path = t.value("csv_path", p.csv_path);
      if (t.contains("target_cols")) p.target_cols = t.at("target_cols").get<std::vector<std::string>>();
      if (t.contains("task")) p.task = parse_tabular_task(t.at("task").get<std::string>());
      p.shift_feature = t.value("shift_feature", p.shift_feature);
      p.quantile = t.value("quantile", p.quantile);
      p.train_fraction = t.value("train_fraction", p.train_fraction);
      p.val_fraction = t.value("val_fraction", p.val_fraction);
    }
    if (j.contains("sweep")) {
      const auto& s = j.at("sweep");
      if (s.contains("dataset")) c.sweep_dataset = parse_experiment_kind(s.at("dataset").get<std::string>());
      if (s.contains("deltas")) c.deltas = s.at("deltas").get<std::vector<double>>();
    }
    if (j.contains("evaluation")) {
      const auto& e = j.at("evaluation");
      auto& p = c.evaluation;
      p.percentile = e.value("percentile", p.percentile);
      p.far_distance = e.value("far_distance", p.far_distance);
      p.grid_margin = e.value("grid_margin", p.grid_margin);
      p.grid_resolution = e.value("grid_resolution", p.grid_resolution);
      p.ece_levels = e.value("ece_levels", p.ece_levels);
      p.ece_bins = e.value("ece_bins", p.ece_bins);
    }
    if (j.contains("waterfill")) {
      const auto& w = j.at("waterfill");
      c.waterfill_problems = w.value("problems", c.waterfill_problems);
      c.waterfill_p_max = w.value("p_max", c.waterfill_p_max);
    }
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid experiment config: ") + e.what());
  }
  return c;
}

std::string ExperimentConfig::hash() const {
  // Output location and parallelism do not change results.
  json j = to_json();
  j.erase("output_dir");
  j.erase("workers");
  return fnv1a_hex(j.dump());
}

ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  c.name = name;
  c.members = 20;
  c.train.learning_rate = 0.001;
  c.train.batch_size = 32;
  c.train.max_epochs = 500;
  c.train.lambda_mode = LambdaMode::controlled;
  c.seeds = {0, 1, 2, 3, 4};
  if (name == "two_moons_paper") {
    c.kind = ExperimentKind::two_moons;
    c.train.tau = 0.001;
    c.methods = {Method::dare, Method::de_mse, Method::de_nll};
  } else if (name == "regression1d_paper") {
    c.kind = ExperimentKind::regression_1d;
    c.train.tau = 0.1;
    c.methods = {Method::dare, Method::de_nll, Method::de_mse};
  } else if (name == "tabular_ood_default") {
    c.kind = ExperimentKind::tabular_ood;
    c.members = 5;
    c.train.max_epochs = 200;
    c.tau_delta = 0.25;
    c.methods = {Method::dare, Method::de_mse, Method::de_nll};
  } else if (name == "waterfill_verify_default") {
    c.kind = ExperimentKind::waterfill_verify;
    c.seeds = {0};
  } else if (name == "delta_sweep_default") {
    c.kind = ExperimentKind::delta_sweep;
    c.members = 5;
    c.train.max_epochs = 200;
    c.sweep_dataset = ExperimentKind::regression_1d;
    c.deltas = {0.0, 0.1, 0.25, 0.5, 1.0};
  } else {
    std::string names;
    for (const auto& n : preset_names()) names += " " + n;
    throw ConfigError("unknown preset '" + name + "'; available:" + names);
  }
  c.output_dir = fs::path("runs") / name;
  return c;
}

std::vector<std::string> preset_names() {
  return {"two_moons_paper", "regression1d_paper", "tabular_ood_default", "waterfill_verify_default",
          "delta_sweep_default"};
}

ExperimentConfig load_experiment_config(const std::optional<fs::path>& path,
                                        const std::optional<std::string>& preset_name) {
  if (!path && !preset_name) throw ConfigError("either a config file or a preset is required");
  json base = preset_name ? preset(*preset_name).to_json() : ExperimentConfig{}.to_json();
  if (path) {
    if (!fs::exists(*path)) throw ConfigError("config file '" + path->string() + "' not found");
    json patch;
    try {
      patch = json::parse(read_file(*path));
    } catch (const json::parse_error& e) {
      throw ConfigError("config file '" + path->string() + "' is not valid JSON: " + e.what());
    }
    if (!patch.is_object()) throw ConfigError("config file must hold a JSON object");
    for (const auto& [key, _] : patch.items())
      if (!kTopLevelKeys.contains(key)) throw ConfigError("unknown config key '" + key + "'");
    base.merge_patch(patch);
  }
  return ExperimentConfig::from_json(base);
}

// ---------------------------------------------------------------------------
// Data preparation

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

Matrix rows_of(const Matrix& m, const std::vector<Eigen::Index>& idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
  return out;
}

Matrix labels_column(const std::vector<int>& labels) {
  Matrix y(static_cast<Eigen::Index>(labels.size()), 1);
  for (std::size_t i = 0; i < labels.size(); ++i) y(static_cast<Eigen::Index>(i), 0) = labels[i];
  return y;
}

PreparedData prepare_two_moons(const ExperimentConfig& c, std::uint64_t seed) {
  const auto& p = c.two_moons;
  const Dataset train = two_moons(p.n_train + p.n_train % 2, p.noise, derive_seed(seed, 1));
  const Dataset val = two_moons(p.n_val + p.n_val % 2, p.noise, derive_seed(seed, 2));
  const Dataset test = two_moons(p.n_test + p.n_test % 2, p.noise, derive_seed(seed, 3));
  PreparedData d;
  d.task = PreparedData::Task::binary;
  d.num_classes = 2;
  d.train = {train.x, train.y};
  d.val = {val.x, val.y};
  d.train_labels = train.labels;
  d.val_labels = val.labels;
  d.test_x = test.x;
  d.test_y = test.y;
  d.test_labels = test.labels;

  const double m = c.evaluation.grid_margin;
  const Vector lo = train.x.colwise().minCoeff();
  const Vector hi = train.x.colwise().maxCoeff();
  const int r = c.evaluation.grid_resolution;
  d.grid_x = eval_grid({{lo(0) - m, hi(0) + m}, {lo(1) - m, hi(1) + m}}, {r, r});
  d.grid_display = d.grid_x;
  const Vector dist = nearest_distance(d.grid_x, train.x);
  std::vector<Eigen::Index> far;
  for (Eigen::Index i = 0; i < dist.size(); ++i)
    if (dist(i) >= c.evaluation.far_distance) far.push_back(i);
  d.ood_x = rows_of(d.grid_x, far);
  d.ood_y = Matrix::Zero(d.ood_x.rows(), 1);
  std::ostringstream rule;
  rule << "grid points at distance >= " << format_double(c.evaluation.far_distance) << " from training data";
  d.split_rule = rule.str();
  return d;
}

PreparedData prepare_regression_1d(const ExperimentConfig& c, std::uint64_t seed) {
  const auto& p = c.regression;
  const auto& g = p.generator;
  const Dataset train = regression_1d(p.n_train, derive_seed(seed, 1), g);
  const Dataset val = regression_1d(p.n_val, derive_seed(seed, 2), g);
  const Dataset test = regression_1d(p.n_test, derive_seed(seed, 3), g);
  const Standardizer st = Standardizer::fit(train.x);

  PreparedData d;
  d.task = PreparedData::Task::regression;
  d.train = {st.transform(train.x), train.y};
  d.val = {st.transform(val.x), val.y};
  d.test_x = st.transform(test.x);
  d.test_y = test.y;

  const Matrix grid = eval_grid({{g.support_lo - p.eval_margin, g.support_hi + p.eval_margin}}, {p.grid_points});
  d.grid_display = grid;
  d.grid_x = st.transform(grid);
  std::vector<Eigen::Index> outside;
  for (Eigen::Index i = 0; i < grid.rows(); ++i)
    if (!g.in_support(grid(i, 0))) outside.push_back(i);
  const Matrix ood_raw = rows_of(grid, outside);
  d.ood_x = st.transform(ood_raw);
  d.ood_y = regression_1d_targets(ood_raw, derive_seed(seed, 4), g);
  d.split_rule = "grid points outside the training support";
  return d;
}

PreparedData prepare_tabular(const ExperimentConfig& c, std::uint64_t seed) {
  const auto& p = c.tabular;
  Dataset full = load_csv(p.csv_path, p.target_cols, true);
  const bool classification = p.task == TabularTask::classification;
  if (classification) {
    if (full.y.cols() != 1) throw ConfigError("classification needs exactly one label column");
    full = as_classification(std::move(full));
  }
  const auto it = std::find(full.feature_names.begin(), full.feature_names.end(), p.shift_feature);
  if (it == full.feature_names.end())
    throw ConfigError("shift feature '" + p.shift_feature + "' is not a feature column");
  const int feature = static_cast<int>(it - full.feature_names.begin());
  const OodSplit split = feature_shift_split(full, feature, p.quantile);
  const TrainValTest parts = split_dataset(split.in_distribution, p.train_fraction, p.val_fraction, derive_seed(seed, 1));
  if (parts.train.size() == 0 || parts.val.size() == 0 || parts.test.size() == 0)
    throw ConfigError("tabular split produced an empty part");

  PreparedData d;
  d.task = classification ? PreparedData::Task::multiclass : PreparedData::Task::regression;
  if (classification) d.num_classes = *std::max_element(full.labels.begin(), full.labels.end()) + 1;
  d.train = {parts.train.x, parts.train.y};
  d.val = {parts.val.x, parts.val.y};
  d.train_labels = parts.train.labels;
  d.val_labels = parts.val.labels;
  d.test_x = parts.test.x;
  d.test_y = parts.test.y;
  d.test_labels = parts.test.labels;
  d.ood_x = split.out_of_distribution.x;
  d.ood_y = split.out_of_distribution.y;
  d.ood_labels = split.out_of_distribution.labels;
  if (!classification) {
    // Targets are scaled with the training-part statistics so losses are unit-free.
    const Standardizer ys = Standardizer::fit(d.train.y);
    d.train.y = ys.transform(d.train.y);
    d.val.y = ys.transform(d.val.y);
    d.test_y = ys.transform(d.test_y);
    d.ood_y = ys.transform(d.ood_y);
  }
  d.grid_x = d.ood_x;
  d.grid_display = split.out_of_distribution.standardization.inverse_transform(d.ood_x);
  d.split_rule = split.split_rule;
  return d;
}

}  // namespace

PreparedData prepare_data(const ExperimentConfig& config, ExperimentKind dataset_kind, std::uint64_t seed) {
  switch (dataset_kind) {
    case ExperimentKind::two_moons: return prepare_two_moons(config, seed);
    case ExperimentKind::regression_1d: return prepare_regression_1d(config, seed);
    case ExperimentKind::tabular_ood: return prepare_tabular(config, seed);
    default: throw ConfigError("'" + to_string(dataset_kind) + "' has no dataset");
  }
}

LossKind method_loss(Method method, PreparedData::Task task) {
  switch (task) {
    case PreparedData::Task::binary:
      return method == Method::de_nll ? LossKind::softmax_cross_entropy : LossKind::mse;
    case PreparedData::Task::multiclass:
      return method == Method::de_nll ? LossKind::softmax_cross_entropy : LossKind::classification_mse;
    case PreparedData::Task::regression:
      return method == Method::de_mse ? LossKind::mse : LossKind::gaussian_nll;
  }
  return LossKind::mse;
}

Matrix training_targets(LossKind loss, const Matrix& y, const std::vector<int>& labels, int num_classes) {
  switch (loss) {
    case LossKind::classification_mse: return one_hot(labels, num_classes, true);
    case LossKind::softmax_cross_entropy: return one_hot(labels, num_classes, false);
    default: return y;
  }
}

namespace {

Matrix targets_for(LossKind loss, const PreparedData& d, const Matrix& y, const std::vector<int>& labels) {
  if (d.task == PreparedData::Task::binary && loss == LossKind::mse) return labels_column(labels);
  return training_targets(loss, y, labels, d.num_classes);
}

Method reference_method(PreparedData::Task task) {
  return method_loss(Method::de_mse, task) == method_loss(Method::dare, task) ? Method::de_mse : Method::de_nll;
}

}  // namespace

Vector uncertainty_scores(const Ensemble& ens, PreparedData::Task task, const Matrix& x) {
  if (ens.loss_kind == LossKind::softmax_cross_entropy) return entropy_score_softmax(ens, x);
  if (task == PreparedData::Task::binary) return binary_uncertainty_score(ens, x);
  if (task == PreparedData::Task::multiclass) return ood_score_classification(ens, x);
  return predict_regression(ens, x).variance.rowwise().sum();
}

MethodRun train_method(const ExperimentConfig& config, const PreparedData& data, Method method,
                       std::uint64_t seed, double tau) {
  TrainConfig tc = config.train;
  tc.loss_kind = method_loss(method, data.task);
  tc.seed = seed * 1000;
  if (method == Method::dare) {
    tc.tau = tau;
  } else {
    tc.lambda_mode = LambdaMode::always_off;
    tc.tau = -std::numeric_limits<double>::infinity();
  }
  const TrainData train{data.train.x, targets_for(tc.loss_kind, data, data.train.y, data.train_labels)};
  const TrainData val{data.val.x, targets_for(tc.loss_kind, data, data.val.y, data.val_labels)};
  MethodRun run;
  run.method = method;
  run.seed = seed;
  run.tau = tc.tau;
  run.training = train_ensemble(train, val, tc, config.network, config.members, config.workers);
  return run;
}

double mean_validation_loss(const EnsembleTraining& training) {
  if (training.member_results.empty()) throw DivergenceError("no trained members");
  double total = 0.0;
  for (const auto& r : training.member_results) {
    double v = r.checkpoint_val_loss;
    if (std::isnan(v) && !r.telemetry.epochs.empty()) v = r.telemetry.epochs.back().val_loss;
    total += v;
  }
  return total / static_cast<double>(training.member_results.size());
}

namespace {

Matrix classification_probs(const Ensemble& ens, PreparedData::Task task, const Matrix& x) {
  const auto outs = member_outputs(ens, x);
  Matrix mean = Matrix::Zero(outs.front().rows(), outs.front().cols());
  for (const auto& o : outs) mean += o;
  mean /= static_cast<double>(outs.size());
  if (ens.loss_kind == LossKind::softmax_cross_entropy || task != PreparedData::Task::binary) return mean;
  Matrix probs(mean.rows(), 2);
  for (Eigen::Index i = 0; i < mean.rows(); ++i) {
    const double p = std::clamp(mean(i, 0), 0.0, 1.0);
    probs(i, 0) = 1.0 - p;
    probs(i, 1) = p;
  }
  return probs;
}

bool positive_variance(const PredictiveDistribution& p) { return (p.variance.array() > 0.0).all(); }

SplitMetrics regression_split(const ExperimentConfig& c, const Ensemble& ens, const Matrix& x, const Matrix& y) {
  SplitMetrics s;
  s.n = static_cast<std::size_t>(x.rows());
  const auto pred = predict_regression(ens, x);
  if (positive_variance(pred)) s.nll = nll_regression(pred, y);
  s.ece = ece_regression(pred, y, c.evaluation.ece_levels);
  return s;
}

SplitMetrics classification_split(const ExperimentConfig& c, const Ensemble& ens, PreparedData::Task task,
                                  const Matrix& x, const std::vector<int>& labels) {
  SplitMetrics s;
  s.n = static_cast<std::size_t>(x.rows());
  if (labels.empty()) return s;
  s.accuracy = accuracy(predict_classes(ens, x), labels);
  if (ens.loss_kind == LossKind::softmax_cross_entropy || task == PreparedData::Task::binary)
    s.ece = ece_classification(classification_probs(ens, task, x), labels, c.evaluation.ece_bins);
  return s;
}

}  // namespace

EvalReport evaluate_method(const ExperimentConfig& config, const PreparedData& data, const MethodRun& run) {
  const Ensemble& ens = run.training.ensemble;
  EvalReport r;
  r.method = to_string(run.method);
  r.seed = run.seed;
  r.config_hash = config.hash();

  const bool regression = data.task == PreparedData::Task::regression;
  SplitMetrics id = regression ? regression_split(config, ens, data.test_x, data.test_y)
                               : classification_split(config, ens, data.task, data.test_x, data.test_labels);
  SplitMetrics ood;
  if (data.ood_x.rows() > 0) {
    ood = regression ? regression_split(config, ens, data.ood_x, data.ood_y)
                     : classification_split(config, ens, data.task, data.ood_x, data.ood_labels);
    const auto val_scores = to_std_vector(uncertainty_scores(ens, data.task, data.val.x));
    const auto id_scores = to_std_vector(uncertainty_scores(ens, data.task, data.test_x));
    const auto ood_scores = to_std_vector(uncertainty_scores(ens, data.task, data.ood_x));
    ood.auroc = auroc(ood_scores, id_scores);
    ood.flagged_fraction = percentile_threshold_detect(val_scores, ood_scores, config.evaluation.percentile).flagged_fraction();
    id.flagged_fraction = percentile_threshold_detect(val_scores, id_scores, config.evaluation.percentile).flagged_fraction();
    r.splits["ood"] = ood;
  }
  r.splits["id_test"] = id;

  double log_theta = 0.0, train_loss = 0.0, last_loss = 0.0;
  int never = 0;
  const Matrix train_targets = targets_for(ens.loss_kind, data, data.train.y, data.train_labels);
  for (std::size_t m = 0; m < ens.size(); ++m) {
    log_theta += anti_reg_value(ens.members[m], config.train.param_scope);
    train_loss += dataset_loss(ens.members[m], data.train.x, train_targets, ens.loss_kind);
    const auto& res = run.training.member_results[m];
    never += res.tau_never_reached ? 1 : 0;
    const auto& ep = res.telemetry.epochs;
    const std::size_t tail = std::max<std::size_t>(1, ep.size() / 10);
    double acc = 0.0;
    for (std::size_t e = ep.size() - tail; e < ep.size(); ++e) acc += ep[e].train_loss;
    last_loss += acc / static_cast<double>(tail);
  }
  const double m = static_cast<double>(ens.size());
  r.extras["tau"] = run.tau;
  r.extras["members"] = m;
  r.extras["failed_members"] = static_cast<double>(run.training.failures.size());
  r.extras["tau_never_reached_members"] = never;
  r.extras["mean_log_theta2"] = log_theta / m;
  r.extras["train_loss"] = train_loss / m;
  r.extras["final_epochs_train_loss"] = last_loss / m;
  r.extras["mean_val_loss"] = mean_validation_loss(run.training);

  if (regression && data.grid_display.cols() == 1 && config.kind != ExperimentKind::tabular_ood &&
      !(config.kind == ExperimentKind::delta_sweep && config.sweep_dataset == ExperimentKind::tabular_ood)) {
    const auto pred = predict_regression(ens, data.grid_x);
    std::vector<double> dist, sig_out;
    double in_sum = 0.0, out_sum = 0.0;
    int in_n = 0;
    for (Eigen::Index i = 0; i < data.grid_display.rows(); ++i) {
      const double d = config.regression.generator.distance_to_support(data.grid_display(i, 0));
      const double s = std::sqrt(pred.variance(i, 0));
      if (d > 0.0) {
        dist.push_back(d);
        sig_out.push_back(s);
        out_sum += s;
      } else {
        in_sum += s;
        ++in_n;
      }
    }
    if (dist.size() >= 2) r.extras["sigma_distance_spearman"] = spearman(dist, sig_out);
    if (in_n > 0 && !dist.empty())
      r.extras["sigma_ratio_out_in"] = (out_sum / static_cast<double>(dist.size())) / (in_sum / in_n);
  }
  r.validate();
  return r;
}

// ---------------------------------------------------------------------------
// Output

namespace {

class OutputWriter {
 public:
  explicit OutputWriter(fs::path root) : root_(std::move(root)) {}

  void write(const fs::path& relative, const std::string& contents) {
    if (relative.is_absolute() || relative.lexically_normal().string().starts_with(".."))
      throw ConfigError("refusing to write outside the output directory: " + relative.string());
    write_file_atomic(root_ / relative, contents);
    files_.push_back(relative.generic_string());
  }

  const fs::path& root() const { return root_; }
  const std::vector<std::string>& files() const { return files_; }

 private:
  fs::path root_;
  std::vector<std::string> files_;
};

std::string grid_csv(const Ensemble& ens, const PreparedData& d) {
  std::ostringstream os;
  const Matrix& g = d.grid_display;
  if (d.task == PreparedData::Task::regression) {
    const auto pred = predict_regression(ens, d.grid_x);
    for (Eigen::Index c = 0; c < g.cols(); ++c) os << (g.cols() == 1 ? std::string("x") : "x" + std::to_string(c)) << ',';
    for (Eigen::Index c = 0; c < pred.mean.cols(); ++c) os << "mu" << c << ",sigma" << c << (c + 1 < pred.mean.cols() ? "," : "");
    os << '\n';
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      for (Eigen::Index c = 0; c < g.cols(); ++c) os << format_double(g(i, c)) << ',';
      for (Eigen::Index c = 0; c < pred.mean.cols(); ++c)
        os << format_double(pred.mean(i, c)) << ',' << format_double(std::sqrt(pred.variance(i, c)))
           << (c + 1 < pred.mean.cols() ? "," : "");
      os << '\n';
    }
    return os.str();
  }
  const Vector score = uncertainty_scores(ens, d.task, d.grid_x);
  os << (g.cols() == 2 ? "x,y" : "x0");
  for (Eigen::Index c = 2; c < g.cols(); ++c) os << ",x" << c;
  os << ",score\n";
  for (Eigen::Index i = 0; i < g.rows(); ++i) {
    for (Eigen::Index c = 0; c < g.cols(); ++c) os << format_double(g(i, c)) << ',';
    os << format_double(score(i)) << '\n';
  }
  return os.str();
}

std::string fmt_opt(const std::optional<double>& v) { return v && std::isfinite(*v) ? format_double(*v) : ""; }

std::string summary_csv(const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  os << "method,seed,split,n,nll,ece,auroc,accuracy,flagged_fraction\n";
  for (const auto& r : reports)
    for (const auto& [name, s] : r.splits)
      os << r.method << ',' << r.seed << ',' << name << ',' << s.n << ',' << fmt_opt(s.nll) << ',' << fmt_opt(s.ece)
         << ',' << fmt_opt(s.auroc) << ',' << fmt_opt(s.accuracy) << ',' << fmt_opt(s.flagged_fraction) << '\n';
  return os.str();
}

json summary_json(const std::vector<EvalReport>& reports) {
  // method -> split -> metric -> values
  std::map<std::string, std::map<std::string, std::map<std::string, std::vector<double>>>> acc;
  for (const auto& r : reports)
    for (const auto& [name, s] : r.splits) {
      auto& slot = acc[r.method][name];
      auto push = [&](const char* key, const std::optional<double>& v) {
        if (v && std::isfinite(*v)) slot[key].push_back(*v);
      };
      push("nll", s.nll);
      push("ece", s.ece);
      push("auroc", s.auroc);
      push("accuracy", s.accuracy);
      push("flagged_fraction", s.flagged_fraction);
    }
  json out = json::object();
  for (const auto& [method, splits] : acc)
    for (const auto& [split, metrics] : splits)
      for (const auto& [metric, values] : metrics) {
        const double n = static_cast<double>(values.size());
        const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
        double var = 0.0;
        for (double v : values) var += (v - mean) * (v - mean);
        out[method][split][metric] = {{"mean", mean}, {"std", values.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0},
                                      {"n", values.size()}};
      }
  return out;
}

void write_method_outputs(OutputWriter& out, const fs::path& dir, const MethodRun& run, const PreparedData& d) {
  out.write(dir / "report.json", run.report.to_json().dump(2) + "\n");
  out.write(dir / "ensemble.json", ensemble_to_json(run.training.ensemble).dump() + "\n");
  for (std::size_t m = 0; m < run.training.member_results.size(); ++m) {
    std::ostringstream os;
    run.training.member_results[m].telemetry.write_csv(os);
    out.write(dir / ("telemetry_member_" + std::to_string(m) + ".csv"), os.str());
  }
  out.write(dir / "grid.csv", grid_csv(run.training.ensemble, d));
}

json base_manifest(const ExperimentConfig& c) {
  return {{"code_version", kCodeVersion}, {"config_hash", c.hash()}, {"experiment", to_string(c.kind)},
          {"name", c.name}};
}

void finish(RunArtifact& art, OutputWriter& out, json manifest) {
  manifest["errors"] = art.errors;
  manifest["exit_code"] = art.exit_code;
  manifest["files"] = out.files();
  art.manifest = manifest;
  write_file_atomic(out.root() / "manifest.json", manifest.dump(2) + "\n");
}

std::string seed_dir(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

void record_failures(RunArtifact& art, const MethodRun& run) {
  for (const auto& f : run.training.failures) {
    art.errors.push_back(to_string(run.method) + " seed " + std::to_string(run.seed) + " member " +
                         std::to_string(f.seed) + ": " + f.reason);
    art.exit_code = kExitDivergence;
  }
}

}  // namespace

RunArtifact run_experiment(const ExperimentConfig& config) {
  config.validate();
  if (config.kind == ExperimentKind::waterfill_verify) {
    RunArtifact art;
    art.directory = config.output_dir;
    OutputWriter out(config.output_dir);
    out.write("config.json", config.to_json().dump(2) + "\n");
    const auto rep = run_waterfill_verify(config.waterfill_problems, config.waterfill_p_max, config.seeds.front());
    out.write("waterfill_report.json", rep.to_json(true).dump(2) + "\n");
    if (!rep.passed) {
      art.exit_code = kExitVerification;
      art.errors.push_back("water-filling verification failed at case " + std::to_string(rep.worst_index));
    }
    json manifest = base_manifest(config);
    manifest["waterfill"] = rep.to_json(false);
    finish(art, out, manifest);
    return art;
  }
  if (config.kind == ExperimentKind::delta_sweep) return run_delta_sweep(config, config.deltas);

  RunArtifact art;
  art.directory = config.output_dir;
  OutputWriter out(config.output_dir);
  out.write("config.json", config.to_json().dump(2) + "\n");
  json datasets = json::array();

  for (std::uint64_t seed : config.seeds) {
    const PreparedData data = prepare_data(config, config.kind, seed);
    datasets.push_back({{"seed", seed},
                        {"n_train", data.train.x.rows()},
                        {"n_val", data.val.x.rows()},
                        {"n_test", data.test_x.rows()},
                        {"n_ood", data.ood_x.rows()},
                        {"ood_rule", data.split_rule}});
    std::map<Method, MethodRun> runs;
    std::vector<Method> order = config.methods;
    // Vanilla ensembles first; DARE may need one for its threshold.
    std::stable_partition(order.begin(), order.end(), [](Method m) { return m != Method::dare; });
    for (Method m : order) {
      double tau = config.train.tau;
      if (m == Method::dare && config.tau_delta) {
        const Method ref = reference_method(data.task);
        if (!runs.contains(ref)) {
          try {
            runs.emplace(ref, train_method(config, data, ref, seed, 0.0));
          } catch (const DivergenceError& e) {
            art.errors.push_back("reference ensemble for seed " + std::to_string(seed) + ": " + e.what());
            art.exit_code = kExitDivergence;
            continue;
          }
        }
        tau = select_tau(mean_validation_loss(runs.at(ref).training), *config.tau_delta);
      }
      try {
        runs.insert_or_assign(m, train_method(config, data, m, seed, tau));
      } catch (const DivergenceError& e) {
        art.errors.push_back(to_string(m) + " seed " + std::to_string(seed) + ": " + e.what());
        art.exit_code = kExitDivergence;
      }
    }
    for (Method m : config.methods) {
      auto it = runs.find(m);
      if (it == runs.end()) continue;
      MethodRun& run = it->second;
      record_failures(art, run);
      run.report = evaluate_method(config, data, run);
      write_method_outputs(out, fs::path(to_string(m)) / seed_dir(seed), run, data);
      art.reports.push_back(run.report);
    }
  }
  out.write("summary.csv", summary_csv(art.reports));
  out.write("summary.json", summary_json(art.reports).dump(2) + "\n");
  json manifest = base_manifest(config);
  manifest["datasets"] = datasets;
  finish(art, out, manifest);
  return art;
}

RunArtifact run_delta_sweep(const ExperimentConfig& base, const std::vector<double>& deltas,
                            std::vector<DeltaSweepRow>* rows_out) {
  ExperimentConfig config = base;
  config.kind = ExperimentKind::delta_sweep;
  config.deltas = deltas;
  config.validate();
  RunArtifact art;
  art.directory = config.output_dir;
  OutputWriter out(config.output_dir);
  out.write("config.json", config.to_json().dump(2) + "\n");

  std::vector<DeltaSweepRow> rows(deltas.size());
  for (std::size_t k = 0; k < deltas.size(); ++k) rows[k].delta = deltas[k];

  for (std::uint64_t seed : config.seeds) {
    const PreparedData data = prepare_data(config, config.sweep_dataset, seed);
    if (data.task != PreparedData::Task::regression) throw ConfigError("delta_sweep needs a regression dataset");
    MethodRun ref;
    try {
      ref = train_method(config, data, Method::de_nll, seed, 0.0);
    } catch (const DivergenceError& e) {
      art.errors.push_back("reference ensemble for seed " + std::to_string(seed) + ": " + e.what());
      art.exit_code = kExitDivergence;
      continue;
    }
    record_failures(art, ref);
    ref.report = evaluate_method(config, data, ref);
    out.write(fs::path("de_nll") / seed_dir(seed) / "report.json", ref.report.to_json().dump(2) + "\n");
    art.reports.push_back(ref.report);
    const double de_val = mean_validation_loss(ref.training);

    for (std::size_t k = 0; k < deltas.size(); ++k) {
      MethodRun run;
      try {
        run = train_method(config, data, Method::dare, seed, select_tau(de_val, deltas[k]));
      } catch (const DivergenceError& e) {
        art.errors.push_back("delta " + format_double(deltas[k]) + " seed " + std::to_string(seed) + ": " + e.what());
        art.exit_code = kExitDivergence;
        continue;
      }
      record_failures(art, run);
      run.report = evaluate_method(config, data, run);
      run.report.extras["delta"] = deltas[k];
      out.write(fs::path("dare") / ("delta_" + format_double(deltas[k])) / seed_dir(seed) / "report.json",
                run.report.to_json().dump(2) + "\n");
      const auto& id = run.report.splits.at("id_test");
      const auto& ood = run.report.splits.at("ood");
      if (id.nll) rows[k].id_nll.push_back(*id.nll);
      if (ood.nll) rows[k].ood_nll.push_back(*ood.nll);
      art.reports.push_back(run.report);
    }
  }

  auto mean_std = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = std::numeric_limits<double>::quiet_NaN();
    sd = std::numeric_limits<double>::quiet_NaN();
    if (v.empty()) return;
    mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  };
  std::ostringstream table;
  table << "delta,id_nll_mean,id_nll_std,ood_nll_mean,ood_nll_std,n_seeds\n";
  json jrows = json::array();
  for (auto& r : rows) {
    mean_std(r.id_nll, r.id_nll_mean, r.id_nll_std);
    mean_std(r.ood_nll, r.ood_nll_mean, r.ood_nll_std);
    table << format_double(r.delta) << ',' << format_double(r.id_nll_mean) << ',' << format_double(r.id_nll_std) << ','
          << format_double(r.ood_nll_mean) << ',' << format_double(r.ood_nll_std) << ',' << r.id_nll.size() << '\n';
    auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    jrows.push_back({{"delta", r.delta},
                     {"id_nll_mean", num(r.id_nll_mean)},
                     {"id_nll_std", num(r.id_nll_std)},
                     {"ood_nll_mean", num(r.ood_nll_mean)},
                     {"ood_nll_std", num(r.ood_nll_std)}});
  }
  out.write("delta_sweep.csv", table.str());
  out.write("delta_sweep.json", jrows.dump(2) + "\n");
  out.write("summary.csv", summary_csv(art.reports));
  if (rows_out) *rows_out = rows;
  json manifest = base_manifest(config);
  finish(art, out, manifest);
  return art;
}

// ---------------------------------------------------------------------------
// Water-filling verification

WaterFillProblem random_waterfill_problem(std::mt19937_64& rng, int p_max) {
  std::uniform_int_distribution<int> dim(1, p_max);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto log_uniform = [&](double lo, double hi) { return std::exp(std::log(lo) + unit(rng) * (std::log(hi) - std::log(lo))); };
  const int p = dim(rng);
  WaterFillProblem prob;
  prob.s2.resize(p);
  prob.theta_star_sq.resize(p);
  for (int k = 0; k < p; ++k) {
    prob.s2(k) = log_uniform(1e-2, 1e2);
    prob.theta_star_sq(k) = unit(rng) < 0.2 ? 0.0 : log_uniform(1e-3, 10.0);
  }
  prob.budget = log_uniform(1e-2, 10.0);
  return prob;
}

WaterfillVerifyReport run_waterfill_verify(int n_problems, int p_max, std::uint64_t seed) {
  if (n_problems < 1 || p_max < 1) throw ConfigError("waterfill verification needs problems and p_max >= 1");
  std::mt19937_64 rng(seed);
  std::vector<WaterFillProblem> problems;
  WaterFillProblem clip;
  clip.s2 = Vector::Constant(2, 1.0);
  clip.s2(1) = 0.01;
  clip.theta_star_sq = Vector::Zero(2);
  clip.theta_star_sq(0) = 4.0;
  clip.budget = 1.0;
  problems.push_back(clip);
  for (int i = 0; i < n_problems; ++i) problems.push_back(random_waterfill_problem(rng, p_max));

  WaterfillVerifyReport rep;
  rep.passed = true;
  double worst = -1.0;
  for (std::size_t i = 0; i < problems.size(); ++i) {
    WaterfillCase wc;
    wc.problem = problems[i];
    wc.closed_form = waterfill_solve(wc.problem);
    wc.kkt = kkt_residuals(wc.problem, wc.closed_form);
    try {
      const auto oracle = waterfill_oracle(wc.problem);
      wc.oracle_sigma2 = oracle.sigma2;
      wc.max_abs_diff = (oracle.sigma2 - wc.closed_form.sigma2).cwiseAbs().maxCoeff();
      wc.objective_gap = oracle.objective - waterfill_objective(wc.problem, wc.closed_form.sigma2);
    } catch (const VerificationError&) {
      wc.oracle_sigma2 = Vector::Constant(wc.problem.size(), std::numeric_limits<double>::quiet_NaN());
      wc.max_abs_diff = std::numeric_limits<double>::infinity();
    }
    const bool ok = wc.max_abs_diff < kWaterfillSigmaTolerance && wc.kkt.budget < kWaterfillBudgetTolerance &&
                    wc.kkt.complementary_slackness < kWaterfillSlacknessTolerance;
    rep.passed = rep.passed && ok;
    rep.worst_budget_residual = std::max(rep.worst_budget_residual, wc.kkt.budget);
    rep.worst_slackness = std::max(rep.worst_slackness, wc.kkt.complementary_slackness);
    rep.worst_objective_gap = std::max(rep.worst_objective_gap, wc.objective_gap);
    if (wc.max_abs_diff > worst) {
      worst = wc.max_abs_diff;
      rep.worst_index = i;
    }
    rep.cases.push_back(std::move(wc));
  }
  rep.worst_diff = worst;
  return rep;
}

json WaterfillVerifyReport::to_json(bool include_cases) const {
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  json j = {{"problems", cases.size()},
            {"passed", passed},
            {"worst_sigma2_diff", num(worst_diff)},
            {"worst_budget_residual", num(worst_budget_residual)},
            {"worst_complementary_slackness", num(worst_slackness)},
            {"worst_objective_gap", num(worst_objective_gap)},
            {"worst_index", worst_index},
            {"tolerances",
             {{"sigma2", kWaterfillSigmaTolerance},
              {"budget", kWaterfillBudgetTolerance},
              {"complementary_slackness", kWaterfillSlacknessTolerance}}}};
  if (include_cases) {
    json arr = json::array();
    for (const auto& c : cases) {
      json o = {{"problem", problem_to_json(c.problem)},
                {"closed_form", solution_to_json(c.closed_form)},
                {"max_abs_diff", num(c.max_abs_diff)},
                {"budget_residual", c.kkt.budget},
                {"complementary_slackness", c.kkt.complementary_slackness},
                {"dual_feasibility", c.kkt.dual_feasibility}};
      std::vector<json> oracle;
      for (Eigen::Index k = 0; k < c.oracle_sigma2.size(); ++k) oracle.push_back(num(c.oracle_sigma2(k)));
      o["oracle_sigma2"] = oracle;
      arr.push_back(std::move(o));
    }
    j["cases"] = std::move(arr);
  }
  return j;
}

// ---------------------------------------------------------------------------
// Layer analysis

RunArtifact run_analyze_layers(const ExperimentConfig& config, const std::optional<Matrix>& probe_points) {
  config.validate();
  if (config.kind != ExperimentKind::two_moons && config.kind != ExperimentKind::regression_1d &&
      config.kind != ExperimentKind::tabular_ood)
    throw ConfigError("analyze-layers needs a dataset experiment");
  RunArtifact art;
  art.directory = config.output_dir;
  OutputWriter out(config.output_dir);
  out.write("config.json", config.to_json().dump(2) + "\n");
  json seeds = json::array();
  for (std::uint64_t seed : config.seeds) {
    const PreparedData data = prepare_data(config, config.kind, seed);
    double tau = config.train.tau;
    if (config.tau_delta) {
      const auto ref = train_method(config, data, reference_method(data.task), seed, 0.0);
      tau = select_tau(mean_validation_loss(ref.training), *config.tau_delta);
    }
    MethodRun run;
    try {
      run = train_method(config, data, Method::dare, seed, tau);
    } catch (const DivergenceError& e) {
      art.errors.push_back("seed " + std::to_string(seed) + ": " + e.what());
      art.exit_code = kExitDivergence;
      continue;
    }
    record_failures(art, run);
    std::optional<Matrix> probes = probe_points;
    if (probes && probes->cols() != data.train.x.cols()) throw ConfigError("probe points have the wrong dimension");
    const auto analysis = internal_analysis(run.training.ensemble.members.front(), data.train.x, probes);
    json layers = json::array();
    for (std::size_t l = 0; l < analysis.layers.size(); ++l) {
      std::ostringstream os;
      analysis.write_layer_csv(l, os);
      out.write(fs::path(seed_dir(seed)) / ("layer_" + std::to_string(l) + ".csv"), os.str());
      const auto& s = analysis.layers[l];
      json entry = {{"layer", s.layer}, {"width", s.variance.size()}};
      if (s.variance.size() >= 2)
        entry["spearman_variance_vs_weight"] = spearman(to_std_vector(s.variance), to_std_vector(s.mean_abs_weight));
      layers.push_back(entry);
    }
    json seed_entry = {{"seed", seed}, {"tau", tau}, {"layers", layers}};
    out.write(fs::path(seed_dir(seed)) / "analysis.json", seed_entry.dump(2) + "\n");
    seeds.push_back(seed_entry);
  }
  json manifest = base_manifest(config);
  manifest["analysis"] = seeds;
  finish(art, out, manifest);
  return art;
}

}  // namespace dare
