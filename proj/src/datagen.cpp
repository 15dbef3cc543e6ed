#include "dare/datagen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "dare/errors.hpp"
#include "dare/io.hpp"
#include "dare/metrics.hpp"

namespace dare {

Standardizer Standardizer::fit(const Matrix& x) {
  if (x.rows() == 0) throw ConfigError("cannot fit standardization on an empty set");
  Standardizer s;
  s.means = x.colwise().mean().transpose();
  s.stds.resize(x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double var = (x.col(j).array() - s.means(j)).square().mean();
    s.stds(j) = var > 0.0 ? std::sqrt(var) : 1.0;
  }
  return s;
}

Standardizer Standardizer::identity(Eigen::Index width) {
  return {Vector::Zero(width), Vector::Ones(width)};
}

Matrix Standardizer::transform(const Matrix& x) const {
  if (x.cols() != means.size()) throw ShapeError("standardization width mismatch");
  Matrix out = x;
  out.rowwise() -= means.transpose();
  out.array().rowwise() /= stds.transpose().array();
  return out;
}

Matrix Standardizer::inverse_transform(const Matrix& x) const {
  if (x.cols() != means.size()) throw ShapeError("standardization width mismatch");
  Matrix out = x;
  out.array().rowwise() *= stds.transpose().array();
  out.rowwise() += means.transpose();
  return out;
}

void Dataset::validate() const {
  if (x.rows() == 0) throw ConfigError("dataset '" + name + "' is empty");
  if (y.rows() != x.rows()) throw ShapeError("dataset '" + name + "': feature and target rows differ");
  if (standardization.means.size() != x.cols() || standardization.stds.size() != x.cols())
    throw ShapeError("dataset '" + name + "': standardization stats do not match feature count");
  if (!labels.empty() && static_cast<Eigen::Index>(labels.size()) != x.rows())
    throw ShapeError("dataset '" + name + "': label count differs from row count");
}

Dataset Dataset::subset(const std::vector<Eigen::Index>& rows) const {
  Dataset out;
  out.name = name;
  out.feature_names = feature_names;
  out.target_names = target_names;
  out.standardization = standardization;
  out.x.resize(static_cast<Eigen::Index>(rows.size()), x.cols());
  out.y.resize(static_cast<Eigen::Index>(rows.size()), y.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.x.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
    out.y.row(static_cast<Eigen::Index>(i)) = y.row(rows[i]);
    if (!labels.empty()) out.labels.push_back(labels[static_cast<std::size_t>(rows[i])]);
  }
  return out;
}

Dataset two_moons(int n, double noise, std::uint64_t seed) {
  if (n < 2 || n % 2 != 0) throw ConfigError("two_moons needs a positive even number of points");
  if (!(noise >= 0.0)) throw ConfigError("two_moons noise must be non-negative");
  const int half = n / 2;
  Dataset d;
  d.name = "two_moons";
  d.x.resize(n, 2);
  d.y.resize(n, 1);
  d.labels.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < half; ++i) {
    const double t = half == 1 ? 0.0 : std::numbers::pi * i / (half - 1);
    d.x(i, 0) = std::cos(t);
    d.x(i, 1) = std::sin(t);
    d.y(i, 0) = 0.0;
    d.labels[static_cast<std::size_t>(i)] = 0;
    d.x(half + i, 0) = 1.0 - std::cos(t);
    d.x(half + i, 1) = 0.5 - std::sin(t);
    d.y(half + i, 0) = 1.0;
    d.labels[static_cast<std::size_t>(half + i)] = 1;
  }
  if (noise > 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, noise);
    for (int i = 0; i < n; ++i) {
      d.x(i, 0) += gauss(rng);
      d.x(i, 1) += gauss(rng);
    }
  }
  d.feature_names = {"x1", "x2"};
  d.target_names = {"label"};
  d.standardization = Standardizer::identity(2);
  return d;
}

void Regression1dConfig::validate() const {
  if (!(support_lo < gap_lo && gap_lo < gap_hi && gap_hi < support_hi))
    throw ConfigError("regression_1d intervals must satisfy lo < gap_lo < gap_hi < hi");
  if (noise_a < 0.0 || noise_b < 0.0) throw ConfigError("regression_1d noise scales must be non-negative");
}

double Regression1dConfig::distance_to_support(double x) const {
  if (x < support_lo) return support_lo - x;
  if (x > support_hi) return x - support_hi;
  if (x > gap_lo && x < gap_hi) return std::min(x - gap_lo, gap_hi - x);
  return 0.0;
}

double regression_1d_mean(double x) { return x * std::sin(x); }

namespace {

void fill_targets(const Matrix& x, std::mt19937_64& rng, const Regression1dConfig& c, Matrix& y) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  y.resize(x.rows(), 1);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double e1 = gauss(rng);
    const double e2 = gauss(rng);
    const double xi = x(i, 0);
    y(i, 0) = regression_1d_mean(xi) + c.noise_a * e1 + c.noise_b * xi * e2;
  }
}

}  // namespace

Dataset regression_1d(int n, std::uint64_t seed, const Regression1dConfig& config) {
  if (n < 2) throw ConfigError("regression_1d needs at least 2 points");
  config.validate();
  const double left = config.gap_lo - config.support_lo;
  const double right = config.support_hi - config.gap_hi;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, left + right);
  Dataset d;
  d.name = "regression_1d";
  d.x.resize(n, 1);
  for (int i = 0; i < n; ++i) {
    const double u = unit(rng);
    d.x(i, 0) = u < left ? config.support_lo + u : config.gap_hi + (u - left);
  }
  fill_targets(d.x, rng, config, d.y);
  d.feature_names = {"x"};
  d.target_names = {"y"};
  d.standardization = Standardizer::identity(1);
  return d;
}

Matrix regression_1d_targets(const Matrix& x, std::uint64_t seed, const Regression1dConfig& config) {
  if (x.cols() != 1) throw ShapeError("regression_1d inputs must have one column");
  std::mt19937_64 rng(seed);
  Matrix y;
  fill_targets(x, rng, config, y);
  return y;
}

std::pair<std::vector<std::string>, std::vector<std::vector<std::string>>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  std::size_t line = 1;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (in_quotes) {
      if (ch == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        if (ch == '\n') ++line;
        field += ch;
      }
      continue;
    }
    switch (ch) {
      case '"':
        if (!field.empty()) throw IngestionError("stray quote in unquoted field at line " + std::to_string(line));
        in_quotes = true;
        field_started = true;
        break;
      case ',':
        record.push_back(std::move(field));
        field.clear();
        field_started = true;
        break;
      case '\r':
        break;
      case '\n':
        if (field_started || !field.empty() || !record.empty()) {
          record.push_back(std::move(field));
          records.push_back(std::move(record));
        }
        field.clear();
        record.clear();
        field_started = false;
        ++line;
        break;
      default:
        field += ch;
        field_started = true;
    }
  }
  if (in_quotes) throw IngestionError("unterminated quoted field");
  if (field_started || !field.empty() || !record.empty()) {
    record.push_back(std::move(field));
    records.push_back(std::move(record));
  }
  if (records.empty()) throw IngestionError("CSV input has no header row");
  auto header = std::move(records.front());
  records.erase(records.begin());
  return {std::move(header), std::move(records)};
}

namespace {

double parse_number(const std::string& raw, std::size_t row, const std::string& column) {
  std::string s = raw;
  const auto b = s.find_first_not_of(" \t");
  const auto e = s.find_last_not_of(" \t");
  s = b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  double v = 0.0;
  const auto* first = s.data();
  const auto* last = s.data() + s.size();
  if (!s.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (s.empty() || ec != std::errc() || ptr != last)
    throw IngestionError("non-numeric value '" + raw + "' in column '" + column + "' at data row " +
                         std::to_string(row + 1));
  return v;
}

}  // namespace

Dataset load_csv(const std::string& path, const std::vector<std::string>& target_cols, bool standardize) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open CSV file '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  auto [header, rows] = parse_csv(buffer.str());
  if (rows.empty()) throw IngestionError("CSV file '" + path + "' has no data rows");

  std::vector<int> target_idx;
  for (const auto& t : target_cols) {
    const auto it = std::find(header.begin(), header.end(), t);
    if (it == header.end()) throw IngestionError("target column '" + t + "' not found in '" + path + "'");
    target_idx.push_back(static_cast<int>(it - header.begin()));
  }
  std::vector<int> feature_idx;
  for (int j = 0; j < static_cast<int>(header.size()); ++j)
    if (std::find(target_idx.begin(), target_idx.end(), j) == target_idx.end()) feature_idx.push_back(j);
  if (feature_idx.empty()) throw IngestionError("CSV file '" + path + "' has no feature columns");

  Dataset d;
  d.name = path;
  const auto n = static_cast<Eigen::Index>(rows.size());
  d.x.resize(n, static_cast<Eigen::Index>(feature_idx.size()));
  d.y.resize(n, static_cast<Eigen::Index>(target_idx.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != header.size())
      throw IngestionError("data row " + std::to_string(r + 1) + " has " + std::to_string(rows[r].size()) +
                           " fields, header has " + std::to_string(header.size()));
    for (std::size_t f = 0; f < feature_idx.size(); ++f) {
      const auto c = static_cast<std::size_t>(feature_idx[f]);
      d.x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(f)) = parse_number(rows[r][c], r, header[c]);
    }
    for (std::size_t t = 0; t < target_idx.size(); ++t) {
      const auto c = static_cast<std::size_t>(target_idx[t]);
      d.y(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(t)) = parse_number(rows[r][c], r, header[c]);
    }
  }
  for (int j : feature_idx) d.feature_names.push_back(header[static_cast<std::size_t>(j)]);
  d.target_names = target_cols;
  if (standardize) {
    d.standardization = Standardizer::fit(d.x);
    d.x = d.standardization.transform(d.x);
  } else {
    d.standardization = Standardizer::identity(d.x.cols());
  }
  return d;
}

namespace {

std::string quote_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

void write_csv(const std::string& path, const Dataset& dataset) {
  std::ostringstream os;
  const auto feature_names = dataset.feature_names.size() == static_cast<std::size_t>(dataset.x.cols())
                                 ? dataset.feature_names
                                 : std::vector<std::string>{};
  for (Eigen::Index j = 0; j < dataset.x.cols(); ++j) {
    if (j > 0) os << ',';
    os << quote_field(feature_names.empty() ? "x" + std::to_string(j) : feature_names[static_cast<std::size_t>(j)]);
  }
  for (Eigen::Index j = 0; j < dataset.y.cols(); ++j) {
    const bool named = dataset.target_names.size() == static_cast<std::size_t>(dataset.y.cols());
    os << ',' << quote_field(named ? dataset.target_names[static_cast<std::size_t>(j)] : "y" + std::to_string(j));
  }
  os << '\n';
  for (Eigen::Index i = 0; i < dataset.x.rows(); ++i) {
    for (Eigen::Index j = 0; j < dataset.x.cols(); ++j) os << (j > 0 ? "," : "") << format_double(dataset.x(i, j));
    for (Eigen::Index j = 0; j < dataset.y.cols(); ++j) os << ',' << format_double(dataset.y(i, j));
    os << '\n';
  }
  write_file_atomic(path, os.str());
}

Dataset as_classification(Dataset dataset) {
  if (dataset.y.cols() != 1) throw ConfigError("classification needs exactly one label column");
  dataset.labels.clear();
  for (Eigen::Index i = 0; i < dataset.y.rows(); ++i) {
    const double v = dataset.y(i, 0);
    if (v < 0.0 || v != std::floor(v)) throw IngestionError("class labels must be non-negative integers");
    dataset.labels.push_back(static_cast<int>(v));
  }
  return dataset;
}

OodSplit feature_shift_split(const Dataset& dataset, int feature, double quantile) {
  dataset.validate();
  if (!(quantile > 0.0 && quantile < 1.0)) throw ConfigError("quantile must lie in (0, 1)");
  if (feature < 0 || feature >= dataset.x.cols()) throw ConfigError("shift feature index out of range");
  const Matrix raw = dataset.standardization.inverse_transform(dataset.x);
  const Vector col = raw.col(feature);
  if (col.maxCoeff() == col.minCoeff()) throw ConfigError("cannot split on a constant feature");

  OodSplit split;
  split.threshold = empirical_quantile(to_std_vector(col), quantile);
  std::vector<Eigen::Index> id_rows, ood_rows;
  for (Eigen::Index i = 0; i < raw.rows(); ++i) (col(i) <= split.threshold ? id_rows : ood_rows).push_back(i);
  if (id_rows.empty() || ood_rows.empty()) throw ConfigError("feature shift split produced an empty part");

  Dataset raw_set = dataset;
  raw_set.x = raw;
  raw_set.standardization = Standardizer::identity(raw.cols());
  split.in_distribution = raw_set.subset(id_rows);
  split.out_of_distribution = raw_set.subset(ood_rows);
  const Standardizer stats = Standardizer::fit(split.in_distribution.x);
  for (Dataset* part : {&split.in_distribution, &split.out_of_distribution}) {
    part->x = stats.transform(part->x);
    part->standardization = stats;
  }
  split.in_distribution.name = dataset.name + "[id]";
  split.out_of_distribution.name = dataset.name + "[ood]";
  std::ostringstream rule;
  rule << "feature " << feature << " <= quantile " << quantile << " (" << format_double(split.threshold)
       << ") is in-distribution";
  split.split_rule = rule.str();
  return split;
}

TrainValTest split_dataset(const Dataset& dataset, double train_fraction, double val_fraction,
                           std::uint64_t seed) {
  if (train_fraction <= 0.0 || val_fraction < 0.0 || train_fraction + val_fraction > 1.0)
    throw ConfigError("invalid split fractions");
  const auto n = static_cast<std::size_t>(dataset.size());
  std::vector<Eigen::Index> idx(n);
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n))));
  TrainValTest out;
  out.train = dataset.subset({idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train)});
  out.val = dataset.subset({idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                            idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val)});
  out.test = dataset.subset({idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end()});
  return out;
}

Matrix eval_grid(const std::vector<std::pair<double, double>>& bounds, const std::vector<int>& resolution) {
  if (bounds.empty() || bounds.size() > 2) throw ConfigError("eval_grid supports 1-D or 2-D bounds");
  if (resolution.size() != bounds.size()) throw ConfigError("eval_grid needs one resolution per axis");
  std::vector<std::vector<double>> axes;
  for (std::size_t a = 0; a < bounds.size(); ++a) {
    const auto [lo, hi] = bounds[a];
    if (!(lo < hi)) throw ConfigError("eval_grid bounds are inverted or empty");
    if (resolution[a] < 2) throw ConfigError("eval_grid resolution must be at least 2");
    std::vector<double> axis(static_cast<std::size_t>(resolution[a]));
    for (int i = 0; i < resolution[a]; ++i)
      axis[static_cast<std::size_t>(i)] = lo + (hi - lo) * static_cast<double>(i) / (resolution[a] - 1);
    axes.push_back(std::move(axis));
  }
  if (axes.size() == 1) return Eigen::Map<const Vector>(axes[0].data(), static_cast<Eigen::Index>(axes[0].size()));
  Matrix grid(static_cast<Eigen::Index>(axes[0].size() * axes[1].size()), 2);
  Eigen::Index r = 0;
  for (double a : axes[0])
    for (double b : axes[1]) {
      grid(r, 0) = a;
      grid(r, 1) = b;
      ++r;
    }
  return grid;
}

Matrix ring_points(double cx, double cy, double radius, int count) {
  if (count < 1) throw ConfigError("ring needs at least one point");
  Matrix pts(count, 2);
  for (int i = 0; i < count; ++i) {
    const double t = 2.0 * std::numbers::pi * i / count;
    pts(i, 0) = cx + radius * std::cos(t);
    pts(i, 1) = cy + radius * std::sin(t);
  }
  return pts;
}

Vector nearest_distance(const Matrix& queries, const Matrix& reference) {
  if (queries.cols() != reference.cols()) throw ShapeError("nearest_distance: dimension mismatch");
  if (reference.rows() == 0) throw ConfigError("nearest_distance: empty reference set");
  Vector d(queries.rows());
  for (Eigen::Index i = 0; i < queries.rows(); ++i)
    d(i) = std::sqrt((reference.rowwise() - queries.row(i)).rowwise().squaredNorm().minCoeff());
  return d;
}

nlohmann::json dataset_manifest(const Dataset& d, const std::string& source, const std::string& split_rule,
                                std::uint64_t seed) {
  return {{"name", d.name},
          {"source", source},
          {"split_rule", split_rule},
          {"seed", seed},
          {"n", d.size()},
          {"features", d.x.cols()},
          {"targets", d.y.cols()}};
}

}  // namespace dare
