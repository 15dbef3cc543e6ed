#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dare/errors.hpp"
#include "dare/experiment.hpp"

namespace {

struct CommonOptions {
  std::string config_path;
  std::string preset_name;
  std::string out_dir;
  std::string seeds;
  int workers = 0;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "JSON experiment config")->check(CLI::ExistingFile);
  cmd->add_option("--preset", o.preset_name, "named preset the config is layered over");
  cmd->add_option("--out", o.out_dir, "output directory");
  cmd->add_option("--seeds", o.seeds, "comma-separated seed list, e.g. 0,1,2");
  cmd->add_option("--workers", o.workers, "parallel member trainings (falls back to DARE_LAB_WORKERS)")
      ->check(CLI::PositiveNumber);
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) throw dare::ConfigError("invalid seed '" + item + "'");
    seeds.push_back(v);
  }
  if (seeds.empty()) throw dare::ConfigError("--seeds is empty");
  return seeds;
}

dare::ExperimentConfig resolve(const CommonOptions& o, std::optional<dare::ExperimentKind> force_kind = std::nullopt) {
  std::optional<std::filesystem::path> path;
  std::optional<std::string> preset;
  if (!o.config_path.empty()) path = o.config_path;
  if (!o.preset_name.empty()) preset = o.preset_name;
  dare::ExperimentConfig c = (!path && !preset && force_kind == dare::ExperimentKind::waterfill_verify)
                                 ? dare::preset("waterfill_verify_default")
                                 : dare::load_experiment_config(path, preset);
  if (force_kind) c.kind = *force_kind;
  if (!o.out_dir.empty()) c.output_dir = o.out_dir;
  if (!o.seeds.empty()) c.seeds = parse_seeds(o.seeds);
  if (o.workers > 0) {
    c.workers = o.workers;
  } else if (const char* env = std::getenv("DARE_LAB_WORKERS")) {
    try {
      c.workers = std::stoi(env);
    } catch (const std::exception&) {
      throw dare::ConfigError("DARE_LAB_WORKERS must be a positive integer");
    }
    if (c.workers < 1) throw dare::ConfigError("DARE_LAB_WORKERS must be a positive integer");
  }
  c.validate();
  return c;
}

int report(const dare::RunArtifact& art) {
  for (const auto& e : art.errors) std::cerr << "error: " << e << '\n';
  std::cout << "wrote " << art.directory.string() << " (" << art.reports.size() << " reports, exit " << art.exit_code
            << ")\n";
  return art.exit_code;
}

dare::Matrix parse_probes(const std::string& text) {
  // "x1:y1;x2:y2" or "x;x" for one-dimensional inputs.
  std::vector<std::vector<double>> rows;
  std::stringstream ss(text);
  std::string point;
  while (std::getline(ss, point, ';')) {
    std::vector<double> row;
    std::stringstream ps(point);
    std::string v;
    while (std::getline(ps, v, ':')) {
      try {
        row.push_back(std::stod(v));
      } catch (const std::exception&) {
        throw dare::ConfigError("invalid probe coordinate '" + v + "'");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) throw dare::ConfigError("probe points differ in dimension");
    rows.push_back(row);
  }
  if (rows.empty() || rows.front().empty()) throw dare::ConfigError("--probes is empty");
  dare::Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return m;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Anti-regularized ensemble experiments"};
  app.require_subcommand(1);

  CommonOptions run_opts, sweep_opts, wf_opts, layer_opts;
  auto* run = app.add_subcommand("run", "train and evaluate the configured experiment");
  add_common(run, run_opts);

  auto* sweep = app.add_subcommand("sweep-delta", "threshold sweep over delta values");
  add_common(sweep, sweep_opts);
  std::vector<double> deltas;
  sweep->add_option("--deltas", deltas, "delta values (overrides config)")->delimiter(',');

  auto* wf = app.add_subcommand("verify-waterfill", "closed-form water-filling against the numerical oracle");
  add_common(wf, wf_opts);
  int problems = 0, p_max = 0;
  wf->add_option("--problems", problems, "number of random problems")->check(CLI::PositiveNumber);
  wf->add_option("--p-max", p_max, "largest problem dimension")->check(CLI::PositiveNumber);

  auto* layers = app.add_subcommand("analyze-layers", "per-layer activation variance against weight magnitude");
  add_common(layers, layer_opts);
  std::string probes;
  layers->add_option("--probes", probes, "probe points, e.g. \"-3:3;4:-2\"");

  auto* presets = app.add_subcommand("presets", "list the named presets");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : dare::kExitConfig;
  }

  try {
    if (*presets) {
      for (const auto& n : dare::preset_names()) std::cout << n << '\n';
      return 0;
    }
    if (*run) return report(dare::run_experiment(resolve(run_opts)));
    if (*sweep) {
      auto c = resolve(sweep_opts, dare::ExperimentKind::delta_sweep);
      if (!deltas.empty()) c.deltas = deltas;
      return report(dare::run_delta_sweep(c, c.deltas));
    }
    if (*wf) {
      auto c = resolve(wf_opts, dare::ExperimentKind::waterfill_verify);
      if (problems > 0) c.waterfill_problems = problems;
      if (p_max > 0) c.waterfill_p_max = p_max;
      const auto art = dare::run_experiment(c);
      std::cout << art.manifest["waterfill"].dump(2) << '\n';
      return report(art);
    }
    if (*layers) {
      std::optional<dare::Matrix> probe_points;
      if (!probes.empty()) probe_points = parse_probes(probes);
      return report(dare::run_analyze_layers(resolve(layer_opts), probe_points));
    }
  } catch (const dare::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return dare::kExitConfig;
  } catch (const dare::IngestionError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return dare::kExitConfig;
  } catch (const dare::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << '\n';
    return dare::kExitDivergence;
  } catch (const dare::VerificationError& e) {
    std::cerr << "verification failed: " << e.what() << '\n';
    return dare::kExitVerification;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return dare::kExitFailure;
  }
  return dare::kExitFailure;
}
