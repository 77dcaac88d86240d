// SPDX-License-Identifier: Apache-2.0
//
// fftmoe: run, sweep and compare federated MoE-adapter fine-tuning experiments.
//
// Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fftmoe/config.hpp"
#include "fftmoe/experiment.hpp"

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

struct ConfigArgs {
  std::string preset;
  std::vector<std::string> values;
  std::vector<CLI::Option*> options;
};

void add_config_flags(CLI::App* app, ConfigArgs& args) {
  app->add_option("--preset", args.preset, "Named preset applied before the config file")
      ->check(CLI::IsMember(fftmoe::preset_names()));
  const auto& keys = fftmoe::config_keys();
  args.values.resize(keys.size());
  fftmoe::ExperimentConfig defaults;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    args.options.push_back(app->add_option("--" + keys[i].name, args.values[i], "default: " + keys[i].get(defaults))
                               ->group("Config overrides"));
  }
}

// defaults < FFTMOE_OUTPUT_ROOT < preset < config file < flags
fftmoe::ExperimentConfig resolve_config(const ConfigArgs& args, const std::string& file) {
  fftmoe::ExperimentConfig cfg;
  if (const char* root = std::getenv("FFTMOE_OUTPUT_ROOT"); root && *root) cfg.output.root = root;
  if (!args.preset.empty()) fftmoe::apply_preset(cfg, args.preset);
  if (!file.empty()) fftmoe::apply_config_file(cfg, file);
  const auto& keys = fftmoe::config_keys();
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (args.options[i]->count() > 0) fftmoe::set_config_value(cfg, keys[i].name, args.values[i]);
  }
  fftmoe::validate(cfg);
  return cfg;
}

int cmd_run(const ConfigArgs& args, const std::string& file) {
  const fftmoe::ExperimentConfig cfg = resolve_config(args, file);
  const std::string dir = fftmoe::make_run_dir(cfg.output.root, "run-", cfg);
  std::cerr << "run directory: " << dir << "\n";
  const auto result = fftmoe::run_experiment(cfg, dir);
  for (const auto& r : result.reports) {
    std::cerr << "round " << r.round_index << "  accuracy " << fftmoe::format_real(r.accuracy, 4) << "  mean_util_kl "
              << fftmoe::format_real(r.mean_util_kl, 4) << "\n";
  }
  std::cout << dir << "\n";
  return 0;
}

int cmd_sweep(const ConfigArgs& args, const std::string& file, const std::string& spec_path) {
  const fftmoe::ExperimentConfig base = resolve_config(args, file);
  const auto axes = fftmoe::parse_sweep_spec(fftmoe::read_text_file(spec_path));
  const std::string dir = fftmoe::make_run_dir(base.output.root, "sweep-", base);
  std::cerr << "sweep directory: " << dir << "\n";
  const auto rows = fftmoe::run_sweep(base, axes, dir, &std::cerr);
  std::cout << (std::filesystem::path(dir) / "summary.csv").string() << "\n";
  for (const auto& r : rows) {
    if (r.status != "ok") return kExitRuntime;
  }
  return 0;
}

int cmd_compare(const std::vector<std::string>& dirs, const std::string& out_path) {
  std::vector<std::string> warnings;
  if (out_path.empty() || out_path == "-") {
    warnings = fftmoe::compare_runs(dirs, std::cout);
  } else {
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw fftmoe::IoError("cannot write '" + out_path + "'");
    warnings = fftmoe::compare_runs(dirs, out);
  }
  for (const std::string& w : warnings) std::cerr << "warning: " << w << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated fine-tuning of a frozen transformer with mixture-of-experts adapters"};
  app.require_subcommand(1);

  ConfigArgs run_args;
  std::string run_file;
  CLI::App* run = app.add_subcommand("run", "Run one experiment into a fresh run directory");
  run->add_option("config", run_file, "Config file (key = value lines)")->check(CLI::ExistingFile);
  add_config_flags(run, run_args);

  ConfigArgs sweep_args;
  std::string sweep_file, sweep_spec;
  CLI::App* sweep = app.add_subcommand("sweep", "Run the cross product of a sweep spec over a base config");
  sweep->add_option("config", sweep_file, "Base config file")->required()->check(CLI::ExistingFile);
  sweep->add_option("spec", sweep_spec, "Sweep spec file")->required()->check(CLI::ExistingFile);
  add_config_flags(sweep, sweep_args);

  std::vector<std::string> compare_dirs;
  std::string compare_out;
  CLI::App* compare = app.add_subcommand("compare", "Merge the per-round global metrics of several runs");
  compare->add_option("runs", compare_dirs, "Run directories")->required();
  compare->add_option("-o,--output", compare_out, "Output CSV (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) return cmd_run(run_args, run_file);
    if (*sweep) return cmd_sweep(sweep_args, sweep_file, sweep_spec);
    if (*compare) return cmd_compare(compare_dirs, compare_out);
  } catch (const fftmoe::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}
