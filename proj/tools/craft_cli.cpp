// Command-line experiment runner.
//
//   craft_cli --config configs/phi4.yaml --desk-scale --mode pimh --seed 3 --out runs/phi4

#include "craft/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"Annealed flow transport experiments"};
  std::string config_path, mode, out;
  std::uint64_t seed = 0;
  bool desk_scale = false, print_config = false, quiet = false;
  app.add_option("-c,--config", config_path, "experiment config (YAML)")->required()->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("-s,--seed", seed, "override the config seed");
  app.add_option("-m,--mode", mode, "override the mode")
      ->check(CLI::IsMember({"train", "deploy", "pimh", "baselines", "gold-standard", "calibrate"}));
  app.add_option("-o,--out", out, "output directory (default $CRAFT_OUTPUT_ROOT/<name>)");
  app.add_flag("--desk-scale", desk_scale, "apply the config's desk_scale overlay");
  app.add_flag("--print-config", print_config, "print the effective config and exit");
  app.add_flag("-q,--quiet", quiet, "no progress output");
  CLI11_PARSE(app, argc, argv);

  craft::ParseOptions opts;
  opts.desk_scale = desk_scale;
  if (*seed_opt) opts.overrides.emplace_back("seed", std::to_string(seed));
  if (!mode.empty()) opts.overrides.emplace_back("mode", mode);
  if (!out.empty()) opts.overrides.emplace_back("output_dir", '"' + out + '"');

  craft::ExperimentConfig cfg;
  try {
    cfg = craft::load_config(config_path, opts);
  } catch (const std::exception& e) {
    std::cerr << config_path << ": " << e.what() << '\n';
    return 2;
  }
  if (print_config) {
    std::cout << craft::to_text(cfg);
    return 0;
  }
  const auto res = craft::run_experiment(cfg, quiet ? nullptr : &std::cerr);
  if (res.status != 0) {
    std::cerr << "error: " << res.error << '\n';
    return res.status;
  }
  if (!quiet) std::cerr << "wrote " << res.output_dir.string() << '\n';
  return 0;
}
