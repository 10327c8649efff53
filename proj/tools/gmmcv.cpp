// Command-line front end: run experiments, reshape bundles for plotting.
#include <iostream>

#include <CLI11.hpp>

#include "gmmcv/errors.hpp"
#include "gmmcv/experiment.hpp"

namespace {

int run(const std::string& config_path, const std::string& out_override, int parallelism) {
  gmmcv::ExperimentConfig cfg = gmmcv::ExperimentConfig::from_file(config_path);
  if (parallelism > 0) cfg = cfg.with("parallelism", std::to_string(parallelism));
  const std::filesystem::path dir =
      out_override.empty() ? gmmcv::bundle_directory(cfg) : std::filesystem::path(out_override);
  std::cerr << "running " << cfg.experiment() << " -> " << dir.string() << "\n";
  const gmmcv::ResultBundle bundle = gmmcv::run_experiment(cfg);
  gmmcv::write_bundle(bundle, dir);
  for (const auto& f : bundle.files) std::cout << (dir / f.name).string() << "\n";
  return 0;
}

int plot(const std::string& bundle_dir, const std::string& out) {
  const gmmcv::ResultBundle bundle = gmmcv::read_bundle(bundle_dir);
  const std::string csv = gmmcv::plot_data(bundle);
  const std::filesystem::path path =
      out.empty() ? std::filesystem::path(bundle_dir) / "plot_data.csv" : std::filesystem::path(out);
  gmmcv::write_file_atomic(path, csv);
  std::cout << path.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GMM cross-validation experiments"};
  app.require_subcommand(1);

  std::string config, out_dir;
  int parallelism = 0;
  auto* run_cmd = app.add_subcommand("run", "run the experiment described by a config file");
  run_cmd->add_option("config", config, "config file")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("-o,--out", out_dir,
                      "bundle directory (default: $GMMCV_OUTPUT_ROOT/<output key>)");
  run_cmd->add_option("-j,--parallelism", parallelism, "override the parallelism key")
      ->check(CLI::Range(1, 256));

  std::string bundle_dir, plot_out;
  auto* plot_cmd = app.add_subcommand("plot-data", "write plot_data.csv for a result bundle");
  plot_cmd->add_option("bundle", bundle_dir, "bundle directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  plot_cmd->add_option("-o,--out", plot_out, "output file (default: <bundle>/plot_data.csv)");

  auto* list_cmd = app.add_subcommand("list-experiments", "list experiment names");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run_cmd) return run(config, out_dir, parallelism);
    if (*plot_cmd) return plot(bundle_dir, plot_out);
    if (*list_cmd) {
      for (const auto& name : gmmcv::experiment_names())
        std::cout << name << "\t" << gmmcv::experiment_description(name) << "\n";
      return 0;
    }
  } catch (const gmmcv::ConfigurationError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
