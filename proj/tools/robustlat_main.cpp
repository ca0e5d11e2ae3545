#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "robustlat/harness.hpp"
#include "robustlat/parallel.hpp"

int main(int argc, char** argv) {
  using namespace robustlat;

  CLI::App app{"Latent-perturbation tokenizer experiments"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  std::string config_path;
  std::string checkpoint;
  std::string out_dir;
  std::optional<std::uint64_t> seed;

  const char* commands[][2] = {
      {"gen-data", "Generate the synthetic image corpus"},
      {"train", "Train the toy tokenizer (resume with --checkpoint)"},
      {"eval", "Compute rFID and pFID for a checkpoint"},
      {"ablate", "Train and evaluate the configured variant x seed grid"},
      {"analyze", "Export codebook usage, elbow, projection and Lipschitz reports"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--checkpoint", checkpoint, "Tokenizer checkpoint");
    sub->add_option("--out", out_dir, "Output directory (overrides paths.output_dir)");
    sub->add_option("--seed", seed, "Root seed (overrides the config)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    ExperimentConfig cfg = load_config(config_path, seed);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    RunOptions opt;
    opt.threads = default_thread_count();
    if (!checkpoint.empty()) opt.checkpoint = checkpoint;

    RunResult result;
    if (command == "gen-data") result = cmd_gen_data(cfg, opt);
    else if (command == "train") result = cmd_train(cfg, opt);
    else if (command == "eval") result = cmd_eval(cfg, opt);
    else if (command == "ablate") result = cmd_ablate(cfg, opt);
    else result = cmd_analyze(cfg, opt);
    std::cout << result.run_dir.string() << '\n';
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "robustlat " << command << ": " << e.what() << '\n';
    return exit_code_for(e);
  }
}
