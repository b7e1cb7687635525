#include <CLI11.hpp>
#include <fstream>
#include <iostream>

#include "lungcad/common.hpp"
#include "lungcad/nvol.hpp"
#include "lungcad/pipeline.hpp"

using namespace lungcad;

int main(int argc, char** argv) {
  CLI::App app{"Lung nodule CAD pipeline"};
  app.require_subcommand(0, 1);
  app.fallthrough();
  std::string config_path, out_dir = "lungcad_out";
  std::optional<std::uint64_t> seed;
  int threads = 0;
  bool quiet = false;
  app.add_option("--config", config_path, "JSON configuration merged over the defaults")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Override the configured seed");
  app.add_option("--threads", threads, "Worker threads (0 = hardware concurrency)")->check(CLI::NonNegativeNumber);
  app.add_option("--out-dir", out_dir, "Root for relative output paths");
  app.add_flag("-q,--quiet", quiet, "Suppress progress messages");
  bool dump = false;
  app.add_flag("--print-config", dump, "Print the merged configuration and exit");

  const char* help[] = {"Generate a phantom corpus",
                        "Segment lungs and normalize every view",
                        "Train the detector at each scale with hard-negative mining",
                        "Sliding-window probability maps for held-out scans",
                        "FROC curves and average sensitivity",
                        "Cross-validated malignancy regression and final model",
                        "Per-nodule feature tables from the regressor",
                        "Cross-validated SVM classification",
                        "Permutation tests and paired t-test"};
  std::vector<CLI::App*> subs;
  for (std::size_t i = 0; i < command_names().size(); ++i)
    subs.push_back(app.add_subcommand(command_names()[i], help[i]));
  CLI11_PARSE(app, argc, argv);

  try {
    nlohmann::json user = nlohmann::json::object();
    if (!config_path.empty()) user = nlohmann::json::parse(read_text_file(config_path));
    if (seed) user["seed"] = *seed;
    PipelineConfig cfg = PipelineConfig::from_json(user, out_dir);
    if (!quiet) cfg.log = &std::cerr;
    if (threads > 0) set_num_threads(threads);
    if (dump) {
      std::cout << cfg.values.dump(2) << "\n";
      return 0;
    }
    if (app.get_subcommands().empty()) {
      std::cerr << app.help();
      return 2;
    }
    for (CLI::App* sub : subs)
      if (sub->parsed()) std::cout << run_command(sub->get_name(), cfg).dump(2) << "\n";
  } catch (const std::exception& e) {
    std::cerr << "lungcad: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
