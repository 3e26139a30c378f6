#include <cstdio>
#include <exception>
#include <map>
#include <string>

#include "CLI11.hpp"

#include "fsod/experiment.hpp"

namespace {

using Command = void (*)(const fsod::ExperimentConfig&, const fsod::RunOptions&);

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot detection laboratory"};
  app.require_subcommand(1);

  static const std::map<std::string, std::pair<const char*, Command>> kCommands = {
      {"gen-data", {"generate the benchmark dataset and support sets", fsod::cmd_gen_data}},
      {"train-base", {"train the base-class detector", fsod::cmd_train_base}},
      {"train-pcf", {"classifier-only fine-tuning on the support set", fsod::cmd_train_pcf}},
      {"train-novel", {"novel-class fine-tuning", fsod::cmd_train_novel}},
      {"build-prototypes", {"train the reference extractor and build prototypes",
                            fsod::cmd_build_prototypes}},
      {"evaluate", {"detect on the test split and score", fsod::cmd_evaluate}},
      {"ablate", {"run the four-row ablation matrix", fsod::cmd_ablate}},
      {"report", {"write report.md and shot_curve.csv", fsod::cmd_report}},
  };

  std::string config_path;
  uint64_t seed_val = 0;
  int k_val = 0;
  bool force = false;
  for (const auto& [name, entry] : kCommands) {
    CLI::App* sub = app.add_subcommand(name, entry.first);
    sub->add_option("--config", config_path, "experiment config JSON")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--seed", seed_val, "restrict to one experiment seed");
    sub->add_option("--k", k_val, "restrict to one K value");
    sub->add_flag("--force", force, "recompute artifacts that already exist");
  }

  CLI11_PARSE(app, argc, argv);

  CLI::App* active = app.get_subcommands().front();
  try {
    fsod::ExperimentConfig cfg = fsod::ExperimentConfig::from_json_file(config_path);
    fsod::RunOptions opt;
    if (active->count("--seed") > 0) opt.seed = seed_val;
    if (active->count("--k") > 0) opt.k = k_val;
    opt.force = force;
    kCommands.at(active->get_name()).second(cfg, opt);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "fsod: error: %s\n", e.what());
    return 1;
  }
  return 0;
}
