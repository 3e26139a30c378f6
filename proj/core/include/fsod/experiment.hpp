#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fsod/detector.hpp"
#include "fsod/ensemble.hpp"
#include "fsod/evalmetrics.hpp"
#include "fsod/losses.hpp"
#include "fsod/optim.hpp"
#include "fsod/schedule.hpp"
#include "fsod/synthdata.hpp"

namespace fsod {

inline constexpr const char* kFsodVersion = "0.1.0";

struct StageParams {
  int steps = 1;
  double learning_rate = 1e-3;
  int batch_size = 4;
  int early_stop_window = 0;
  double min_improve = 0.0;
};

// Everything a run needs, parsed from one JSON file. All randomness flows
// from dataset_seed and the per-run seeds listed here.
struct ExperimentConfig {
  GenConfig dataset;
  uint64_t dataset_seed = 7;
  BackboneConfig backbone;
  CascadeConfig cascade;  // num_classes is derived per stage, not configured
  StageParams base_stage{600, 1e-3, 4, 0, 0.0};
  StageParams pcf_stage{2000, 1e-3, 4, 200, 1e-4};
  // Short on purpose: the novel stage only nudges a warm-started model, and
  // a long schedule here lets the cold two-stage baseline catch up.
  StageParams novel_stage{60, 1e-4, 4, 0, 0.0};
  OptimConfig optimizer;  // learning_rate comes from the stage params
  LossConfig loss;
  ReferenceTrainConfig reference;
  EnsembleConfig ensemble;
  std::vector<int> k_values{1, 5, 10};
  int ablation_k = 10;
  std::vector<uint64_t> seeds{1, 2, 3};
  double score_floor = 0.01;
  std::string out_dir = "out";

  void validate() const;
  std::string canonical_json() const;
  std::string hash() const;  // FNV-1a hex of the canonical form

  static ExperimentConfig from_json(const std::string& text);
  static ExperimentConfig from_json_file(const std::string& path);
};

// Artifact layout under the output root. FSOD_OUT overrides the configured
// directory.
struct ExperimentPaths {
  std::string root;

  std::string manifest() const { return root + "/manifest.json"; }
  std::string config_copy() const { return root + "/config.json"; }
  std::string data_dir() const { return root + "/data"; }
  std::string support(int k, uint64_t seed) const;
  std::string seed_dir(uint64_t seed) const;
  std::string base_ckpt(uint64_t seed) const;
  std::string base_metrics(uint64_t seed) const;
  std::string reference_ckpt(uint64_t seed) const;
  std::string run_dir(uint64_t seed, int k) const;
  std::string pcf_ckpt(uint64_t seed, int k) const;
  std::string pcf_metrics(uint64_t seed, int k) const;
  // procedure is "two_stage" or "three_stage"
  std::string novel_ckpt(uint64_t seed, int k, const std::string& procedure) const;
  std::string novel_metrics(uint64_t seed, int k, const std::string& procedure) const;
  std::string prototypes(uint64_t seed, int k) const;
  std::string detections(uint64_t seed, int k, const std::string& variant) const;
  std::string eval_json(uint64_t seed, int k, const std::string& variant) const;
  std::string eval_csv(uint64_t seed, int k, const std::string& variant) const;
  std::string ablation_dir(int k) const;
  std::string report_md() const { return root + "/report.md"; }
  std::string shot_curve_csv() const { return root + "/shot_curve.csv"; }
};

ExperimentPaths resolve_paths(const ExperimentConfig& cfg);

// CLI option surface: a single --seed / --k narrows a command to one run;
// otherwise commands cover the configured lists.
struct RunOptions {
  std::optional<uint64_t> seed;
  std::optional<int> k;
  bool force = false;
};

void cmd_gen_data(const ExperimentConfig& cfg, const RunOptions& opt);
void cmd_train_base(const ExperimentConfig& cfg, const RunOptions& opt);
void cmd_train_pcf(const ExperimentConfig& cfg, const RunOptions& opt);
void cmd_train_novel(const ExperimentConfig& cfg, const RunOptions& opt);
void cmd_build_prototypes(const ExperimentConfig& cfg, const RunOptions& opt);
void cmd_evaluate(const ExperimentConfig& cfg, const RunOptions& opt);
void cmd_ablate(const ExperimentConfig& cfg, const RunOptions& opt);
void cmd_report(const ExperimentConfig& cfg, const RunOptions& opt);

struct AblationCell {
  double ap = 0.0;
  double ap50 = 0.0;
  double ap75 = 0.0;
};

// Rows: baseline (two-stage), pcf (three-stage), me (two-stage rescored),
// pcf_me (three-stage rescored). All rows of one seed share the base
// checkpoint and the support set.
struct AblationMatrix {
  int k = 0;
  std::vector<uint64_t> seeds;
  std::map<std::string, std::map<uint64_t, AblationCell>> rows;
  std::map<std::string, AblationCell> medians;
  std::map<uint64_t, std::string> base_checkpoint_hash;
};

// Builds (or resumes) every cell for the given K and writes matrix.json and
// matrix.csv under the ablation directory.
AblationMatrix run_ablation(const ExperimentConfig& cfg, int k,
                            const std::vector<uint64_t>& seeds, bool force);

// Three-stage pipeline for one (seed, K), creating missing artifacts, and
// its evaluation on the test split.
EvalReport ensure_three_stage_eval(const ExperimentConfig& cfg, uint64_t seed, int k, bool force);

double median_of(std::vector<double> values);

}  // namespace fsod
