#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fsod/detector.hpp"
#include "fsod/losses.hpp"
#include "fsod/optim.hpp"
#include "fsod/synthdata.hpp"

namespace fsod {

// Name-level view of the parameter split: all linear classifier weights
// against everything else.
struct ParamPartition {
  std::vector<std::string> c_set;
  std::vector<std::string> e_set;
};

ParamPartition partition_params(const SparseDetector& model);

// Schedule-level wrapper over the model's classifier swap.
void reinit_classifiers(SparseDetector& model, const std::vector<int>& new_class_ids,
                        uint64_t seed);

enum class StageKind : uint8_t { kBase = 0, kPcf = 1, kNovel = 2 };

const char* stage_kind_name(StageKind k);

struct StagePlan {
  StageKind kind = StageKind::kBase;
  int steps = 1;
  double learning_rate = 1e-3;
  int batch_size = 4;
  uint64_t seed = 0;
  OptimConfig optim;  // learning_rate field is overridden by the plan's
  LossConfig loss;
  // Stop once the trailing window's mean loss improves on the previous
  // window by less than min_improve; 0 disables.
  int early_stop_window = 0;
  double min_improve = 0.0;
};

struct StageResult {
  StageKind kind = StageKind::kBase;
  std::vector<double> loss_curve;  // one entry per executed step
  int steps_run = 0;
  double wall_seconds = 0.0;
};

struct ProcedureResult {
  std::vector<StageResult> stages;
};

struct TrainSample {
  Tensor raster;
  std::vector<LossTarget> targets;
};

// Target class columns are resolved through the model's current class_ids;
// instances of classes the model does not predict are dropped.
std::vector<TrainSample> base_samples(const Benchmark& bench, const SparseDetector& model);
std::vector<TrainSample> support_samples(const Benchmark& bench, const SupportSet& support,
                                         const SparseDetector& model);

// Runs one fine-tuning stage with the stage's freeze mask: BASE trains all
// params, PCF only the classifier set, NOVEL all but BACKBONE_BOTTOM. All
// trainable flags are restored to true on exit.
StageResult run_stage(SparseDetector& model, const StagePlan& plan,
                      const std::vector<TrainSample>& samples);

struct TransferPlans {
  StagePlan base;
  StagePlan pcf;
  StagePlan novel;
  uint64_t reinit_seed = 0;
};

// Baseline: base training, classifier re-init onto the novel classes, novel
// fine-tuning.
ProcedureResult transfer_two_stage(SparseDetector& model, const Benchmark& bench,
                                   const SupportSet& support, const TransferPlans& plans);

// Base, re-init, classifier-only PCF on the support set, then the novel
// stage on the identical support set.
ProcedureResult transfer_three_stage(SparseDetector& model, const Benchmark& bench,
                                     const SupportSet& support, const TransferPlans& plans);

// FNV-1a over the raw value bytes of the named params, in the given order.
uint64_t params_checksum(const ParamStore& params, const std::vector<std::string>& names);

}  // namespace fsod
