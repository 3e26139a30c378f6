#pragma once

#include <vector>

#include "fsod/boxes.hpp"
#include "fsod/detector.hpp"
#include "fsod/tape.hpp"

namespace fsod {

struct LossConfig {
  double lambda_cls = 2.0;
  double lambda_l1 = 5.0;
  double lambda_giou = 2.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double smooth_l1_beta = 0.1;
};

// Ground truth as seen by the loss: class_col indexes the logit column
// (callers translate dataset category ids through the detector's class_ids).
struct LossTarget {
  int class_col = 0;
  Box box;
};

// Differentiable GIoU of each predicted box row against its target box.
// boxes is [n,4] cxcywh; result [n] with entries in (-1, 1].
Var giou_pairs(Tape& t, Var boxes, const std::vector<Box>& targets);

// Matching cost for one (proposal, target) pair; mirrors the loss terms.
double match_cost(double class_prob, const Box& pred, const Box& target, const LossConfig& cfg);

// Per-stage Hungarian assignment + focal classification over all proposals
// + smooth-L1 and GIoU over matched pairs, summed across stages, each stage
// normalized by max(1, num targets). Empty targets reduce to the all-
// background classification loss.
Var set_loss(Tape& t, const std::vector<StageOutput>& stages,
             const std::vector<LossTarget>& targets, const LossConfig& cfg);

}  // namespace fsod
