#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fsod/boxes.hpp"
#include "fsod/param.hpp"
#include "fsod/tape.hpp"

namespace fsod {

struct BackboneConfig {
  std::vector<int> block_channel_widths = {16, 32, 64};
  int pyramid_levels = 2;

  void validate() const;
};

struct CascadeConfig {
  int num_stages = 6;
  int num_proposals = 20;
  int encoding_dim = 64;
  int roi_output_size = 5;
  int num_classes = 0;
  // When true, stage i refines a gradient-detached copy of b_{i-1}.
  bool detach_boxes = false;

  void validate() const;
};

struct StageOutput {
  Var q;       // [P, d] object encodings
  Var u;       // [P, d] box features
  Var v;       // [P, d] class features
  Var boxes;   // [P, 4] normalized cxcywh, each in [0,1]
  Var logits;  // [P, num_classes]
};

struct Detection {
  int image_id = -1;
  int category_id = -1;
  double score = 0.0;
  Box box;
};

// Box area to pyramid level: the coarsest level from one quarter of the
// image upward, one level finer per quartering below that.
int choose_pyramid_level(double box_area, int num_levels);

// Whole-cell bin rectangles for max pooling; degenerate extents clamp to a
// single cell.
RoiBinGrid roi_bin_grid(const Box& box, int map_h, int map_w, int out_size);

// Max-pool over out_size x out_size bins of the box region -> [C,k,k].
Var roi_pool(Tape& t, Var map, const Box& box, int out_size);
// One bilinear sample per bin center -> [k*k, C]; differentiable in the map.
Var roi_align(Tape& t, Var map, const Box& box, int out_size);

// Cascaded sparse set-prediction detector: conv backbone with FPN neck,
// learned proposal boxes/encodings, and num_stages refinement heads. Every
// weight lives in the owned ParamStore under a stable name with its group
// tag (first two backbone blocks BACKBONE_BOTTOM, per-stage classifier
// weights CLASSIFIER, everything else OTHER).
class SparseDetector {
 public:
  SparseDetector(BackboneConfig bb, CascadeConfig cc, uint64_t seed);

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const BackboneConfig& backbone_config() const { return bb_; }
  const CascadeConfig& cascade_config() const { return cc_; }

  // Dataset category id of each logit column.
  const std::vector<int>& class_ids() const { return class_ids_; }
  void set_class_ids(std::vector<int> ids);

  // Swaps every per-stage classifier head for a fresh one over the given
  // category ids; all non-classifier params stay bitwise untouched.
  void reinit_classifiers(const std::vector<int>& new_class_ids, uint64_t seed);

  // Feature pyramid, level 0 finest; strides {4, 8} for the default config.
  std::vector<Var> backbone_forward(Tape& t, const Tensor& image);

  // One refinement stage: pool q/b interaction features, attend, decode.
  StageOutput head_stage(Tape& t, int stage, Var q_prev, Var b_prev,
                         const std::vector<Var>& pyramid);

  // All stages in sequence, each consuming the previous stage's boxes.
  std::vector<StageOutput> forward(Tape& t, const Tensor& image);

  // Final-stage sigmoid scores over all (proposal, class) pairs above the
  // floor, sorted by score descending. NMS-free.
  std::vector<Detection> detect(const Tensor& image, double score_floor = 0.01);

  // Serialization manifest fragment: configs and class ids as JSON.
  std::string manifest_json() const;
  static SparseDetector from_manifest_json(const std::string& json_text);

 private:
  void build_params(uint64_t seed);

  BackboneConfig bb_;
  CascadeConfig cc_;
  std::vector<int> class_ids_;
  ParamStore params_;
};

// Deterministic sort used everywhere detections are ranked: score
// descending, ties broken by image, class, then box coordinates.
void sort_detections(std::vector<Detection>& dets);

}  // namespace fsod
