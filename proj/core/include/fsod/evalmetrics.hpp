#pragma once

#include <map>
#include <string>
#include <vector>

#include "fsod/boxes.hpp"
#include "fsod/detector.hpp"
#include "fsod/synthdata.hpp"

namespace fsod {

struct MatchRecord {
  int det_index = -1;  // position in the score-ordered detection list
  int gt_index = -1;   // matched ground truth, -1 for a false positive
  bool is_tp = false;
  double iou_threshold = 0.0;
};

// Greedy matching of score-ordered same-class, same-image detections:
// each detection takes the unmatched ground truth of highest IoU >= thresh
// (IoU ties resolved to the lowest ground-truth index).
std::vector<MatchRecord> match_detections(const std::vector<Detection>& dets_sorted,
                                          const std::vector<Box>& gts, double thresh);

// 101-point interpolated AP over the precision envelope. Records must be in
// score-descending order; num_gt must be positive (zero-GT classes are the
// caller's skip case).
double average_precision(const std::vector<MatchRecord>& records, int num_gt);

struct EvalReport {
  std::vector<double> thresholds;
  // class id -> AP per threshold; only classes with ground truth appear.
  std::map<int, std::vector<double>> per_class_ap;
  double ap = 0.0;    // mean over classes and thresholds
  double ap50 = 0.0;  // mean over classes at IoU 0.50
  double ap75 = 0.0;
  double novel_map = 0.0;  // mean over the novel subset
};

struct EvalConfig {
  std::vector<double> thresholds;  // defaults to 0.50:0.05:0.95
  int max_dets_per_image = 100;
};

EvalConfig default_eval_config();

// Detections must carry image ids matching the split; a detection naming a
// class outside the universe is an error.
EvalReport evaluate(const std::vector<Detection>& detections, const DatasetSplit& test_split,
                    const std::vector<int>& novel_class_ids, const EvalConfig& cfg);

std::string report_to_json(const EvalReport& r);
std::string report_to_csv(const EvalReport& r);

// One JSON object per line: {image_id, category_id, bbox, score}.
void save_detections_jsonl(const std::string& path, const std::vector<Detection>& dets);
std::vector<Detection> load_detections_jsonl(const std::string& path);

}  // namespace fsod
