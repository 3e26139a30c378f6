#include "fsod/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace fsod {

namespace {

using nlohmann::json;

}  // namespace

std::vector<MatchRecord> match_detections(const std::vector<Detection>& dets_sorted,
                                          const std::vector<Box>& gts, double thresh) {
  std::vector<char> used(gts.size(), 0);
  std::vector<MatchRecord> records;
  records.reserve(dets_sorted.size());
  for (int d = 0; d < static_cast<int>(dets_sorted.size()); ++d) {
    int best_gt = -1;
    double best_iou = -1.0;  // strict > keeps IoU ties on the lowest index
    for (int g = 0; g < static_cast<int>(gts.size()); ++g) {
      if (used[g]) continue;
      double v = iou(dets_sorted[d].box, gts[g]);
      if (v >= thresh && v > best_iou) {
        best_iou = v;
        best_gt = g;
      }
    }
    MatchRecord rec;
    rec.det_index = d;
    rec.iou_threshold = thresh;
    if (best_gt >= 0) {
      used[best_gt] = 1;
      rec.gt_index = best_gt;
      rec.is_tp = true;
    }
    records.push_back(rec);
  }
  return records;
}

double average_precision(const std::vector<MatchRecord>& records, int num_gt) {
  if (num_gt < 1) throw std::runtime_error("average_precision: num_gt must be positive");
  int tp = 0, fp = 0;
  std::vector<double> precision, recall;
  precision.reserve(records.size());
  recall.reserve(records.size());
  for (const MatchRecord& r : records) {
    if (r.is_tp) {
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(static_cast<double>(tp) / num_gt);
  }
  // Envelope: best precision at any recall >= r.
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i) {
    precision[i] = std::max(precision[i], precision[i + 1]);
  }
  double total = 0.0;
  for (int j = 0; j <= 100; ++j) {
    double r = j / 100.0;
    auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) total += precision[it - recall.begin()];
  }
  return total / 101.0;
}

EvalConfig default_eval_config() {
  EvalConfig cfg;
  for (int i = 0; i <= 9; ++i) cfg.thresholds.push_back(0.50 + 0.05 * i);
  cfg.max_dets_per_image = 100;
  return cfg;
}

EvalReport evaluate(const std::vector<Detection>& detections, const DatasetSplit& test_split,
                    const std::vector<int>& novel_class_ids, const EvalConfig& cfg) {
  std::set<int> universe(test_split.class_universe.begin(), test_split.class_universe.end());
  for (const Detection& d : detections) {
    if (!universe.count(d.category_id)) {
      throw std::runtime_error("evaluate: detection names unknown class " +
                               std::to_string(d.category_id));
    }
  }
  // class -> image -> boxes, plus totals.
  std::map<int, std::map<int, std::vector<Box>>> gt;
  std::map<int, int> gt_count;
  for (const SceneImage& img : test_split.images) {
    for (const SceneInstance& inst : img.instances) {
      gt[inst.class_id][img.image_id].push_back(inst.box);
      ++gt_count[inst.class_id];
    }
  }
  std::vector<Detection> dets = detections;
  sort_detections(dets);
  if (cfg.max_dets_per_image > 0) {
    std::map<int, int> per_image;
    std::vector<Detection> capped;
    capped.reserve(dets.size());
    for (const Detection& d : dets) {
      if (++per_image[d.image_id] <= cfg.max_dets_per_image) capped.push_back(d);
    }
    dets.swap(capped);
  }

  EvalReport report;
  report.thresholds = cfg.thresholds;
  double sum_ap = 0.0, sum_ap50 = 0.0, sum_ap75 = 0.0;
  int classes_present = 0;
  for (int class_id : test_split.class_universe) {
    auto cit = gt_count.find(class_id);
    if (cit == gt_count.end() || cit->second == 0) continue;  // absent class
    int num_gt = cit->second;
    std::vector<Detection> cls_dets;
    for (const Detection& d : dets) {
      if (d.category_id == class_id) cls_dets.push_back(d);
    }
    std::vector<double> aps;
    aps.reserve(cfg.thresholds.size());
    for (double thresh : cfg.thresholds) {
      // Greedy matching per image; records merged back in score order.
      std::map<int, std::vector<char>> used;
      std::vector<MatchRecord> records;
      records.reserve(cls_dets.size());
      const auto& per_image_gt = gt[class_id];
      for (int d = 0; d < static_cast<int>(cls_dets.size()); ++d) {
        MatchRecord rec;
        rec.det_index = d;
        rec.iou_threshold = thresh;
        auto git = per_image_gt.find(cls_dets[d].image_id);
        if (git != per_image_gt.end()) {
          const std::vector<Box>& boxes = git->second;
          std::vector<char>& flags = used[cls_dets[d].image_id];
          if (flags.empty()) flags.assign(boxes.size(), 0);
          int best_gt = -1;
          double best_iou = -1.0;
          for (int g = 0; g < static_cast<int>(boxes.size()); ++g) {
            if (flags[g]) continue;
            double v = iou(cls_dets[d].box, boxes[g]);
            if (v >= thresh && v > best_iou) {
              best_iou = v;
              best_gt = g;
            }
          }
          if (best_gt >= 0) {
            flags[best_gt] = 1;
            rec.gt_index = best_gt;
            rec.is_tp = true;
          }
        }
        records.push_back(rec);
      }
      aps.push_back(cls_dets.empty() ? 0.0 : average_precision(records, num_gt));
    }
    report.per_class_ap[class_id] = aps;
    double mean_ap = 0.0;
    for (double a : aps) mean_ap += a;
    mean_ap /= aps.size();
    sum_ap += mean_ap;
    sum_ap50 += aps.front();
    for (size_t i = 0; i < cfg.thresholds.size(); ++i) {
      if (std::abs(cfg.thresholds[i] - 0.75) < 1e-9) sum_ap75 += aps[i];
    }
    ++classes_present;
  }
  if (classes_present > 0) {
    report.ap = sum_ap / classes_present;
    report.ap50 = sum_ap50 / classes_present;
    report.ap75 = sum_ap75 / classes_present;
  }
  double novel_sum = 0.0;
  int novel_present = 0;
  for (int c : novel_class_ids) {
    auto it = report.per_class_ap.find(c);
    if (it == report.per_class_ap.end()) continue;
    double mean_ap = 0.0;
    for (double a : it->second) mean_ap += a;
    novel_sum += mean_ap / it->second.size();
    ++novel_present;
  }
  if (novel_present > 0) report.novel_map = novel_sum / novel_present;
  return report;
}

std::string report_to_json(const EvalReport& r) {
  json per_class = json::object();
  for (const auto& [class_id, aps] : r.per_class_ap) {
    per_class[std::to_string(class_id)] = aps;
  }
  json j{{"thresholds", r.thresholds}, {"per_class_ap", per_class}, {"AP", r.ap},
         {"AP50", r.ap50},             {"AP75", r.ap75},            {"novel_mAP", r.novel_map}};
  return j.dump(1);
}

std::string report_to_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "metric,value\n";
  os << "AP," << r.ap << "\n";
  os << "AP50," << r.ap50 << "\n";
  os << "AP75," << r.ap75 << "\n";
  os << "novel_mAP," << r.novel_map << "\n";
  return os.str();
}

void save_detections_jsonl(const std::string& path, const std::vector<Detection>& dets) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("detections: cannot write " + path);
  for (const Detection& d : dets) {
    json j{{"image_id", d.image_id},
           {"category_id", d.category_id},
           {"bbox", {d.box.cx, d.box.cy, d.box.w, d.box.h}},
           {"score", d.score}};
    os << j.dump() << "\n";
  }
}

std::vector<Detection> load_detections_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("detections: cannot open " + path);
  std::vector<Detection> dets;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    Detection d;
    d.image_id = j.at("image_id").get<int>();
    d.category_id = j.at("category_id").get<int>();
    auto bb = j.at("bbox").get<std::vector<double>>();
    d.box = Box{bb[0], bb[1], bb[2], bb[3]};
    d.score = j.at("score").get<double>();
    dets.push_back(d);
  }
  return dets;
}

}  // namespace fsod
