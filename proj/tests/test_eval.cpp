#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <vector>

#include "fsod/boxes.hpp"
#include "fsod/evalmetrics.hpp"
#include "fsod/rng.hpp"
#include "fsod/synthdata.hpp"

using namespace fsod;

namespace {

Detection det(int image, int cls, double score, Box b) {
  Detection d;
  d.image_id = image;
  d.category_id = cls;
  d.score = score;
  d.box = b;
  return d;
}

SceneImage scene(int image_id, std::vector<std::pair<int, Box>> insts) {
  SceneImage img;
  img.image_id = image_id;
  for (auto& [cls, box] : insts) {
    SceneInstance inst;
    inst.class_id = cls;
    inst.box = box;
    img.instances.push_back(inst);
  }
  return img;
}

DatasetSplit split_of(std::vector<int> universe, std::vector<SceneImage> images) {
  DatasetSplit s;
  s.role = SplitRole::kTest;
  s.class_universe = std::move(universe);
  s.images = std::move(images);
  return s;
}

MatchRecord rec(bool tp) {
  MatchRecord r;
  r.is_tp = tp;
  return r;
}

const Box kUnit{0.5, 0.5, 0.4, 0.4};
const Box kFar{0.1, 0.1, 0.05, 0.05};  // IoU 0 with kUnit

}  // namespace

TEST_CASE("interpolated precision fixtures") {
  CHECK(average_precision({rec(true)}, 1) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(average_precision({rec(false), rec(true)}, 1) == doctest::Approx(0.5).epsilon(1e-9));
  // A trailing false positive never erodes the envelope at full recall.
  CHECK(average_precision({rec(true), rec(false)}, 1) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(average_precision({rec(true)}, 2) == doctest::Approx(51.0 / 101.0).epsilon(1e-9));
  CHECK(average_precision({rec(true), rec(false), rec(true)}, 2) ==
        doctest::Approx((51.0 + 50.0 * (2.0 / 3.0)) / 101.0).epsilon(1e-9));
  CHECK(average_precision({rec(false), rec(false)}, 3) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(average_precision({}, 2) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(average_precision({rec(true), rec(true)}, 2) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK_THROWS_WITH_AS(average_precision({rec(true)}, 0), doctest::Contains("must be positive"),
                       std::runtime_error);
}

TEST_CASE("greedy matching takes the best free ground truth") {
  std::vector<Detection> dets = {det(0, 7, 0.9, kUnit), det(0, 7, 0.8, kUnit)};
  std::vector<Box> gts = {kUnit};
  std::vector<MatchRecord> m = match_detections(dets, gts, 0.5);
  REQUIRE(m.size() == 2);
  CHECK(m[0].is_tp);
  CHECK(m[0].gt_index == 0);
  CHECK_FALSE(m[1].is_tp);  // the only ground truth is already consumed

  // Equal IoU against duplicated ground truths resolves to the lowest index.
  std::vector<MatchRecord> tie = match_detections({det(0, 7, 0.9, kUnit)}, {kUnit, kUnit}, 0.5);
  CHECK(tie[0].gt_index == 0);

  // The higher-IoU ground truth wins even when listed second.
  Box near{0.5, 0.5, 0.38, 0.38};
  std::vector<MatchRecord> pick =
      match_detections({det(0, 7, 0.9, near)}, {Box{0.3, 0.5, 0.4, 0.4}, kUnit}, 0.3);
  CHECK(pick[0].gt_index == 1);
}

TEST_CASE("a detection at exactly the threshold counts as a true positive") {
  // inter 0.125, union 0.25: IoU is exactly 0.5 in binary arithmetic.
  Box gt{0.25, 0.25, 0.5, 0.5};
  Box half{0.25, 0.125, 0.5, 0.25};
  CHECK(iou(half, gt) == 0.5);
  CHECK(match_detections({det(0, 7, 0.9, half)}, {gt}, 0.50)[0].is_tp);
  CHECK_FALSE(match_detections({det(0, 7, 0.9, half)}, {gt}, 0.55)[0].is_tp);

  DatasetSplit test = split_of({7}, {scene(0, {{7, gt}})});
  EvalConfig cfg;
  cfg.thresholds = {0.50};
  EvalReport r = evaluate({det(0, 7, 0.9, half)}, test, {7}, cfg);
  CHECK(r.ap50 == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("an oracle detector scores perfectly at every threshold") {
  RngStream rng(21);
  std::vector<SceneImage> images;
  std::vector<Detection> dets;
  for (int i = 0; i < 6; ++i) {
    std::vector<std::pair<int, Box>> insts;
    for (int j = 0; j < 3; ++j) {
      Box b{rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.1, 0.3),
            rng.uniform(0.1, 0.3)};
      int cls = 7 + static_cast<int>(rng.uniform_int(3));
      insts.push_back({cls, b});
      dets.push_back(det(i, cls, 1.0, b));
    }
    images.push_back(scene(i, insts));
  }
  DatasetSplit test = split_of({7, 8, 9}, images);
  EvalReport r = evaluate(dets, test, {7, 8, 9}, default_eval_config());
  CHECK(r.ap == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(r.ap50 == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(r.ap75 == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(r.novel_map == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("false positives ranked above the hit halve the score") {
  DatasetSplit test = split_of({7}, {scene(0, {{7, kUnit}})});
  std::vector<Detection> dets = {det(0, 7, 0.9, kFar), det(0, 7, 0.8, kUnit)};
  EvalReport r = evaluate(dets, test, {7}, default_eval_config());
  CHECK(r.ap == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(r.ap50 == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(r.ap75 == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("classes without ground truth are skipped, unknown classes rejected") {
  DatasetSplit test = split_of({7, 8}, {scene(0, {{7, kUnit}})});
  std::vector<Detection> dets = {det(0, 7, 0.9, kUnit), det(0, 8, 0.8, kFar)};
  EvalReport r = evaluate(dets, test, {7, 8}, default_eval_config());
  CHECK(r.per_class_ap.count(7) == 1);
  CHECK(r.per_class_ap.count(8) == 0);  // no class-8 ground truth anywhere
  CHECK(r.ap == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(r.novel_map == doctest::Approx(1.0).epsilon(1e-9));

  CHECK_THROWS_WITH_AS(evaluate({det(0, 9, 0.9, kUnit)}, test, {7}, default_eval_config()),
                       doctest::Contains("unknown class 9"), std::runtime_error);
}

TEST_CASE("a ground-truth class with no detections drags the class mean") {
  DatasetSplit test = split_of({7, 8}, {scene(0, {{7, kUnit}, {8, Box{0.7, 0.7, 0.2, 0.2}}})});
  EvalReport r = evaluate({det(0, 7, 0.9, kUnit)}, test, {7, 8}, default_eval_config());
  CHECK(r.per_class_ap.count(8) == 1);
  CHECK(r.ap == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("matching aggregates per image, ranking aggregates across images") {
  Box gt2{0.6, 0.6, 0.3, 0.3};
  DatasetSplit test = split_of({7}, {scene(0, {{7, kUnit}}), scene(1, {{7, gt2}})});
  std::vector<Detection> dets = {det(0, 7, 0.9, kUnit), det(1, 7, 0.8, kFar),
                                 det(1, 7, 0.7, gt2)};
  EvalConfig cfg;
  cfg.thresholds = {0.50};
  EvalReport r = evaluate(dets, test, {7}, cfg);
  CHECK(r.ap50 == doctest::Approx((51.0 + 50.0 * (2.0 / 3.0)) / 101.0).epsilon(1e-9));

  // The far box overlaps no ground truth in its own image, even though a
  // same-class ground truth sits elsewhere.
  std::vector<Detection> swapped = {det(1, 7, 0.9, kUnit)};
  EvalReport r2 = evaluate(swapped, test, {7}, cfg);
  CHECK(r2.ap50 == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("input order does not matter") {
  DatasetSplit test = split_of({7, 8}, {scene(0, {{7, kUnit}, {8, Box{0.7, 0.7, 0.2, 0.2}}}),
                                        scene(1, {{7, Box{0.4, 0.4, 0.3, 0.3}}})});
  std::vector<Detection> dets = {det(0, 7, 0.5, kUnit), det(1, 7, 0.5, Box{0.4, 0.4, 0.3, 0.3}),
                                 det(0, 8, 0.5, kFar), det(0, 8, 0.5, Box{0.7, 0.7, 0.2, 0.2})};
  EvalReport a = evaluate(dets, test, {7, 8}, default_eval_config());
  std::reverse(dets.begin(), dets.end());
  EvalReport b = evaluate(dets, test, {7, 8}, default_eval_config());
  CHECK(a.ap == b.ap);
  CHECK(a.ap50 == b.ap50);
  CHECK(a.ap75 == b.ap75);
  CHECK(a.per_class_ap == b.per_class_ap);
}

TEST_CASE("per-image detection cap keeps the highest scores") {
  DatasetSplit test = split_of({7}, {scene(0, {{7, kUnit}})});
  std::vector<Detection> dets = {det(0, 7, 0.9, kFar), det(0, 7, 0.8, kUnit)};
  EvalConfig cfg;
  cfg.thresholds = {0.50};
  cfg.max_dets_per_image = 1;
  EvalReport capped = evaluate(dets, test, {7}, cfg);
  CHECK(capped.ap50 == doctest::Approx(0.0).epsilon(1e-9));
  cfg.max_dets_per_image = 100;
  EvalReport full = evaluate(dets, test, {7}, cfg);
  CHECK(full.ap50 == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("stricter overlap thresholds never score higher") {
  RngStream rng(33);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<SceneImage> images;
    std::vector<Detection> dets;
    for (int i = 0; i < 4; ++i) {
      std::vector<std::pair<int, Box>> insts;
      for (int j = 0; j < 3; ++j) {
        Box b{rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75), rng.uniform(0.15, 0.4),
              rng.uniform(0.15, 0.4)};
        int cls = 7 + static_cast<int>(rng.uniform_int(2));
        insts.push_back({cls, b});
        Box jit{b.cx + rng.uniform(-0.04, 0.04), b.cy + rng.uniform(-0.04, 0.04),
                b.w * rng.uniform(0.85, 1.15), b.h * rng.uniform(0.85, 1.15)};
        dets.push_back(det(i, cls, rng.uniform(0.1, 1.0), jit));
        if (rng.uniform(0.0, 1.0) < 0.4) {
          dets.push_back(det(i, cls, rng.uniform(0.1, 1.0), Box{0.05, 0.05, 0.05, 0.05}));
        }
      }
      images.push_back(scene(i, insts));
    }
    DatasetSplit test = split_of({7, 8}, images);
    EvalReport r = evaluate(dets, test, {7, 8}, default_eval_config());
    CHECK(r.ap50 >= r.ap75);
    for (const auto& [cls, aps] : r.per_class_ap) {
      for (size_t t = 1; t < aps.size(); ++t) CHECK(aps[t - 1] >= aps[t] - 1e-12);
    }
  }
}

TEST_CASE("dropping an always-false positive never lowers any score") {
  RngStream rng(91);
  for (int trial = 0; trial < 8; ++trial) {
    std::vector<std::pair<int, Box>> insts;
    std::vector<Detection> dets;
    for (int i = 0; i < 4; ++i) {
      Box b{rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.15, 0.35),
            rng.uniform(0.15, 0.35)};
      insts.push_back({7, b});
      dets.push_back(det(0, 7, rng.uniform(0.1, 1.0),
                         Box{b.cx + rng.uniform(-0.05, 0.05), b.cy + rng.uniform(-0.05, 0.05),
                             b.w, b.h}));
    }
    DatasetSplit test = split_of({7}, {scene(0, insts)});
    // Tiny corner box: below 0.5 IoU against every ground truth by construction.
    Detection fp = det(0, 7, rng.uniform(0.1, 1.0), Box{0.02, 0.02, 0.02, 0.02});
    for (const auto& [cls, b] : insts) REQUIRE(iou(fp.box, b) < 0.5);
    std::vector<Detection> with = dets;
    with.push_back(fp);
    EvalReport before = evaluate(with, test, {7}, default_eval_config());
    EvalReport after = evaluate(dets, test, {7}, default_eval_config());
    CHECK(after.ap >= before.ap - 1e-12);
    CHECK(after.ap50 >= before.ap50 - 1e-12);
    CHECK(after.ap75 >= before.ap75 - 1e-12);
  }
}

TEST_CASE("detections persist through jsonl exactly") {
  RngStream rng(55);
  std::vector<Detection> dets;
  for (int i = 0; i < 40; ++i) {
    dets.push_back(det(static_cast<int>(rng.uniform_int(20)), 7 + static_cast<int>(rng.uniform_int(4)),
                       rng.uniform(0.0, 1.0),
                       Box{rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.05, 0.5),
                           rng.uniform(0.05, 0.5)}));
  }
  sort_detections(dets);
  std::string path = (std::filesystem::temp_directory_path() / "fsod_dets_rt.jsonl").string();
  save_detections_jsonl(path, dets);
  std::vector<Detection> back = load_detections_jsonl(path);
  REQUIRE(back.size() == dets.size());
  for (size_t i = 0; i < dets.size(); ++i) {
    CHECK(back[i].image_id == dets[i].image_id);
    CHECK(back[i].category_id == dets[i].category_id);
    CHECK(back[i].score == dets[i].score);
    CHECK(back[i].box.cx == dets[i].box.cx);
    CHECK(back[i].box.cy == dets[i].box.cy);
    CHECK(back[i].box.w == dets[i].box.w);
    CHECK(back[i].box.h == dets[i].box.h);
  }
  std::filesystem::remove(path);
  CHECK_THROWS_WITH_AS(load_detections_jsonl(path), doctest::Contains("cannot open"),
                       std::runtime_error);
}
