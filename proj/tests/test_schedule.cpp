#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <set>

#include "fsod/rng.hpp"
#include "fsod/schedule.hpp"

using namespace fsod;

namespace {

Benchmark tiny_benchmark(uint64_t seed) {
  GenConfig cfg;
  cfg.base_images = 8;
  cfg.novel_pool_images = 10;
  cfg.test_images = 4;
  return gen_dataset(cfg, seed);
}

SparseDetector tiny_detector(uint64_t seed, int num_stages = 2, int num_classes = 8) {
  BackboneConfig bb;
  CascadeConfig cc;
  cc.num_stages = num_stages;
  cc.num_proposals = 6;
  cc.num_classes = num_classes;
  return SparseDetector(bb, cc, seed);
}

std::vector<std::string> all_names(const SparseDetector& det) {
  std::vector<std::string> names;
  for (const Param* p : det.params().all()) names.push_back(p->name);
  return names;
}

StagePlan quick_plan(StageKind kind, int steps, uint64_t seed) {
  StagePlan plan;
  plan.kind = kind;
  plan.steps = steps;
  plan.learning_rate = 1e-3;
  plan.batch_size = 2;
  plan.seed = seed;
  return plan;
}

}  // namespace

TEST_CASE("classifier set and remainder partition every parameter") {
  for (int stages : {1, 3, 6}) {
    SparseDetector det = tiny_detector(5, stages);
    ParamPartition part = partition_params(det);
    CHECK(static_cast<int>(part.c_set.size()) == 2 * stages);
    std::set<std::string> c(part.c_set.begin(), part.c_set.end());
    std::set<std::string> e(part.e_set.begin(), part.e_set.end());
    CHECK(c.size() == part.c_set.size());
    CHECK(e.size() == part.e_set.size());
    for (const std::string& n : c) CHECK(e.count(n) == 0);
    std::vector<std::string> names = all_names(det);
    CHECK(c.size() + e.size() == names.size());
    for (const std::string& n : names) CHECK(c.count(n) + e.count(n) == 1);
    for (const std::string& n : c) CHECK(n.find(".fcls.") != std::string::npos);
  }
}

TEST_CASE("classifier-only stage leaves the shared trunk bitwise intact") {
  Benchmark bench = tiny_benchmark(3);
  SparseDetector det = tiny_detector(7);
  reinit_classifiers(det, bench.novel_class_ids, 11);
  ParamPartition part = partition_params(det);
  uint64_t e_before = params_checksum(det.params(), part.e_set);
  uint64_t c_before = params_checksum(det.params(), part.c_set);

  SupportSet support = sample_kshot(bench.novel_pool, bench.novel_class_ids, 2, 13);
  std::vector<TrainSample> samples = support_samples(bench, support, det);
  StageResult r = run_stage(det, quick_plan(StageKind::kPcf, 4, 17), samples);
  CHECK(r.steps_run == 4);
  CHECK(params_checksum(det.params(), part.e_set) == e_before);
  CHECK(params_checksum(det.params(), part.c_set) != c_before);
  for (const Param* p : det.params().all()) {
    CHECK(p->trainable);
    CHECK_FALSE(p->grad.has_value());
  }
}

TEST_CASE("novel stage freezes only the bottom backbone blocks") {
  Benchmark bench = tiny_benchmark(5);
  SparseDetector det = tiny_detector(9);
  reinit_classifiers(det, bench.novel_class_ids, 11);
  std::vector<std::string> bottom, rest;
  for (const Param* p : det.params().all()) {
    (p->group == ParamGroup::kBackboneBottom ? bottom : rest).push_back(p->name);
  }
  REQUIRE_FALSE(bottom.empty());
  uint64_t bottom_before = params_checksum(det.params(), bottom);
  uint64_t rest_before = params_checksum(det.params(), rest);

  SupportSet support = sample_kshot(bench.novel_pool, bench.novel_class_ids, 2, 13);
  run_stage(det, quick_plan(StageKind::kNovel, 4, 19), support_samples(bench, support, det));
  CHECK(params_checksum(det.params(), bottom) == bottom_before);
  CHECK(params_checksum(det.params(), rest) != rest_before);
}

TEST_CASE("base stage trains everything and logs one loss per step") {
  Benchmark bench = tiny_benchmark(7);
  SparseDetector det = tiny_detector(11);
  std::vector<std::string> names = all_names(det);
  uint64_t before = params_checksum(det.params(), names);
  StageResult r = run_stage(det, quick_plan(StageKind::kBase, 5, 23), base_samples(bench, det));
  CHECK(r.kind == StageKind::kBase);
  CHECK(r.steps_run == 5);
  CHECK(r.loss_curve.size() == 5);
  for (double l : r.loss_curve) CHECK(l > 0.0);
  CHECK(params_checksum(det.params(), names) != before);
  CHECK(r.wall_seconds > 0.0);
}

TEST_CASE("early stopping halts after two stagnant windows") {
  Benchmark bench = tiny_benchmark(9);
  SparseDetector det = tiny_detector(13);
  StagePlan plan = quick_plan(StageKind::kBase, 50, 29);
  plan.early_stop_window = 3;
  plan.min_improve = 1e9;  // unachievable improvement: stop at the first test
  StageResult r = run_stage(det, plan, base_samples(bench, det));
  CHECK(r.steps_run == 6);
  CHECK(r.loss_curve.size() == 6);

  // Window 0 disables the rule entirely.
  SparseDetector det2 = tiny_detector(13);
  StagePlan full = quick_plan(StageKind::kBase, 8, 29);
  full.early_stop_window = 0;
  CHECK(run_stage(det2, full, base_samples(bench, det2)).steps_run == 8);
}

TEST_CASE("run_stage validates its inputs") {
  Benchmark bench = tiny_benchmark(11);
  SparseDetector det = tiny_detector(15);
  std::vector<TrainSample> samples = base_samples(bench, det);
  StagePlan bad = quick_plan(StageKind::kBase, 0, 1);
  CHECK_THROWS_WITH_AS(run_stage(det, bad, samples), doctest::Contains("steps"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(run_stage(det, quick_plan(StageKind::kBase, 1, 1), {}),
                       doctest::Contains("no training samples"), std::runtime_error);
}

TEST_CASE("transfer procedures run their stage sequences") {
  Benchmark bench = tiny_benchmark(13);
  TransferPlans plans;
  plans.base = quick_plan(StageKind::kBase, 3, 31);
  plans.pcf = quick_plan(StageKind::kPcf, 3, 37);
  plans.novel = quick_plan(StageKind::kNovel, 3, 41);
  plans.reinit_seed = 43;
  SupportSet support = sample_kshot(bench.novel_pool, bench.novel_class_ids, 2, 47);

  SparseDetector two = tiny_detector(17);
  ProcedureResult rt = transfer_two_stage(two, bench, support, plans);
  REQUIRE(rt.stages.size() == 2);
  CHECK(rt.stages[0].kind == StageKind::kBase);
  CHECK(rt.stages[1].kind == StageKind::kNovel);
  CHECK(two.class_ids() == bench.novel_class_ids);

  SparseDetector three = tiny_detector(17);
  ProcedureResult rh = transfer_three_stage(three, bench, support, plans);
  REQUIRE(rh.stages.size() == 3);
  CHECK(rh.stages[0].kind == StageKind::kBase);
  CHECK(rh.stages[1].kind == StageKind::kPcf);
  CHECK(rh.stages[2].kind == StageKind::kNovel);

  TransferPlans wrong = plans;
  wrong.novel = quick_plan(StageKind::kBase, 1, 1);
  SparseDetector d2 = tiny_detector(17);
  CHECK_THROWS_WITH_AS(transfer_two_stage(d2, bench, support, wrong),
                       doctest::Contains("expected a NOVEL plan"), std::runtime_error);
}

TEST_CASE("the shared trunk enters the novel stage exactly as base left it") {
  Benchmark bench = tiny_benchmark(15);
  SparseDetector det = tiny_detector(19);
  StagePlan base = quick_plan(StageKind::kBase, 3, 53);
  run_stage(det, base, base_samples(bench, det));
  reinit_classifiers(det, bench.novel_class_ids, 59);
  ParamPartition part = partition_params(det);
  uint64_t e_after_base = params_checksum(det.params(), part.e_set);

  SupportSet support = sample_kshot(bench.novel_pool, bench.novel_class_ids, 2, 61);
  std::vector<TrainSample> samples = support_samples(bench, support, det);
  run_stage(det, quick_plan(StageKind::kPcf, 4, 67), samples);
  CHECK(params_checksum(det.params(), part.e_set) == e_after_base);

  run_stage(det, quick_plan(StageKind::kNovel, 2, 71), samples);
  CHECK(params_checksum(det.params(), part.e_set) != e_after_base);
}

TEST_CASE("procedures are deterministic per seed") {
  Benchmark bench = tiny_benchmark(17);
  TransferPlans plans;
  plans.base = quick_plan(StageKind::kBase, 2, 73);
  plans.pcf = quick_plan(StageKind::kPcf, 2, 79);
  plans.novel = quick_plan(StageKind::kNovel, 2, 83);
  plans.reinit_seed = 89;
  SupportSet support = sample_kshot(bench.novel_pool, bench.novel_class_ids, 1, 97);

  SparseDetector a = tiny_detector(21);
  SparseDetector b = tiny_detector(21);
  ProcedureResult ra = transfer_three_stage(a, bench, support, plans);
  ProcedureResult rb = transfer_three_stage(b, bench, support, plans);
  CHECK(params_checksum(a.params(), all_names(a)) == params_checksum(b.params(), all_names(b)));
  REQUIRE(ra.stages.size() == rb.stages.size());
  for (size_t s = 0; s < ra.stages.size(); ++s) {
    REQUIRE(ra.stages[s].loss_curve.size() == rb.stages[s].loss_curve.size());
    for (size_t i = 0; i < ra.stages[s].loss_curve.size(); ++i) {
      CHECK(ra.stages[s].loss_curve[i] == rb.stages[s].loss_curve[i]);
    }
  }
}

TEST_CASE("sample builders resolve class columns through the model") {
  Benchmark bench = tiny_benchmark(19);
  // A model that only predicts the first two base classes: every other
  // instance must be dropped from the base samples.
  SparseDetector narrow = tiny_detector(23, 2, 2);
  narrow.set_class_ids({bench.base_class_ids[0], bench.base_class_ids[1]});
  std::vector<TrainSample> samples = base_samples(bench, narrow);
  CHECK(samples.size() == bench.base.images.size());
  int kept = 0, expected = 0;
  for (size_t i = 0; i < samples.size(); ++i) {
    for (const LossTarget& tg : samples[i].targets) {
      CHECK(tg.class_col >= 0);
      CHECK(tg.class_col < 2);
      ++kept;
    }
    for (const SceneInstance& inst : bench.base.images[i].instances) {
      if (inst.class_id == bench.base_class_ids[0] || inst.class_id == bench.base_class_ids[1]) {
        ++expected;
      }
    }
  }
  CHECK(kept == expected);

  SparseDetector det = tiny_detector(25, 2, 4);
  det.set_class_ids(bench.novel_class_ids);
  SupportSet support = sample_kshot(bench.novel_pool, bench.novel_class_ids, 2, 101);
  std::vector<TrainSample> ss = support_samples(bench, support, det);
  int total_targets = 0;
  std::set<int> images_used;
  for (const TrainSample& s : ss) {
    CHECK_FALSE(s.targets.empty());
    total_targets += static_cast<int>(s.targets.size());
  }
  for (const SupportRef& r : support.refs) images_used.insert(r.image_index);
  CHECK(ss.size() == images_used.size());
  CHECK(total_targets == 2 * static_cast<int>(bench.novel_class_ids.size()));
}
