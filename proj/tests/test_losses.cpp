#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <stdexcept>
#include <vector>

#include "fsod/boxes.hpp"
#include "fsod/gradcheck.hpp"
#include "fsod/losses.hpp"
#include "fsod/rng.hpp"

using namespace fsod;

TEST_CASE("giou hand values") {
  Box a{0.5, 0.5, 0.4, 0.4};
  CHECK(giou(a, a) == doctest::Approx(1.0).epsilon(1e-12));

  // xyxy (0,0,2,2) vs (1,1,3,3): IoU 1/7, union 7, hull 9.
  Box p = to_cxcywh({0, 0, 2, 2});
  Box q = to_cxcywh({1, 1, 3, 3});
  CHECK(giou(p, q) == doctest::Approx(1.0 / 7.0 - 2.0 / 9.0).epsilon(1e-12));

  // Disjoint boxes give a negative value (pure hull penalty).
  Box far{0.9, 0.9, 0.1, 0.1};
  Box near{0.1, 0.1, 0.1, 0.1};
  CHECK(giou(far, near) < 0.0);

  // A zero-area box acts as a point: IoU zero, hull from the other box.
  Box point{0.5, 0.5, 0.0, 0.0};
  Box around{0.5, 0.5, 1.0, 1.0};
  CHECK(giou(point, around) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("iou basics") {
  CHECK(iou(Box{0.5, 0.5, 0.2, 0.2}, Box{0.5, 0.5, 0.2, 0.2}) == doctest::Approx(1.0));
  CHECK(iou(Box{0.2, 0.2, 0.2, 0.2}, Box{0.8, 0.8, 0.2, 0.2}) == 0.0);
  CHECK(iou(to_cxcywh({0, 0, 2, 2}), to_cxcywh({1, 1, 3, 3})) ==
        doctest::Approx(1.0 / 7.0).epsilon(1e-12));
}

TEST_CASE("giou_pairs agrees with the scalar formula and differentiates") {
  RngStream rng(0x61);
  for (int trial = 0; trial < 30; ++trial) {
    Box target{rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.2, 0.4),
               rng.uniform(0.2, 0.4)};
    Box pred{target.cx + rng.uniform(-0.05, 0.05), target.cy + rng.uniform(-0.05, 0.05),
             target.w + rng.uniform(-0.05, 0.05), target.h + rng.uniform(-0.05, 0.05)};
    Tape t;
    Tensor bt({1, 4}, {pred.cx, pred.cy, pred.w, pred.h});
    Var g = giou_pairs(t, t.constant(bt), {target});
    CHECK(t.value(g).v[0] == doctest::Approx(giou(pred, target)).epsilon(1e-12));
  }

  double worst = 0.0;
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    RngStream r(derive_seed(seed, 0x9a));
    std::vector<Box> targets;
    ParamStore ps;
    Tensor raw({2, 4});
    for (int i = 0; i < 2; ++i) {
      Box tg{r.uniform(0.35, 0.65), r.uniform(0.35, 0.65), r.uniform(0.25, 0.4),
             r.uniform(0.25, 0.4)};
      targets.push_back(tg);
      // Raw logits of a box overlapping its target with strict margins, so
      // the min/max selections inside the pairwise GIoU never flip under
      // the finite-difference step.
      raw.at2(i, 0) = std::log(tg.cx / (1 - tg.cx)) + 0.15;
      raw.at2(i, 1) = std::log(tg.cy / (1 - tg.cy)) - 0.2;
      raw.at2(i, 2) = std::log(tg.w / (1 - tg.w)) + 0.25;
      raw.at2(i, 3) = std::log(tg.h / (1 - tg.h)) - 0.3;
    }
    ps.create("raw", raw, ParamGroup::kOther);
    double err = grad_check(
        [&](Tape& t) {
          Var boxes = t.sigmoid(t.leaf(ps.get("raw")));
          return t.sum(giou_pairs(t, boxes, targets));
        },
        ps.all());
    worst = std::max(worst, err);
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("match_cost mirrors the three weighted terms") {
  LossConfig cfg;
  Box pred{0.5, 0.5, 0.2, 0.2};
  Box target{0.6, 0.5, 0.2, 0.2};
  // p = 0.5: focal positive term is -alpha * 0.25 * ln(0.5). IoU is 1/3 with
  // a tight hull, l1 distance exactly 0.1.
  double expected = cfg.lambda_cls * (0.25 * 0.25 * std::log(2.0)) + cfg.lambda_l1 * 0.1 +
                    cfg.lambda_giou * (1.0 - 1.0 / 3.0);
  CHECK(match_cost(0.5, pred, target, cfg) == doctest::Approx(expected).epsilon(1e-12));

  // Better class probability strictly lowers the cost.
  CHECK(match_cost(0.9, pred, target, cfg) < match_cost(0.5, pred, target, cfg));
}

TEST_CASE("empty targets reduce to the closed-form background loss") {
  // All logits zero: every element contributes (1-alpha) * 0.25 * ln 2; the
  // stage is normalized by max(1, G) = 1 and scaled by lambda_cls.
  LossConfig cfg;
  int P = 5, C = 3;
  double per_elem = (1.0 - cfg.focal_alpha) * 0.25 * std::log(2.0);
  double expected_stage = cfg.lambda_cls * P * C * per_elem;

  for (int stages = 1; stages <= 3; ++stages) {
    Tape t;
    std::vector<StageOutput> outs(stages);
    for (StageOutput& so : outs) {
      so.logits = t.constant(Tensor::zeros({P, C}));
      so.boxes = t.constant(Tensor::full({P, 4}, 0.5));
    }
    Var loss = set_loss(t, outs, {}, cfg);
    CHECK(t.value(loss).v[0] == doctest::Approx(stages * expected_stage).epsilon(1e-12));
  }
}

TEST_CASE("perfect predictions drive the loss to zero") {
  LossConfig cfg;
  std::vector<LossTarget> targets = {{0, Box{0.3, 0.3, 0.2, 0.2}}, {2, Box{0.7, 0.7, 0.25, 0.3}}};
  int P = 4, C = 3;
  Tensor boxes({P, 4});
  Tensor logits = Tensor::full({P, C}, -30.0);
  // Rows 0/1 sit exactly on the targets with saturated correct logits; the
  // remaining proposals are far-away background.
  boxes.at2(0, 0) = 0.3; boxes.at2(0, 1) = 0.3; boxes.at2(0, 2) = 0.2; boxes.at2(0, 3) = 0.2;
  boxes.at2(1, 0) = 0.7; boxes.at2(1, 1) = 0.7; boxes.at2(1, 2) = 0.25; boxes.at2(1, 3) = 0.3;
  boxes.at2(2, 0) = 0.1; boxes.at2(2, 1) = 0.9; boxes.at2(2, 2) = 0.05; boxes.at2(2, 3) = 0.05;
  boxes.at2(3, 0) = 0.9; boxes.at2(3, 1) = 0.1; boxes.at2(3, 2) = 0.05; boxes.at2(3, 3) = 0.05;
  logits.at2(0, 0) = 30.0;
  logits.at2(1, 2) = 30.0;

  Tape t;
  std::vector<StageOutput> outs(1);
  outs[0].logits = t.constant(logits);
  outs[0].boxes = t.constant(boxes);
  Var loss = set_loss(t, outs, targets, cfg);
  CHECK(t.value(loss).v[0] >= 0.0);
  CHECK(t.value(loss).v[0] < 1e-9);
}

TEST_CASE("target order does not change the loss") {
  LossConfig cfg;
  std::vector<LossTarget> targets = {{0, Box{0.3, 0.3, 0.2, 0.2}}, {1, Box{0.7, 0.6, 0.3, 0.2}}};
  std::vector<LossTarget> swapped = {targets[1], targets[0]};
  Tensor boxes({3, 4}, {0.32, 0.28, 0.22, 0.18, 0.68, 0.62, 0.28, 0.22, 0.5, 0.5, 0.1, 0.1});
  Tensor logits({3, 2}, {2.0, -1.0, -1.5, 1.8, -2.0, -2.0});

  auto value = [&](const std::vector<LossTarget>& tg) {
    Tape t;
    std::vector<StageOutput> outs(1);
    outs[0].logits = t.constant(logits);
    outs[0].boxes = t.constant(boxes);
    return t.value(set_loss(t, outs, tg, cfg)).v[0];
  };
  CHECK(value(targets) == doctest::Approx(value(swapped)).epsilon(1e-12));
}

TEST_CASE("set_loss input validation") {
  LossConfig cfg;
  Tape t;
  CHECK_THROWS_AS(set_loss(t, {}, {}, cfg), std::runtime_error);

  std::vector<StageOutput> outs(1);
  outs[0].logits = t.constant(Tensor::zeros({2, 2}));
  outs[0].boxes = t.constant(Tensor::full({2, 4}, 0.5));
  std::vector<LossTarget> bad = {{5, Box{0.5, 0.5, 0.2, 0.2}}};
  CHECK_THROWS_WITH_AS(set_loss(t, outs, bad, cfg), doctest::Contains("class column"),
                       std::runtime_error);
}

namespace {

// Min distance from any predicted edge to its target edge, over both stages.
// The giou surface has min/max joints exactly at edge coincidence, so random
// fixtures must stay clear of them for finite differences to be valid.
double min_edge_gap(const Tensor& raw, const std::vector<LossTarget>& targets) {
  double gap = 1e9;
  for (double shift : {0.0, 0.1}) {
    for (int p = 0; p < 2; ++p) {
      Box pred;
      pred.cx = 1.0 / (1.0 + std::exp(-(raw.at2(p, 0) + shift)));
      pred.cy = 1.0 / (1.0 + std::exp(-(raw.at2(p, 1) + shift)));
      pred.w = 1.0 / (1.0 + std::exp(-(raw.at2(p, 2) + shift)));
      pred.h = 1.0 / (1.0 + std::exp(-(raw.at2(p, 3) + shift)));
      Xyxy a = to_xyxy(pred);
      Xyxy b = to_xyxy(targets[p].box);
      for (double d : {a.x0 - b.x0, a.x1 - b.x1, a.y0 - b.y0, a.y1 - b.y1}) {
        gap = std::min(gap, std::abs(d));
      }
    }
  }
  return gap;
}

}  // namespace

TEST_CASE("full set_loss gradient matches finite differences") {
  LossConfig cfg;
  double worst = 0.0;
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    RngStream r(derive_seed(seed, 0x105));
    // One clearly-nearest proposal per target keeps the assignment stable
    // under finite-difference perturbations.
    std::vector<LossTarget> targets;
    Tensor raw({3, 4});
    do {
      targets = {{0, Box{r.uniform(0.25, 0.35), r.uniform(0.25, 0.35), 0.25, 0.3}},
                 {1, Box{r.uniform(0.65, 0.75), r.uniform(0.6, 0.7), 0.3, 0.25}}};
      for (int i = 0; i < 2; ++i) {
        const Box& b = targets[i].box;
        raw.at2(i, 0) = std::log(b.cx / (1 - b.cx)) + r.uniform(0.05, 0.15);
        raw.at2(i, 1) = std::log(b.cy / (1 - b.cy)) - r.uniform(0.05, 0.15);
        raw.at2(i, 2) = std::log(b.w / (1 - b.w)) + r.uniform(0.05, 0.15);
        raw.at2(i, 3) = std::log(b.h / (1 - b.h)) - r.uniform(0.05, 0.15);
      }
    } while (min_edge_gap(raw, targets) < 0.004);
    ParamStore ps;
    raw.at2(2, 0) = std::log(0.5 / 0.5); raw.at2(2, 1) = 0.0;
    raw.at2(2, 2) = std::log(0.08 / 0.92); raw.at2(2, 3) = std::log(0.08 / 0.92);
    ps.create("raw", raw, ParamGroup::kOther);
    Tensor logits({3, 2}, {1.5, -1.0, -1.2, 1.4, -1.0, -1.0});
    ps.create("logits", logits, ParamGroup::kOther);

    double err = grad_check(
        [&](Tape& t) {
          std::vector<StageOutput> outs(2);
          Var boxes = t.sigmoid(t.leaf(ps.get("raw")));
          Var lg = t.leaf(ps.get("logits"));
          outs[0].boxes = boxes;
          outs[0].logits = lg;
          // Second stage reuses the same leaves through extra ops so the
          // cross-stage sum path is exercised too.
          outs[1].boxes = t.sigmoid(t.add_scalar(t.logit(boxes), 0.1));
          outs[1].logits = t.scale(lg, 0.9);
          return set_loss(t, outs, targets, cfg);
        },
        ps.all());
    worst = std::max(worst, err);
  }
  CHECK(worst <= 1e-4);
}
