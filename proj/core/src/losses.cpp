#include "fsod/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "fsod/matching.hpp"

namespace fsod {

Var giou_pairs(Tape& t, Var boxes, const std::vector<Box>& targets) {
  const Tensor& bv = t.value(boxes);
  int n = static_cast<int>(targets.size());
  if (bv.ndim() != 2 || bv.shape[1] != 4 || bv.shape[0] != n) {
    throw std::runtime_error("giou_pairs: boxes " + shape_str(bv.shape) + " vs " +
                             std::to_string(n) + " targets");
  }
  Tensor tx0({n}), ty0({n}), tx1({n}), ty1({n}), tarea({n});
  for (int i = 0; i < n; ++i) {
    Xyxy r = to_xyxy(targets[i]);
    tx0.v[i] = r.x0;
    ty0.v[i] = r.y0;
    tx1.v[i] = r.x1;
    ty1.v[i] = r.y1;
    tarea.v[i] = area(r);
  }
  Var cx = t.select_col(boxes, 0), cy = t.select_col(boxes, 1);
  Var w = t.select_col(boxes, 2), h = t.select_col(boxes, 3);
  Var px0 = t.sub(cx, t.scale(w, 0.5)), px1 = t.add(cx, t.scale(w, 0.5));
  Var py0 = t.sub(cy, t.scale(h, 0.5)), py1 = t.add(cy, t.scale(h, 0.5));
  Var vx0 = t.constant(tx0), vy0 = t.constant(ty0);
  Var vx1 = t.constant(tx1), vy1 = t.constant(ty1);
  Var iw = t.relu(t.sub(t.vmin(px1, vx1), t.vmax(px0, vx0)));
  Var ih = t.relu(t.sub(t.vmin(py1, vy1), t.vmax(py0, vy0)));
  Var inter = t.mul(iw, ih);
  Var uni = t.sub(t.add(t.mul(w, h), t.constant(tarea)), inter);
  Var iou_v = t.div(inter, uni);  // predicted w,h > 0, so union > 0
  Var hw = t.sub(t.vmax(px1, vx1), t.vmin(px0, vx0));
  Var hh = t.sub(t.vmax(py1, vy1), t.vmin(py0, vy0));
  Var hull = t.mul(hw, hh);
  return t.sub(iou_v, t.div(t.sub(hull, uni), hull));
}

double match_cost(double class_prob, const Box& pred, const Box& target, const LossConfig& cfg) {
  double p = std::clamp(class_prob, 1e-9, 1.0 - 1e-9);
  double focal_pos = -cfg.focal_alpha * std::pow(1.0 - p, cfg.focal_gamma) * std::log(p);
  double l1 = std::abs(pred.cx - target.cx) + std::abs(pred.cy - target.cy) +
              std::abs(pred.w - target.w) + std::abs(pred.h - target.h);
  return cfg.lambda_cls * focal_pos + cfg.lambda_l1 * l1 +
         cfg.lambda_giou * (1.0 - giou(pred, target));
}

Var set_loss(Tape& t, const std::vector<StageOutput>& stages,
             const std::vector<LossTarget>& targets, const LossConfig& cfg) {
  if (stages.empty()) throw std::runtime_error("set_loss: no stage outputs");
  int G = static_cast<int>(targets.size());
  std::vector<Var> stage_losses;
  stage_losses.reserve(stages.size());
  for (const StageOutput& so : stages) {
    const Tensor& logits = t.value(so.logits);
    const Tensor& boxes = t.value(so.boxes);
    int P = logits.shape[0], C = logits.shape[1];
    for (const LossTarget& tg : targets) {
      if (tg.class_col < 0 || tg.class_col >= C) {
        throw std::runtime_error("set_loss: target class column " +
                                 std::to_string(tg.class_col) + " outside [0," +
                                 std::to_string(C) + ")");
      }
    }
    Tensor targets01 = Tensor::zeros({P, C});
    std::vector<int> matched_rows;
    if (G > 0) {
      Tensor cost({P, G});
      for (int p = 0; p < P; ++p) {
        Box pb{boxes.at2(p, 0), boxes.at2(p, 1), boxes.at2(p, 2), boxes.at2(p, 3)};
        for (int g = 0; g < G; ++g) {
          double s = 1.0 / (1.0 + std::exp(-logits.at2(p, targets[g].class_col)));
          cost.at2(p, g) = match_cost(s, pb, targets[g].box, cfg);
        }
      }
      std::vector<int> assignment = hungarian_match(cost);
      matched_rows = assignment;
      for (int g = 0; g < G; ++g) targets01.at2(assignment[g], targets[g].class_col) = 1.0;
    }
    Var cls = t.sum(t.focal_bce(so.logits, targets01, cfg.focal_alpha, cfg.focal_gamma));
    Var stage_loss = t.scale(cls, cfg.lambda_cls);
    if (G > 0) {
      Var matched = t.gather_rows(so.boxes, matched_rows);
      Tensor tboxes({G, 4});
      std::vector<Box> tgt_boxes(G);
      for (int g = 0; g < G; ++g) {
        const Box& b = targets[g].box;
        tboxes.at2(g, 0) = b.cx;
        tboxes.at2(g, 1) = b.cy;
        tboxes.at2(g, 2) = b.w;
        tboxes.at2(g, 3) = b.h;
        tgt_boxes[g] = b;
      }
      Var l1 = t.sum(t.smooth_l1(matched, tboxes, cfg.smooth_l1_beta));
      Var gv = t.sum(t.add_scalar(t.neg(giou_pairs(t, matched, tgt_boxes)), 1.0));
      stage_loss = t.add(stage_loss, t.add(t.scale(l1, cfg.lambda_l1), t.scale(gv, cfg.lambda_giou)));
    }
    stage_losses.push_back(t.scale(stage_loss, 1.0 / std::max(1, G)));
  }
  Var total = stage_losses[0];
  for (size_t i = 1; i < stage_losses.size(); ++i) total = t.add(total, stage_losses[i]);
  return total;
}

}  // namespace fsod
