#pragma once

#include <algorithm>

namespace fsod {

// Normalized box, center format; coordinates in [0,1].
struct Box {
  double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;
};

struct Xyxy {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
};

inline Xyxy to_xyxy(const Box& b) {
  return {b.cx - 0.5 * b.w, b.cy - 0.5 * b.h, b.cx + 0.5 * b.w, b.cy + 0.5 * b.h};
}

inline Box to_cxcywh(const Xyxy& r) {
  return {0.5 * (r.x0 + r.x1), 0.5 * (r.y0 + r.y1), r.x1 - r.x0, r.y1 - r.y0};
}

inline double area(const Xyxy& r) {
  return std::max(0.0, r.x1 - r.x0) * std::max(0.0, r.y1 - r.y0);
}

inline double intersection_area(const Xyxy& a, const Xyxy& b) {
  double w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  double h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  return std::max(0.0, w) * std::max(0.0, h);
}

inline double iou_xyxy(const Xyxy& a, const Xyxy& b) {
  double inter = intersection_area(a, b);
  double uni = area(a) + area(b) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline double iou(const Box& a, const Box& b) { return iou_xyxy(to_xyxy(a), to_xyxy(b)); }

// IoU minus the normalized empty-hull penalty; range (-1, 1]. Zero-area
// boxes act as points: zero IoU, hull penalty still applies.
inline double giou(const Box& a, const Box& b) {
  Xyxy ra = to_xyxy(a), rb = to_xyxy(b);
  double inter = intersection_area(ra, rb);
  double uni = area(ra) + area(rb) - inter;
  double iou_v = uni > 0.0 ? inter / uni : 0.0;
  Xyxy hull{std::min(ra.x0, rb.x0), std::min(ra.y0, rb.y0), std::max(ra.x1, rb.x1),
            std::max(ra.y1, rb.y1)};
  double hull_a = area(hull);
  if (hull_a <= 0.0) return iou_v;
  return iou_v - (hull_a - uni) / hull_a;
}

}  // namespace fsod
