#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

namespace ior {

// Axis-aligned box, top-left corner plus extents, in pixels.
struct BoxXYWH {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double x2() const { return x + w; }
  double y2() const { return y + h; }
  double area() const { return w * h; }
};

struct Annotation {
  int64_t class_id = 0;
  BoxXYWH box;
};

inline double iou(const BoxXYWH& a, const BoxXYWH& b) {
  const double ix = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline BoxXYWH clamp_box(const BoxXYWH& b, double width, double height) {
  const double x1 = std::clamp(b.x, 0.0, width);
  const double y1 = std::clamp(b.y, 0.0, height);
  const double x2 = std::clamp(b.x2(), 0.0, width);
  const double y2 = std::clamp(b.y2(), 0.0, height);
  return {x1, y1, x2 - x1, y2 - y1};
}

inline double max_iou_against(const BoxXYWH& b, const std::vector<BoxXYWH>& others) {
  double m = 0.0;
  for (const auto& o : others) m = std::max(m, iou(b, o));
  return m;
}

}  // namespace ior
