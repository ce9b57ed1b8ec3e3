#pragma once

#include <map>
#include <vector>

#include "ior/detector.hpp"
#include "ior/geometry.hpp"

namespace ior {

struct EvalItem {
  std::vector<Annotation> gt;
  std::vector<Detection> dets;
};

struct EvalResult {
  std::map<int64_t, double> per_class_ap;  // classes with at least one gt box
  double old_ap = 0.0;
  double new_ap = 0.0;
  double total_ap = 0.0;
};

std::vector<double> coco_iou_thresholds();  // 0.50 : 0.05 : 0.95

// greedy score-ordered matching, 101-point interpolated AP averaged over
// thresholds, then over classes; detections capped at max_dets per image
EvalResult evaluate_map(const std::vector<EvalItem>& items,
                        const std::vector<int64_t>& classes,
                        std::vector<double> iou_thresholds = {}, int64_t max_dets = 100);

void fill_old_new(EvalResult& result, const std::vector<int64_t>& old_classes,
                  const std::vector<int64_t>& new_classes);

}  // namespace ior
