#include "ior/eval.hpp"

#include <algorithm>
#include <cmath>

namespace ior {

std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

namespace {

struct ClassDet {
  size_t image;
  BoxXYWH box;
  double score;
};

double average_precision(const std::vector<ClassDet>& dets,
                         const std::vector<std::vector<BoxXYWH>>& gt_by_image,
                         int64_t num_gt, double iou_thr) {
  std::vector<std::vector<bool>> taken(gt_by_image.size());
  for (size_t i = 0; i < gt_by_image.size(); ++i)
    taken[i].assign(gt_by_image[i].size(), false);

  std::vector<bool> is_tp(dets.size(), false);
  for (size_t d = 0; d < dets.size(); ++d) {
    const auto& gts = gt_by_image[dets[d].image];
    double best = iou_thr;
    int64_t best_g = -1;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (taken[dets[d].image][g]) continue;
      const double v = iou(dets[d].box, gts[g]);
      if (v >= best) {
        best = v;
        best_g = static_cast<int64_t>(g);
      }
    }
    if (best_g >= 0) {
      taken[dets[d].image][best_g] = true;
      is_tp[d] = true;
    }
  }

  // precision envelope sampled at 101 recall points
  std::vector<double> precision, recall;
  int64_t tp = 0, fp = 0;
  for (size_t d = 0; d < dets.size(); ++d) {
    (is_tp[d] ? tp : fp) += 1;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  for (int64_t i = static_cast<int64_t>(precision.size()) - 2; i >= 0; --i)
    precision[i] = std::max(precision[i], precision[i + 1]);

  double ap = 0.0;
  size_t cursor = 0;
  for (int r = 0; r <= 100; ++r) {
    const double want = r / 100.0;
    while (cursor < recall.size() && recall[cursor] < want - 1e-12) ++cursor;
    if (cursor < recall.size()) ap += precision[cursor];
  }
  return ap / 101.0;
}

}  // namespace

EvalResult evaluate_map(const std::vector<EvalItem>& items,
                        const std::vector<int64_t>& classes,
                        std::vector<double> iou_thresholds, int64_t max_dets) {
  if (iou_thresholds.empty()) iou_thresholds = coco_iou_thresholds();

  // cap detections per image across all classes, keeping the highest scores
  std::vector<std::vector<Detection>> capped(items.size());
  for (size_t i = 0; i < items.size(); ++i) {
    capped[i] = items[i].dets;
    std::stable_sort(capped[i].begin(), capped[i].end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    if (static_cast<int64_t>(capped[i].size()) > max_dets) capped[i].resize(max_dets);
  }

  EvalResult result;
  for (int64_t cls : classes) {
    std::vector<ClassDet> dets;
    std::vector<std::vector<BoxXYWH>> gt_by_image(items.size());
    int64_t num_gt = 0;
    for (size_t i = 0; i < items.size(); ++i) {
      for (const auto& ann : items[i].gt) {
        if (ann.class_id == cls) {
          gt_by_image[i].push_back(ann.box);
          ++num_gt;
        }
      }
      for (const auto& det : capped[i]) {
        if (det.class_id == cls) dets.push_back({i, det.box, det.score});
      }
    }
    if (num_gt == 0) continue;  // class absent from the ground truth: not evaluated

    std::stable_sort(dets.begin(), dets.end(),
                     [](const ClassDet& a, const ClassDet& b) { return a.score > b.score; });

    double ap = 0.0;
    for (double thr : iou_thresholds) ap += average_precision(dets, gt_by_image, num_gt, thr);
    result.per_class_ap[cls] = ap / static_cast<double>(iou_thresholds.size());
  }

  double sum = 0.0;
  for (const auto& [cls, ap] : result.per_class_ap) sum += ap;
  result.total_ap =
      result.per_class_ap.empty() ? 0.0 : sum / static_cast<double>(result.per_class_ap.size());
  return result;
}

void fill_old_new(EvalResult& result, const std::vector<int64_t>& old_classes,
                  const std::vector<int64_t>& new_classes) {
  auto mean_over = [&](const std::vector<int64_t>& subset) {
    double sum = 0.0;
    int64_t n = 0;
    for (int64_t c : subset) {
      auto it = result.per_class_ap.find(c);
      if (it != result.per_class_ap.end()) {
        sum += it->second;
        ++n;
      }
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
  };
  result.old_ap = mean_over(old_classes);
  result.new_ap = mean_over(new_classes);
}

}  // namespace ior
