#pragma once

#include <torch/torch.h>

#include <vector>

#include "ior/detector.hpp"
#include "ior/geometry.hpp"

namespace ior {

// FPN level whose offset-distribution range fits the box; shared by the
// positive assigner and the replayed-box feature distillation.
int64_t level_for_box(const BoxXYWH& box, const DetectorConfig& cfg);

// anchor-point centers of a level, [H*W, 2] as (x, y) pixels
torch::Tensor level_positions(int64_t level, const DetectorConfig& cfg);

// one positive anchor point
struct PositiveSample {
  int64_t level = 0;
  int64_t pos = 0;       // y * W_l + x
  int64_t gt_index = 0;  // index into the image's annotation list
};

// Deterministic center-sampling assignment: a point is positive for a ground
// truth when it lies inside the box and within 1.5 strides of the box center,
// at the level selected by box scale. A point claimed twice goes to the
// smaller box; a box that catches no point gets its nearest grid point.
std::vector<PositiveSample> assign_positives(const std::vector<Annotation>& targets,
                                             const DetectorConfig& cfg);

// Expectation decoding of normalized per-side distributions.
//   probs     [N, 4, bins], each row summing to 1 (throws otherwise)
//   centers   [N, 2] anchor-point (x, y) in pixels
//   strides   [N]
// Returns [N, 4] boxes as (x1, y1, x2, y2), clamped to the image.
torch::Tensor decode_boxes(const torch::Tensor& probs, const torch::Tensor& centers,
                           const torch::Tensor& strides, double bin_width,
                           int64_t image_size);

// side offsets in pixels without box assembly, [N, 4]
torch::Tensor decode_offsets(const torch::Tensor& probs, const torch::Tensor& strides,
                             double bin_width);

struct DetectionLossParts {
  torch::Tensor total;  // qfl + 0.25 * dfl + 2.0 * giou (weights from DetectorConfig defaults)
  torch::Tensor qfl;
  torch::Tensor dfl;
  torch::Tensor giou;
  int64_t num_pos = 0;
};

struct DetectionLossWeights {
  double cls = 1.0;
  double dfl = 0.25;
  double giou = 2.0;
};

// GFL-style detection loss: quality focal classification over the active class
// channels, distribution focal + GIoU over assigned positives. Differentiable
// w.r.t. outputs (and through them, weights or input pixels).
DetectionLossParts detection_loss(const DetectorOutputs& outputs,
                                  const std::vector<std::vector<Annotation>>& targets,
                                  const std::vector<int64_t>& active_classes,
                                  const DetectorState& state,
                                  const DetectionLossWeights& weights = {});

}  // namespace ior
