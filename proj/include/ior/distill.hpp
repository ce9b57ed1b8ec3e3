#pragma once

#include <torch/torch.h>

#include <vector>

#include "ior/config.hpp"
#include "ior/detector.hpp"
#include "ior/geometry.hpp"
#include "ior/replay.hpp"

namespace ior {

// Average of bilinear samples over a roi_size x roi_size grid inside the box,
// samples^2 points per cell, feature coordinate = pixel / stride - 0.5. A box
// under one feature pixel on either axis collapses to its center sample.
torch::Tensor roi_align(const torch::Tensor& feature, const BoxXYWH& box, int64_t stride,
                        int64_t roi_size, int64_t samples = 2);

// Pooled-feature squared error over the replayed boxes, teacher detached,
// averaged over the box count; zero when nothing was replayed. Each box pools
// the level its scale routes to.
torch::Tensor feat_distill_loss(const std::vector<torch::Tensor>& teacher_feats,
                                const std::vector<torch::Tensor>& student_feats,
                                const std::vector<std::vector<ReplayedBox>>& replayed,
                                const DetectorConfig& cfg, const DistillConfig& dcfg);

struct TopKPosition {
  int64_t level = 0;
  int64_t y = 0;
  int64_t x = 0;
  double score = 0.0;
};
using TopKSelection = std::vector<TopKPosition>;

// Per image: the top_k positions across all levels by the teacher's strongest
// activated old-class response, ties broken by (level, y, x).
std::vector<TopKSelection> select_topk(const DetectorOutputs& teacher_outputs,
                                       const std::vector<int64_t>& old_classes,
                                       const DetectorState& teacher, const DistillConfig& cfg);

// Per selected position: squared error over old-class pre-activation logits
// (mean over classes) plus KL(teacher || student) summed over the four side
// distributions, averaged over all selections. Teacher detached.
torch::Tensor logit_distill_loss(const DetectorOutputs& teacher_outputs,
                                 const DetectorOutputs& student_outputs,
                                 const std::vector<TopKSelection>& selection,
                                 const std::vector<int64_t>& old_classes,
                                 const DetectorState& teacher, const DetectorState& student,
                                 const DistillConfig& cfg);

struct DistillLossParts {
  torch::Tensor feat;
  torch::Tensor logit;
};

// Whole-map variant used when high-value selection is switched off: feature
// error over every position and level, logit terms averaged over all positions.
DistillLossParts full_map_distill(const DetectorOutputs& teacher_outputs,
                                  const DetectorOutputs& student_outputs,
                                  const std::vector<int64_t>& old_classes,
                                  const DetectorState& teacher, const DetectorState& student,
                                  const DistillConfig& cfg);

// detect + w_feat * feat + w_logit * logit, with the whole-map weights when
// hvd_on is off; throws on a non-finite term
torch::Tensor total_loss(const torch::Tensor& detect, const torch::Tensor& feat,
                         const torch::Tensor& logit, const DistillConfig& cfg);

}  // namespace ior
