#pragma once

#include <string>
#include <vector>

#include "ior/config.hpp"
#include "ior/dataset.hpp"
#include "ior/detector.hpp"
#include "ior/eval.hpp"
#include "ior/replay.hpp"
#include "ior/rng.hpp"

namespace ior {

struct StepMetrics {
  int64_t step = 0;
  double detect = 0.0;
  double feat = 0.0;
  double logit = 0.0;
  double total = 0.0;
};

// columns: step,L_detect,L_feat,L_logit,L_total
void write_metrics_csv(const std::string& path, const std::vector<StepMetrics>& rows);
std::vector<StepMetrics> read_metrics_csv(const std::string& path);

// Base task: detection loss over the split's classes, Adam with linear warmup
// then cosine decay. Rows are logged every cfg.log_every steps plus the final
// step. Leaves the model in eval mode.
std::vector<StepMetrics> train_base(DetectorState& state, const DatasetSplit& split,
                                    const TrainConfig& cfg, Rng& rng);

struct IncrementalSetup {
  const DatasetSplit* split = nullptr;  // current-step training data
  DetectorState* teacher = nullptr;     // pre-expansion snapshot; kept frozen in eval
  std::vector<CroppedObject> crops;     // replay pool; ignored when replay is off
  std::vector<int64_t> old_classes;     // classes the teacher carries
};

// Incremental task: student must already be expanded for the new classes.
// Every student class is active for the detection loss, so old-class channels
// see only background pressure unless pseudo-labels are on; distillation terms
// follow cfg.toggles and cfg.distill.hvd_on.
std::vector<StepMetrics> train_incremental(DetectorState& student,
                                           const IncrementalSetup& setup,
                                           const ExperimentConfig& cfg, Rng& rng);

// detections for every split image at eval settings, gt attached
std::vector<EvalItem> collect_detections(DetectorState& state, const DatasetSplit& split,
                                         const TrainConfig& cfg);

EvalResult evaluate_split(DetectorState& state, const DatasetSplit& split,
                          const TrainConfig& cfg, const std::vector<int64_t>& old_classes,
                          const std::vector<int64_t>& new_classes);

}  // namespace ior
