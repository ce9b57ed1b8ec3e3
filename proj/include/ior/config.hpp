#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "ior/detector.hpp"

namespace ior {

struct ShapesWorldConfig {
  int64_t num_classes = 10;
  int64_t train_images = 4000;
  int64_t val_images = 800;
  int64_t min_objects = 1;
  int64_t max_objects = 4;
  int64_t canvas = 256;
  double clutter = 0.1;        // background noise amplitude in [0,1]
  int64_t min_class_coverage = 100;  // training images containing each class
  uint64_t seed = 0;

  void validate() const;
};

// ordered class-id sets, one per step; step 0 is the base task
struct TaskSchedule {
  std::vector<std::vector<int64_t>> steps;

  void validate(int64_t num_classes) const;
  std::vector<int64_t> seen_through(size_t step) const;  // union of steps [0..step]
  std::vector<int64_t> all_classes() const;
};

struct TrainConfig {
  int64_t base_epochs = 30;
  int64_t incremental_epochs = 20;
  int64_t batch_size = 8;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  int64_t warmup_steps = 100;
  int64_t log_every = 50;
  uint64_t seed = 0;
  double score_threshold = 0.05;  // postprocess gate at eval time
  double nms_iou = 0.6;

  void validate() const;
};

struct InversionConfig {
  int64_t iterations = 2000;
  double step_size = 0.05;  // cosine-decayed
  double alpha_tv = 1e-4;
  double alpha_l2 = 1e-5;
  double alpha_bn = 0.1;
  int64_t batch = 8;
  int64_t jitter = 2;    // random shift amplitude in pixels, 0 disables
  int64_t per_class = 30;
  int64_t ratio_bins = 16;
  double w_min = 0.15;  // sampled box width range, fraction of image side
  double w_max = 0.6;
  double verify_score = 0.3;
  double verify_iou = 0.5;

  void validate() const;
};

struct ReplayConfig {
  double beta_a = 2.0;
  double beta_b = 2.0;
  double thr = 0.2;  // IoU gate for placements
  int64_t replays_per_image = 2;
  int64_t max_attempts = 50;
  double scale_jitter_lo = 0.8;
  double scale_jitter_hi = 1.25;
  bool only_verified = true;

  void validate() const;
};

struct DistillConfig {
  int64_t top_k = 50;
  int64_t roi_size = 4;
  double w_feat = 1.0;
  double w_logit = 1.0;
  double kl_temperature = 1.0;
  // hvd_on = false swaps the region/top-K losses for dense full-map
  // distillation with its own weights
  bool hvd_on = true;
  double full_w_feat = 0.05;
  double full_w_logit = 0.25;

  void validate() const;
};

struct Toggles {
  bool replay_on = true;
  bool feat_distill_on = true;
  bool logit_distill_on = true;
  bool pseudo_label_on = false;  // count replayed boxes as detection targets
};

struct ExperimentConfig {
  ShapesWorldConfig dataset;
  TaskSchedule schedule;
  std::string mode = "non-co";  // or "co"
  DetectorConfig detector;
  InversionConfig inversion;
  ReplayConfig replay;
  DistillConfig distill;
  TrainConfig train;
  Toggles toggles;

  void validate() const;
};

// strict parsing: unknown keys anywhere are an error
ExperimentConfig parse_experiment_config(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::string& path);
nlohmann::json experiment_config_to_json(const ExperimentConfig& cfg);

nlohmann::json detector_config_to_json(const DetectorConfig& cfg);
DetectorConfig detector_config_from_json(const nlohmann::json& j);

std::string sha256_hex(const std::string& bytes);
std::string config_hash(const ExperimentConfig& cfg);

}  // namespace ior
