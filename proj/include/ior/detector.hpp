#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

#include "ior/geometry.hpp"

namespace ior {

// [3, H, W] float32, values in [0, 1]
using ImagePlane = torch::Tensor;

struct DetectorConfig {
  int64_t num_classes = 10;
  int64_t input_size = 256;
  std::vector<int64_t> strides = {8, 16};
  int64_t reg_bins = 8;
  double bin_width = 1.0;  // pixels per bin per stride unit
  std::vector<int64_t> backbone_channels = {16, 32, 64, 128};
  int64_t fpn_channels = 64;
  int64_t head_convs = 2;
  double bn_momentum = 0.1;

  void validate() const;  // throws std::invalid_argument on a broken invariant
  int64_t level_size(int64_t level) const { return input_size / strides[level]; }
};

struct BnStats {
  torch::Tensor mean;
  torch::Tensor var;
};

struct DetectorOutputs {
  std::vector<torch::Tensor> cls_logits;    // per level [B, C, H, W], pre-activation
  std::vector<torch::Tensor> reg_dists;     // per level [B, 4*bins, H, W], raw head output
  std::vector<torch::Tensor> cls_features;  // per level [B, F, H, W], last cls-head feature layer
  std::vector<BnStats> batch_stats;         // per BN layer, only when capture_bn was set
};

// softmax over bins: [*, 4*bins, H, W] -> same shape, each of the 4 per-position
// distributions summing to 1
torch::Tensor normalize_reg_dists(const torch::Tensor& reg_dists, int64_t reg_bins);

// BatchNorm2d wrapper that can report the current batch's statistics (mean and
// unbiased variance, the same estimator the running stats track) and that stays
// in eval mode once frozen, regardless of train()/eval() calls on the parent.
class CaptureBNImpl : public torch::nn::Module {
 public:
  CaptureBNImpl(int64_t channels, double momentum);
  torch::Tensor forward(const torch::Tensor& x);
  void train(bool on = true) override;
  void set_frozen(bool frozen);
  bool frozen() const { return frozen_; }

  torch::nn::BatchNorm2d bn{nullptr};
  bool capture = false;
  BnStats captured;

 private:
  bool frozen_ = false;
};
TORCH_MODULE(CaptureBN);

class ConvBNImpl : public torch::nn::Module {
 public:
  ConvBNImpl(int64_t in, int64_t out, int64_t stride, double momentum);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d conv{nullptr};
  CaptureBN bn{nullptr};
};
TORCH_MODULE(ConvBN);

// Compact GFL-style dense detector: conv backbone with batch norm, small FPN,
// shared head emitting pre-activation class logits and per-side discretized
// offset distributions.
class GflDetectorImpl : public torch::nn::Module {
 public:
  explicit GflDetectorImpl(const DetectorConfig& cfg);

  DetectorOutputs run(const torch::Tensor& batch, bool capture_bn = false);
  std::vector<CaptureBN>& bn_layers() { return bn_layers_; }
  const std::vector<CaptureBN>& bn_layers() const { return bn_layers_; }
  const DetectorConfig& config() const { return cfg_; }

 private:
  DetectorConfig cfg_;
  std::vector<ConvBN> blocks_;
  std::vector<int64_t> tap_blocks_;  // block index producing each FPN input
  std::vector<torch::nn::Conv2d> laterals_;
  std::vector<torch::nn::Conv2d> fpn_smooth_;
  torch::nn::Sequential cls_tower_{nullptr};
  torch::nn::Sequential reg_tower_{nullptr};
  torch::nn::Conv2d cls_pred_{nullptr};
  torch::nn::Conv2d reg_pred_{nullptr};
  std::vector<CaptureBN> bn_layers_;
};
TORCH_MODULE(GflDetector);

struct DetectorState {
  DetectorConfig config;
  GflDetector model{nullptr};
  std::vector<int64_t> class_registry;  // head channel k predicts class_registry[k]

  int64_t channel_of(int64_t class_id) const;  // throws if the class is unknown
  bool knows_class(int64_t class_id) const;
};

// fresh detector; config.num_classes is forced to class_ids.size()
DetectorState make_detector(DetectorConfig config, std::vector<int64_t> class_ids, uint64_t seed);

// deep copy (parameters, buffers, registry, frozen flags)
DetectorState clone_detector(const DetectorState& state);

DetectorOutputs forward(DetectorState& state, const torch::Tensor& batch, bool capture_bn = false);
DetectorOutputs forward(DetectorState& state, const std::vector<ImagePlane>& batch, bool capture_bn = false);

struct Detection {
  int64_t class_id = 0;
  BoxXYWH box;
  double score = 0.0;
};

std::vector<std::vector<Detection>> postprocess(const DetectorState& state,
                                                const DetectorOutputs& outputs,
                                                double score_threshold,
                                                double nms_iou,
                                                int64_t max_detections = 100);

// Widens the classification head for new classes: old rows are copied verbatim,
// new rows start at a ~0.01 prior, batch-norm layers come back frozen.
DetectorState expand_for_new_classes(const DetectorState& state,
                                     const std::vector<int64_t>& new_class_ids,
                                     uint64_t seed = 0);

void freeze_batchnorm(DetectorState& state);
std::vector<BnStats> bn_running_stats(const DetectorState& state);

void set_eval(DetectorState& state);
void set_train(DetectorState& state);

}  // namespace ior
