#pragma once

#include <map>
#include <string>
#include <vector>

#include "ior/config.hpp"
#include "ior/detector.hpp"
#include "ior/geometry.hpp"
#include "ior/rng.hpp"

namespace ior {

// per-class box-ratio (h/w) counts over log-spaced bins
struct AspectRatioHistogram {
  double ratio_min = 0.125;
  double ratio_max = 8.0;
  int64_t bins = 16;
  std::map<int64_t, std::vector<int64_t>> counts;

  int64_t bin_of(double ratio) const;  // out-of-span ratios clamp to the edge bins
  double bin_lo(int64_t bin) const;
  double bin_hi(int64_t bin) const;
};

AspectRatioHistogram build_ratio_histograms(
    const std::map<int64_t, std::vector<Annotation>>& per_class, int64_t bins);

void save_ratio_histograms(const std::string& path, const AspectRatioHistogram& hist);
AspectRatioHistogram load_ratio_histograms(const std::string& path);

struct SampledLabel {
  int64_t cls;
  BoxXYWH box;
};

SampledLabel sample_label(int64_t cls, int64_t image_size, const AspectRatioHistogram& hist,
                          const InversionConfig& cfg, Rng& rng);

// alpha_tv * mean of squared adjacent-pixel differences + alpha_l2 * sum of squares
torch::Tensor r_prior(const torch::Tensor& image, double alpha_tv, double alpha_l2);

// alpha_bn * sum over layers of ||mean delta||^2 + ||var delta||^2
torch::Tensor r_bn(const std::vector<BnStats>& batch_stats,
                   const std::vector<BnStats>& running_stats, double alpha_bn);

struct GeneratedSample {
  ImagePlane image;
  SampledLabel label;
  bool verified = false;
  double teacher_score = 0.0;
  uint64_t seed = 0;
};

struct InversionLog {
  double initial_objective = 0.0;
  double final_objective = 0.0;
  std::vector<double> sampled;  // objective every sample_every iterations
  int64_t sample_every = 100;
};

// gradient descent on pixel logits against the frozen teacher; one label per
// returned image; teacher tensors are bitwise untouched
std::vector<GeneratedSample> invert(DetectorState& teacher,
                                    const std::vector<SampledLabel>& labels,
                                    const InversionConfig& cfg, Rng& rng,
                                    InversionLog* log = nullptr);

struct VerifyResult {
  bool verified = false;
  double teacher_score = 0.0;
};

// verification rule: some detection of the label's class overlaps the label box
// at iou_thr or better with score at score_thr or better
VerifyResult match_detections(const std::vector<Detection>& detections,
                              const SampledLabel& label, double score_thr, double iou_thr);

VerifyResult verify_generated(DetectorState& teacher, const GeneratedSample& sample,
                              double score_thr, double iou_thr);

// bank directory: one 16-bit image + one sidecar record per sample, plus a
// manifest listing every entry
void save_bank(const std::string& dir, const std::vector<GeneratedSample>& samples,
               const std::string& config_hash);
std::vector<GeneratedSample> load_bank(const std::string& dir);

}  // namespace ior
