#include "ior/replay.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace ior {

std::vector<CroppedObject> crop_objects(const std::vector<GeneratedSample>& bank,
                                        bool only_verified) {
  if (bank.empty()) throw std::invalid_argument("crop_objects: empty bank");
  std::vector<CroppedObject> crops;
  for (size_t i = 0; i < bank.size(); ++i) {
    const auto& sample = bank[i];
    if (only_verified && !sample.verified) continue;
    const int64_t H = sample.image.size(1), W = sample.image.size(2);
    const auto x0 = std::clamp<int64_t>(std::llround(sample.label.box.x), 0, W);
    const auto y0 = std::clamp<int64_t>(std::llround(sample.label.box.y), 0, H);
    const auto x1 = std::clamp<int64_t>(std::llround(sample.label.box.x2()), x0, W);
    const auto y1 = std::clamp<int64_t>(std::llround(sample.label.box.y2()), y0, H);
    if (x1 - x0 < 4 || y1 - y0 < 4)
      throw std::runtime_error("crop_objects: bank entry " + std::to_string(i) +
                               " has a box under 4 px after clamping");
    CroppedObject crop;
    crop.pixels = sample.image.slice(1, y0, y1).slice(2, x0, x1).clone();
    crop.cls = sample.label.cls;
    crop.source_id = static_cast<int64_t>(i);
    crops.push_back(std::move(crop));
  }
  if (crops.empty())
    throw std::runtime_error("crop_objects: no crops left after the verified filter");
  return crops;
}

ImagePlane mix_into(const ImagePlane& image, const torch::Tensor& crop, int64_t x, int64_t y,
                    double lambda) {
  const int64_t hc = crop.size(1), wc = crop.size(2);
  if (x < 0 || y < 0 || x + wc > image.size(2) || y + hc > image.size(1))
    throw std::invalid_argument("mix_into: crop rectangle leaves the image");
  auto out = image.clone();
  auto region = out.slice(1, y, y + hc).slice(2, x, x + wc);
  region.copy_(lambda * region + (1.0 - lambda) * crop);
  return out;
}

namespace {

torch::Tensor rescale_crop(const torch::Tensor& crop, int64_t hc, int64_t wc) {
  if (hc == crop.size(1) && wc == crop.size(2)) return crop;
  namespace F = torch::nn::functional;
  return F::interpolate(crop.unsqueeze(0),
                        F::InterpolateFuncOptions()
                            .size(std::vector<int64_t>{hc, wc})
                            .mode(torch::kBilinear)
                            .align_corners(false))
      .squeeze(0);
}

}  // namespace

std::optional<Placement> place_and_mix(const ImagePlane& image,
                                       const std::vector<Annotation>& gt,
                                       const CroppedObject& obj, const ReplayConfig& cfg,
                                       const std::vector<BoxXYWH>& existing, Rng& rng) {
  const int64_t H = image.size(1), W = image.size(2);
  const double scale = rng.uniform(cfg.scale_jitter_lo, cfg.scale_jitter_hi);
  const auto hc = std::max<int64_t>(1, std::llround(scale * obj.pixels.size(1)));
  const auto wc = std::max<int64_t>(1, std::llround(scale * obj.pixels.size(2)));
  if (hc > H || wc > W) return std::nullopt;

  for (int64_t attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    const int64_t x = rng.uniform_int(0, W - wc);
    const int64_t y = rng.uniform_int(0, H - hc);
    const BoxXYWH box{static_cast<double>(x), static_cast<double>(y),
                      static_cast<double>(wc), static_cast<double>(hc)};

    double overlap = max_iou_against(box, existing);
    for (const auto& ann : gt) overlap = std::max(overlap, iou(box, ann.box));
    if (overlap > cfg.thr) continue;

    const double lambda = rng.beta(cfg.beta_a, cfg.beta_b);
    Placement placed;
    placed.image = mix_into(image, rescale_crop(obj.pixels, hc, wc), x, y, lambda);
    placed.box = {obj.cls, box, lambda};
    return placed;
  }
  return std::nullopt;
}

std::vector<CompositeResult> augment_batch(const std::vector<ImagePlane>& images,
                                           const std::vector<std::vector<Annotation>>& gt,
                                           const std::vector<CroppedObject>& crops,
                                           const ReplayConfig& cfg, Rng& rng) {
  if (images.size() != gt.size())
    throw std::invalid_argument("augment_batch: image and annotation counts differ");
  if (crops.empty()) throw std::invalid_argument("augment_batch: no crops to place");

  std::map<int64_t, std::vector<size_t>> by_class;
  for (size_t i = 0; i < crops.size(); ++i) by_class[crops[i].cls].push_back(i);
  std::vector<int64_t> classes;
  for (const auto& [cls, ids] : by_class) classes.push_back(cls);

  size_t cursor = 0;
  std::vector<CompositeResult> results;
  for (size_t i = 0; i < images.size(); ++i) {
    CompositeResult result;
    result.image = images[i];
    std::vector<BoxXYWH> placed_boxes;
    for (int64_t r = 0; r < cfg.replays_per_image; ++r) {
      const auto& pool = by_class.at(classes[cursor]);
      cursor = (cursor + 1) % classes.size();
      const auto& obj = crops[pool[rng.uniform_int(0, static_cast<int64_t>(pool.size()) - 1)]];

      auto placement = place_and_mix(result.image, gt[i], obj, cfg, placed_boxes, rng);
      if (!placement) {
        ++result.skipped;
        continue;
      }
      result.image = placement->image;
      placed_boxes.push_back(placement->box.box);
      result.replayed.push_back(placement->box);
    }
    results.push_back(std::move(result));
  }
  return results;
}

}  // namespace ior
