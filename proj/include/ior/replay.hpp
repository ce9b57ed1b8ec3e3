#pragma once

#include <optional>
#include <vector>

#include "ior/config.hpp"
#include "ior/detector.hpp"
#include "ior/geometry.hpp"
#include "ior/inversion.hpp"
#include "ior/rng.hpp"

namespace ior {

struct CroppedObject {
  torch::Tensor pixels;   // [3, h, w], values in [0,1], both extents >= 4
  int64_t cls = 0;
  int64_t source_id = 0;  // index into the bank it was cut from
};

// one crop per bank entry at its label box, rounded to the pixel grid
std::vector<CroppedObject> crop_objects(const std::vector<GeneratedSample>& bank,
                                        bool only_verified);

// convex blend of the crop into the image over the rectangle at integer offset
// (x, y): lambda * image + (1 - lambda) * crop inside, untouched outside
ImagePlane mix_into(const ImagePlane& image, const torch::Tensor& crop, int64_t x, int64_t y,
                    double lambda);

struct ReplayedBox {
  int64_t cls = 0;
  BoxXYWH box;
  double lambda = 0.0;
};

struct Placement {
  ImagePlane image;
  ReplayedBox box;
};

// Draws a scale once, then up to cfg.max_attempts uniform locations until the
// placed rectangle overlaps every ground-truth and already-placed box at
// cfg.thr or less; empty on exhaustion (the caller counts skips).
std::optional<Placement> place_and_mix(const ImagePlane& image,
                                       const std::vector<Annotation>& gt,
                                       const CroppedObject& obj, const ReplayConfig& cfg,
                                       const std::vector<BoxXYWH>& existing, Rng& rng);

struct CompositeResult {
  ImagePlane image;
  std::vector<ReplayedBox> replayed;
  int64_t skipped = 0;
};

// cfg.replays_per_image placements per image, crop classes rotating in sorted
// order, entries uniform within a class; ground truth is never edited
std::vector<CompositeResult> augment_batch(const std::vector<ImagePlane>& images,
                                           const std::vector<std::vector<Annotation>>& gt,
                                           const std::vector<CroppedObject>& crops,
                                           const ReplayConfig& cfg, Rng& rng);

}  // namespace ior
