#pragma once

#include <array>
#include <string>
#include <vector>

#include "ior/config.hpp"
#include "ior/detector.hpp"
#include "ior/geometry.hpp"
#include "ior/rng.hpp"

namespace ior {

// a class is a (shape, texture, color, aspect-ratio band) combination;
// the bands differ so per-class ratio histograms carry real information
struct ClassSpec {
  int64_t shape;  // 0 ellipse, 1 rectangle, 2 triangle, 3 diamond, 4 ring
  bool striped;
  std::array<double, 3> color;  // rgb in [0,1]
  double ratio_lo, ratio_hi;    // h/w range
  std::string name;
};

ClassSpec class_spec(int64_t class_id);

// boolean coverage mask of the shape inscribed in box, on an H x W canvas
torch::Tensor shape_mask(int64_t shape, const BoxXYWH& box, int64_t height, int64_t width);

struct ShapesImage {
  ImagePlane image;
  std::vector<Annotation> annotations;
};

// one object per entry of object_classes; placements that cannot satisfy the
// overlap limit are dropped, so annotations may be shorter than the request
ShapesImage render_image(const ShapesWorldConfig& cfg,
                         const std::vector<int64_t>& object_classes, Rng& rng);

// writes train/ and val/ splits (images, annotations.json, gen_record.json)
// plus dataset_manifest.json under out_dir
void generate_dataset(const ExperimentConfig& cfg, const std::string& out_dir);

}  // namespace ior
