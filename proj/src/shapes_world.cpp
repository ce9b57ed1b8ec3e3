#include "ior/shapes_world.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

#include "json.hpp"

#include "ior/dataset.hpp"
#include "ior/image_io.hpp"

namespace ior {

namespace {

namespace fs = std::filesystem;

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

const char* kShapeNames[5] = {"ellipse", "rectangle", "triangle", "diamond", "ring"};

}  // namespace

ClassSpec class_spec(int64_t class_id) {
  if (class_id < 0) throw std::invalid_argument("class_spec: negative class id");
  ClassSpec spec;
  spec.shape = class_id % 5;
  spec.striped = (class_id / 5) % 2 == 1;
  spec.color = hsv_to_rgb(std::fmod(class_id * 0.1 + 0.03, 1.0), 0.85, 0.9);
  spec.ratio_lo = 0.5 + 0.12 * (class_id % 10);
  spec.ratio_hi = spec.ratio_lo + 0.25;
  spec.name = std::string(kShapeNames[spec.shape]) + (spec.striped ? "_striped_" : "_solid_") +
              std::to_string(class_id);
  return spec;
}

torch::Tensor shape_mask(int64_t shape, const BoxXYWH& box, int64_t height, int64_t width) {
  auto mask = torch::zeros({height, width}, torch::kBool);
  auto m = mask.accessor<bool, 2>();
  const double cx = box.x + box.w / 2.0, cy = box.y + box.h / 2.0;
  const double a = box.w / 2.0, b = box.h / 2.0;

  const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(box.y)));
  const int64_t y1 = std::min<int64_t>(height - 1, static_cast<int64_t>(std::ceil(box.y2())));
  const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(box.x)));
  const int64_t x1 = std::min<int64_t>(width - 1, static_cast<int64_t>(std::ceil(box.x2())));

  for (int64_t py = y0; py <= y1; ++py) {
    for (int64_t px = x0; px <= x1; ++px) {
      const double u = (px + 0.5 - cx) / a;  // [-1,1] across the box
      const double v = (py + 0.5 - cy) / b;
      if (std::abs(u) > 1.0 || std::abs(v) > 1.0) continue;
      bool inside = false;
      switch (shape) {
        case 0: inside = u * u + v * v <= 1.0; break;
        case 1: inside = true; break;
        case 2: {  // apex up
          const double t = (v + 1.0) / 2.0;  // 0 at top row, 1 at base
          inside = std::abs(u) <= t;
          break;
        }
        case 3: inside = std::abs(u) + std::abs(v) <= 1.0; break;
        case 4: {
          const double r2 = u * u + v * v;
          inside = r2 <= 1.0 && r2 >= 0.55 * 0.55;
          break;
        }
        default: throw std::invalid_argument("shape_mask: unknown shape kind");
      }
      if (inside) m[py][px] = true;
    }
  }
  return mask;
}

ShapesImage render_image(const ShapesWorldConfig& cfg,
                         const std::vector<int64_t>& object_classes, Rng& rng) {
  const int64_t S = cfg.canvas;
  ShapesImage out;

  // soft random background plus per-pixel clutter noise
  auto image = torch::empty({3, S, S}, torch::kFloat32);
  std::array<double, 3> bg{};
  for (auto& c : bg) c = rng.uniform(0.3, 0.62);
  for (int64_t ch = 0; ch < 3; ++ch) image[ch].fill_(static_cast<float>(bg[ch]));
  if (cfg.clutter > 0.0) {
    auto noise = torch::empty({3, S, S}, torch::kFloat32);
    auto n = noise.accessor<float, 3>();
    for (int64_t ch = 0; ch < 3; ++ch)
      for (int64_t y = 0; y < S; ++y)
        for (int64_t x = 0; x < S; ++x)
          n[ch][y][x] = static_cast<float>(cfg.clutter * (rng.uniform() - 0.5));
    image = (image + noise).clamp(0, 1);
  }

  constexpr double kMaxOverlap = 0.3;
  for (int64_t cls : object_classes) {
    const auto spec = class_spec(cls);
    BoxXYWH box{};
    bool placed = false;
    for (int attempt = 0; attempt < 30 && !placed; ++attempt) {
      const double w = rng.uniform(0.12, 0.4) * S;
      const double ratio = rng.uniform(spec.ratio_lo, spec.ratio_hi);
      const double h = std::clamp(w * ratio, 6.0, 0.85 * S);
      box = {rng.uniform(1.0, S - 1.0 - w), rng.uniform(1.0, S - 1.0 - h), w, h};
      std::vector<BoxXYWH> existing;
      for (const auto& ann : out.annotations) existing.push_back(ann.box);
      placed = max_iou_against(box, existing) <= kMaxOverlap;
    }
    if (!placed) continue;

    auto mask = shape_mask(spec.shape, box, S, S);
    auto idx = mask.nonzero();  // [N,2] as (y, x)
    auto acc = idx.accessor<int64_t, 2>();
    auto img = image.accessor<float, 3>();
    const double stripe_h = std::max(2.0, box.h / 6.0);
    for (int64_t i = 0; i < idx.size(0); ++i) {
      const int64_t y = acc[i][0], x = acc[i][1];
      double shade = 1.0;
      if (spec.striped &&
          static_cast<int64_t>(std::floor((y - box.y) / stripe_h)) % 2 == 1)
        shade = 0.45;
      for (int64_t ch = 0; ch < 3; ++ch)
        img[ch][y][x] = static_cast<float>(spec.color[ch] * shade);
    }
    out.annotations.push_back({cls, box});
  }

  out.image = image;
  return out;
}

namespace {

struct SplitPlan {
  std::vector<std::vector<int64_t>> object_classes;  // per image
  std::vector<int64_t> step_of;                      // -1 for mixed images
};

// forced first object rotates through the class pool so coverage is even;
// remaining objects are uniform draws from the same pool
SplitPlan plan_split(const ExperimentConfig& cfg, int64_t count, bool train, Rng& rng) {
  SplitPlan plan;
  const auto& sched = cfg.schedule.steps;
  const bool pure_steps = train && cfg.mode == "non-co";
  const int64_t num_classes = cfg.dataset.num_classes;

  std::vector<int64_t> image_step(count, -1);
  if (pure_steps) {
    // allocate images to steps proportionally to their class counts
    int64_t assigned = 0;
    std::vector<int64_t> alloc(sched.size(), 0);
    for (size_t s = 1; s < sched.size(); ++s) {
      alloc[s] = count * static_cast<int64_t>(sched[s].size()) / num_classes;
      assigned += alloc[s];
    }
    alloc[0] = count - assigned;
    int64_t at = 0;
    for (size_t s = 0; s < sched.size(); ++s)
      for (int64_t i = 0; i < alloc[s]; ++i) image_step[at++] = static_cast<int64_t>(s);
  }

  std::vector<int64_t> rotation(sched.size(), 0);  // per-step forced-class cursor
  int64_t mixed_rotation = 0;
  for (int64_t i = 0; i < count; ++i) {
    const int64_t step = image_step[i];
    const std::vector<int64_t>* pool;
    int64_t forced;
    if (step >= 0) {
      pool = &sched[step];
      forced = (*pool)[rotation[step]++ % pool->size()];
    } else {
      static thread_local std::vector<int64_t> all;
      all.clear();
      for (int64_t c = 0; c < num_classes; ++c) all.push_back(c);
      pool = &all;
      forced = mixed_rotation++ % num_classes;
    }
    std::vector<int64_t> classes{forced};
    const int64_t extra =
        rng.uniform_int(cfg.dataset.min_objects, cfg.dataset.max_objects) - 1;
    for (int64_t k = 0; k < extra; ++k)
      classes.push_back((*pool)[rng.uniform_int(0, static_cast<int64_t>(pool->size()) - 1)]);
    plan.object_classes.push_back(std::move(classes));
    plan.step_of.push_back(step);
  }
  return plan;
}

void write_split(const ExperimentConfig& cfg, const std::string& split_dir, int64_t count,
                 bool train, Rng& rng) {
  fs::create_directories(fs::path(split_dir) / "images");

  SplitPlan plan = plan_split(cfg, count, train, rng);

  DatasetAnnotations data;
  for (int64_t c = 0; c < cfg.dataset.num_classes; ++c) data.category_ids.push_back(c);
  GenRecord record;
  record.seed = cfg.dataset.seed;
  record.mode = cfg.mode;

  std::map<int64_t, int64_t> coverage;
  for (int64_t i = 0; i < count; ++i) {
    auto img = render_image(cfg.dataset, plan.object_classes[i], rng);
    char name[32];
    std::snprintf(name, sizeof(name), "images/img_%06lld.png",
                  static_cast<long long>(i));
    save_png8((fs::path(split_dir) / name).string(), img.image);

    data.images.push_back({i, name, cfg.dataset.canvas, cfg.dataset.canvas});
    data.by_image[i] = img.annotations;

    GenImageRecord rec;
    rec.step = plan.step_of[i];
    std::set<int64_t> present;
    for (const auto& ann : img.annotations) present.insert(ann.class_id);
    rec.present_classes.assign(present.begin(), present.end());
    record.images[i] = rec;
    for (int64_t c : present) ++coverage[c];
  }

  if (train) {
    for (int64_t c = 0; c < cfg.dataset.num_classes; ++c) {
      if (coverage[c] < cfg.dataset.min_class_coverage)
        throw std::runtime_error("dataset: class " + std::to_string(c) + " appears in only " +
                                 std::to_string(coverage[c]) + " training images, need " +
                                 std::to_string(cfg.dataset.min_class_coverage));
    }
  }

  write_annotations((fs::path(split_dir) / "annotations.json").string(), data);
  write_gen_record((fs::path(split_dir) / "gen_record.json").string(), record);
}

}  // namespace

void generate_dataset(const ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);

  Rng rng(cfg.dataset.seed);
  auto train_rng = rng.fork(1);
  auto val_rng = rng.fork(2);
  write_split(cfg, (fs::path(out_dir) / "train").string(), cfg.dataset.train_images, true,
              train_rng);
  write_split(cfg, (fs::path(out_dir) / "val").string(), cfg.dataset.val_images, false,
              val_rng);

  nlohmann::json manifest;
  manifest["config_hash"] = config_hash(cfg);
  manifest["seed"] = cfg.dataset.seed;
  manifest["mode"] = cfg.mode;
  manifest["train_images"] = cfg.dataset.train_images;
  manifest["val_images"] = cfg.dataset.val_images;
  manifest["num_classes"] = cfg.dataset.num_classes;
  std::ofstream((fs::path(out_dir) / "dataset_manifest.json").string())
      << manifest.dump(2) << "\n";
}

}  // namespace ior
