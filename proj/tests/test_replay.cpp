#include "ior_doctest.hpp"

#include <cmath>
#include <vector>

#include "ior/replay.hpp"

namespace {

ior::GeneratedSample sample_with_box(const ior::BoxXYWH& box, int64_t cls, bool verified,
                                     int64_t size = 64) {
  ior::GeneratedSample s;
  s.image = torch::arange(3 * size * size, torch::kFloat32).reshape({3, size, size});
  s.image = s.image / s.image.max();
  s.label.cls = cls;
  s.label.box = box;
  s.verified = verified;
  return s;
}

double raster_iou(const ior::BoxXYWH& a, const ior::BoxXYWH& b, int64_t grid) {
  int64_t inter = 0, uni = 0;
  for (int64_t y = 0; y < grid; ++y) {
    for (int64_t x = 0; x < grid; ++x) {
      const bool in_a = x >= a.x && x < a.x2() && y >= a.y && y < a.y2();
      const bool in_b = x >= b.x && x < b.x2() && y >= b.y && y < b.y2();
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  }
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

}  // namespace

TEST_SUITE("replay") {

TEST_CASE("crops copy the label rectangle exactly") {
  std::vector<ior::GeneratedSample> bank = {
      sample_with_box({10, 20, 30, 40}, 2, true),
      sample_with_box({4, 4, 8, 8}, 5, false),
  };

  auto verified_only = ior::crop_objects(bank, true);
  REQUIRE(verified_only.size() == 1);
  CHECK(verified_only[0].cls == 2);
  CHECK(verified_only[0].source_id == 0);
  CHECK(verified_only[0].pixels.sizes() == torch::IntArrayRef({3, 40, 30}));
  auto region = bank[0].image.slice(1, 20, 60).slice(2, 10, 40);
  CHECK(torch::equal(verified_only[0].pixels, region));

  auto all = ior::crop_objects(bank, false);
  CHECK(all.size() == 2);
  CHECK(all[1].source_id == 1);

  std::vector<ior::GeneratedSample> unverified = {sample_with_box({4, 4, 8, 8}, 1, false)};
  CHECK_THROWS(ior::crop_objects(unverified, true));
  CHECK_THROWS(ior::crop_objects({}, false));
}

TEST_CASE("crops under four pixels are rejected") {
  std::vector<ior::GeneratedSample> bank = {sample_with_box({5, 5, 2, 10}, 0, true)};
  CHECK_THROWS(ior::crop_objects(bank, false));
}

TEST_CASE("overlap ratio matches area arithmetic and grid counting") {
  ior::BoxXYWH unit{0, 0, 2, 2};
  CHECK(ior::iou(unit, unit) == doctest::Approx(1.0));
  CHECK(ior::iou(unit, {5, 5, 2, 2}) == doctest::Approx(0.0));
  CHECK(ior::iou({0, 0, 2, 2}, {1, 1, 2, 2}) == doctest::Approx(1.0 / 7.0));

  ior::Rng rng(19);
  for (int i = 0; i < 1000; ++i) {
    ior::BoxXYWH a{static_cast<double>(rng.uniform_int(0, 10)),
                   static_cast<double>(rng.uniform_int(0, 10)),
                   static_cast<double>(rng.uniform_int(1, 10)),
                   static_cast<double>(rng.uniform_int(1, 10))};
    ior::BoxXYWH b{static_cast<double>(rng.uniform_int(0, 10)),
                   static_cast<double>(rng.uniform_int(0, 10)),
                   static_cast<double>(rng.uniform_int(1, 10)),
                   static_cast<double>(rng.uniform_int(1, 10))};
    CHECK(ior::iou(a, b) == doctest::Approx(raster_iou(a, b, 24)).epsilon(1e-12));
  }
}

TEST_CASE("mixing weights behave as a convex blend") {
  auto image = torch::rand({3, 16, 16});
  auto crop = torch::rand({3, 6, 5});

  auto kept = ior::mix_into(image, crop, 3, 8, 1.0);
  CHECK(torch::equal(kept, image));

  auto pasted = ior::mix_into(image, crop, 3, 8, 0.0);
  CHECK(torch::equal(pasted.slice(1, 8, 14).slice(2, 3, 8), crop));
  auto outside = pasted.clone();
  outside.slice(1, 8, 14).slice(2, 3, 8).copy_(image.slice(1, 8, 14).slice(2, 3, 8));
  CHECK(torch::equal(outside, image));

  auto flat_image = torch::full({3, 16, 16}, 0.2);
  auto flat_crop = torch::full({3, 6, 5}, 0.8);
  auto mixed = ior::mix_into(flat_image, flat_crop, 0, 0, 0.5);
  CHECK(mixed[0][0][0].item<double>() == doctest::Approx(0.5));
  CHECK(mixed[0][10][10].item<double>() == doctest::Approx(0.2));

  CHECK_THROWS(ior::mix_into(image, crop, 14, 0, 0.5));
}

TEST_CASE("placement honors the overlap gate and reports an honest blend") {
  auto image = torch::full({3, 64, 64}, 0.2);
  ior::CroppedObject obj;
  obj.pixels = torch::full({3, 8, 8}, 0.8);
  obj.cls = 4;

  std::vector<ior::Annotation> gt = {{0, {0, 0, 32, 64}}};
  ior::ReplayConfig cfg;
  cfg.scale_jitter_lo = 1.0;
  cfg.scale_jitter_hi = 1.0;

  ior::Rng rng(23);
  auto placement = ior::place_and_mix(image, gt, obj, cfg, {}, rng);
  REQUIRE(placement.has_value());
  const auto& box = placement->box.box;
  const double lambda = placement->box.lambda;
  CHECK(placement->box.cls == 4);
  CHECK(lambda >= 0.0);
  CHECK(lambda <= 1.0);
  CHECK(box.w == doctest::Approx(8.0));
  CHECK(box.x2() <= 64.0);
  CHECK(box.y2() <= 64.0);
  CHECK(ior::iou(box, gt[0].box) <= cfg.thr);

  // recompute the blend from the outputs alone
  const auto x = static_cast<int64_t>(box.x), y = static_cast<int64_t>(box.y);
  auto region = placement->image.slice(1, y, y + 8).slice(2, x, x + 8);
  const double expected = lambda * 0.2 + (1.0 - lambda) * 0.8;
  CHECK((region - expected).abs().max().item<double>() < 1e-6);
  auto rest = placement->image.clone();
  rest.slice(1, y, y + 8).slice(2, x, x + 8).fill_(0.2);
  CHECK(torch::equal(rest, image));
}

TEST_CASE("scale jitter resizes the pasted rectangle") {
  auto image = torch::full({3, 64, 64}, 0.1);
  ior::CroppedObject obj;
  obj.pixels = torch::full({3, 16, 16}, 0.9);

  ior::ReplayConfig cfg;
  cfg.scale_jitter_lo = 0.5;
  cfg.scale_jitter_hi = 0.5;

  ior::Rng rng(2);
  auto placement = ior::place_and_mix(image, {}, obj, cfg, {}, rng);
  REQUIRE(placement.has_value());
  CHECK(placement->box.box.w == doctest::Approx(8.0));
  CHECK(placement->box.box.h == doctest::Approx(8.0));
}

TEST_CASE("placement gives up when the gate cannot be met") {
  auto image = torch::full({3, 32, 32}, 0.5);
  ior::CroppedObject obj;
  obj.pixels = torch::full({3, 8, 8}, 0.9);

  std::vector<ior::Annotation> gt = {{0, {0, 0, 32, 32}}};
  ior::ReplayConfig cfg;
  cfg.thr = 0.0;
  cfg.scale_jitter_lo = 1.0;
  cfg.scale_jitter_hi = 1.0;

  ior::Rng rng(4);
  CHECK_FALSE(ior::place_and_mix(image, gt, obj, cfg, {}, rng).has_value());
}

TEST_CASE("batch augmentation keeps every replayed box inside the gate") {
  std::vector<ior::ImagePlane> images = {torch::rand({3, 64, 64}), torch::rand({3, 64, 64})};
  std::vector<std::vector<ior::Annotation>> gt = {{}, {{0, {0, 0, 20, 20}}}};

  std::vector<ior::CroppedObject> crops(2);
  crops[0].pixels = torch::rand({3, 8, 8});
  crops[0].cls = 3;
  crops[1].pixels = torch::rand({3, 10, 6});
  crops[1].cls = 5;

  ior::ReplayConfig cfg;
  cfg.scale_jitter_lo = 1.0;
  cfg.scale_jitter_hi = 1.0;

  ior::Rng rng(31);
  auto results = ior::augment_batch(images, gt, crops, cfg, rng);
  REQUIRE(results.size() == 2);
  for (size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    CHECK(static_cast<int64_t>(r.replayed.size()) + r.skipped == cfg.replays_per_image);
    CHECK(r.image.min().item<double>() >= 0.0);
    CHECK(r.image.max().item<double>() <= 1.0);
    for (size_t a = 0; a < r.replayed.size(); ++a) {
      const auto& box = r.replayed[a].box;
      CHECK(box.x >= 0.0);
      CHECK(box.y >= 0.0);
      CHECK(box.x2() <= 64.0);
      CHECK(box.y2() <= 64.0);
      CHECK(r.replayed[a].lambda >= 0.0);
      CHECK(r.replayed[a].lambda <= 1.0);
      for (const auto& ann : gt[i]) CHECK(ior::iou(box, ann.box) <= cfg.thr);
      for (size_t b = 0; b < a; ++b) CHECK(ior::iou(box, r.replayed[b].box) <= cfg.thr);
    }
  }
}

TEST_CASE("an unplaceable batch reports every skip and leaves pixels alone") {
  std::vector<ior::ImagePlane> images = {torch::rand({3, 32, 32})};
  std::vector<std::vector<ior::Annotation>> gt = {{{0, {0, 0, 32, 32}}}};
  std::vector<ior::CroppedObject> crops(1);
  crops[0].pixels = torch::rand({3, 8, 8});
  crops[0].cls = 1;

  ior::ReplayConfig cfg;
  cfg.thr = 0.0;
  cfg.scale_jitter_lo = 1.0;
  cfg.scale_jitter_hi = 1.0;

  ior::Rng rng(6);
  auto results = ior::augment_batch(images, gt, crops, cfg, rng);
  CHECK(results[0].replayed.empty());
  CHECK(results[0].skipped == cfg.replays_per_image);
  CHECK(torch::equal(results[0].image, images[0]));
}

TEST_CASE("zero replays is a no-op") {
  std::vector<ior::ImagePlane> images = {torch::rand({3, 32, 32})};
  std::vector<std::vector<ior::Annotation>> gt = {{}};
  std::vector<ior::CroppedObject> crops(1);
  crops[0].pixels = torch::rand({3, 8, 8});

  ior::ReplayConfig cfg;
  cfg.replays_per_image = 0;

  ior::Rng rng(8);
  auto results = ior::augment_batch(images, gt, crops, cfg, rng);
  CHECK(results[0].replayed.empty());
  CHECK(results[0].skipped == 0);
  CHECK(torch::equal(results[0].image, images[0]));
}

TEST_CASE("augmentation is bit-reproducible under a fixed seed") {
  std::vector<ior::ImagePlane> images = {torch::rand({3, 48, 48})};
  std::vector<std::vector<ior::Annotation>> gt = {{{0, {2, 2, 10, 10}}}};
  std::vector<ior::CroppedObject> crops(2);
  crops[0].pixels = torch::rand({3, 8, 8});
  crops[0].cls = 0;
  crops[1].pixels = torch::rand({3, 6, 9});
  crops[1].cls = 2;

  ior::ReplayConfig cfg;

  ior::Rng r1(77);
  auto first = ior::augment_batch(images, gt, crops, cfg, r1);
  ior::Rng r2(77);
  auto second = ior::augment_batch(images, gt, crops, cfg, r2);

  CHECK(torch::equal(first[0].image, second[0].image));
  REQUIRE(first[0].replayed.size() == second[0].replayed.size());
  for (size_t i = 0; i < first[0].replayed.size(); ++i) {
    CHECK(first[0].replayed[i].box.x == second[0].replayed[i].box.x);
    CHECK(first[0].replayed[i].lambda == second[0].replayed[i].lambda);
  }

  ior::Rng r3(78);
  auto third = ior::augment_batch(images, gt, crops, cfg, r3);
  REQUIRE(!third[0].replayed.empty());
  CHECK_FALSE(torch::equal(first[0].image, third[0].image));
}

TEST_CASE("placements rotate through the crop classes in order") {
  std::vector<ior::ImagePlane> images = {torch::rand({3, 64, 64})};
  std::vector<std::vector<ior::Annotation>> gt = {{}};
  std::vector<ior::CroppedObject> crops(3);
  crops[0].pixels = torch::rand({3, 6, 6});
  crops[0].cls = 5;
  crops[1].pixels = torch::rand({3, 6, 6});
  crops[1].cls = 3;
  crops[2].pixels = torch::rand({3, 6, 6});
  crops[2].cls = 3;

  ior::ReplayConfig cfg;
  cfg.replays_per_image = 4;
  cfg.scale_jitter_lo = 1.0;
  cfg.scale_jitter_hi = 1.0;

  ior::Rng rng(90);
  auto results = ior::augment_batch(images, gt, crops, cfg, rng);
  REQUIRE(results[0].replayed.size() == 4);
  CHECK(results[0].replayed[0].cls == 3);
  CHECK(results[0].replayed[1].cls == 5);
  CHECK(results[0].replayed[2].cls == 3);
  CHECK(results[0].replayed[3].cls == 5);
}

}  // TEST_SUITE
