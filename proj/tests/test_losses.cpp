#include "ior_doctest.hpp"

#include <cmath>
#include <vector>

#include "ior/losses.hpp"

namespace {

ior::DetectorConfig tiny_config() {
  ior::DetectorConfig cfg;
  cfg.num_classes = 3;
  cfg.input_size = 64;
  cfg.strides = {8, 16};
  cfg.reg_bins = 8;
  cfg.backbone_channels = {4, 6, 8, 10};
  cfg.fpn_channels = 8;
  cfg.head_convs = 1;
  return cfg;
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("level positions are cell centers in pixels") {
  auto cfg = tiny_config();
  auto pos = ior::level_positions(0, cfg);  // stride 8, 8x8 grid
  REQUIRE(pos.sizes() == torch::IntArrayRef({64, 2}));
  auto a = pos.accessor<double, 2>();
  CHECK(a[0][0] == 4.0);   // x of cell (0,0)
  CHECK(a[0][1] == 4.0);   // y
  CHECK(a[1][0] == 12.0);  // next cell to the right
  CHECK(a[1][1] == 4.0);
  CHECK(a[8][0] == 4.0);   // next row
  CHECK(a[8][1] == 12.0);
  CHECK(a[63][0] == 60.0);
  CHECK(a[63][1] == 60.0);
}

TEST_CASE("boxes route to the level whose range fits them") {
  auto cfg = tiny_config();
  // level 0 covers half-extents up to (bins-1)*stride - 2*stride = 56 - 16 = 40
  CHECK(ior::level_for_box({10, 10, 20, 20}, cfg) == 0);
  CHECK(ior::level_for_box({0, 0, 80, 80}, cfg) == 0);
  CHECK(ior::level_for_box({0, 0, 82, 82}, cfg) == 1);
  // nothing fits a 300px box; it lands on the last level anyway
  CHECK(ior::level_for_box({0, 0, 300, 300}, cfg) == 1);
}

TEST_CASE("a centered box claims cells near its center") {
  auto cfg = tiny_config();
  std::vector<ior::Annotation> targets = {{1, {24, 24, 16, 16}}};  // center (32,32)
  auto pos = ior::assign_positives(targets, cfg);
  REQUIRE(!pos.empty());
  for (const auto& p : pos) {
    CHECK(p.level == 0);
    CHECK(p.gt_index == 0);
    const int64_t W = cfg.level_size(p.level);
    const double px = (p.pos % W + 0.5) * cfg.strides[p.level];
    const double py = (p.pos / W + 0.5) * cfg.strides[p.level];
    CHECK(px >= 24.0);
    CHECK(px <= 40.0);
    CHECK(py >= 24.0);
    CHECK(py <= 40.0);
  }
}

TEST_CASE("overlap goes to the smaller box") {
  auto cfg = tiny_config();
  std::vector<ior::Annotation> targets = {
      {0, {16, 16, 32, 32}},  // big, center (32,32)
      {1, {28, 28, 8, 8}},    // small, same center
  };
  auto pos = ior::assign_positives(targets, cfg);
  for (const auto& p : pos) {
    const int64_t W = cfg.level_size(p.level);
    const double px = (p.pos % W + 0.5) * cfg.strides[p.level];
    const double py = (p.pos / W + 0.5) * cfg.strides[p.level];
    if (px >= 28 && px <= 36 && py >= 28 && py <= 36) CHECK(p.gt_index == 1);
  }
  bool small_present = false;
  for (const auto& p : pos) small_present |= (p.gt_index == 1);
  CHECK(small_present);
}

TEST_CASE("a box holding no cell center still gets one positive") {
  auto cfg = tiny_config();
  // cell centers sit at 4, 12, 20, ...; this box straddles 7.2..8.2
  std::vector<ior::Annotation> targets = {{2, {7.2, 7.2, 1.0, 1.0}}};
  auto pos = ior::assign_positives(targets, cfg);
  REQUIRE(pos.size() == 1);
  CHECK(pos[0].level == 0);
  CHECK(pos[0].pos == 0);  // nearest grid point to (7.7, 7.7) at stride 8
}

TEST_CASE("decode turns one-hot bins into pixel offsets") {
  auto cfg = tiny_config();
  auto probs = torch::zeros({1, 4, 8}, torch::kFloat64);
  for (int side = 0; side < 4; ++side) probs[0][side][3] = 1.0;
  auto centers = torch::tensor({{32.0, 32.0}}, torch::kFloat64);
  auto strides = torch::tensor({8.0}, torch::kFloat64);
  auto box = ior::decode_boxes(probs, centers, strides, 1.0, 64);
  auto a = box.accessor<double, 2>();
  CHECK(a[0][0] == doctest::Approx(32.0 - 24.0));
  CHECK(a[0][1] == doctest::Approx(8.0));
  CHECK(a[0][2] == doctest::Approx(56.0));
  CHECK(a[0][3] == doctest::Approx(56.0));
}

TEST_CASE("decode of uniform and two-bin mixtures agrees with expectation") {
  auto uniform = torch::full({1, 4, 8}, 1.0 / 8.0, torch::kFloat64);
  auto mix = torch::zeros({1, 4, 8}, torch::kFloat64);
  for (int side = 0; side < 4; ++side) {
    mix[0][side][3] = 0.5;
    mix[0][side][4] = 0.5;
  }
  auto centers = torch::tensor({{32.0, 32.0}}, torch::kFloat64);
  auto strides = torch::tensor({8.0}, torch::kFloat64);
  // both have expectation 3.5 bins = 28 px
  auto bu = ior::decode_boxes(uniform, centers, strides, 1.0, 256);
  auto bm = ior::decode_boxes(mix, centers, strides, 1.0, 256);
  CHECK((bu - bm).abs().max().item<double>() < 1e-12);
  CHECK(bu[0][0].item<double>() == doctest::Approx(4.0));
  CHECK(bu[0][2].item<double>() == doctest::Approx(60.0));
}

TEST_CASE("decode is linear in the distribution away from clamps") {
  torch::manual_seed(0);
  auto p = torch::softmax(torch::randn({5, 4, 8}, torch::kFloat64), -1);
  auto q = torch::softmax(torch::randn({5, 4, 8}, torch::kFloat64), -1);
  auto centers = torch::full({5, 2}, 128.0, torch::kFloat64);
  auto strides = torch::full({5}, 8.0, torch::kFloat64);
  const double alpha = 0.3;
  auto lhs = ior::decode_boxes(alpha * p + (1 - alpha) * q, centers, strides, 1.0, 256);
  auto rhs = alpha * ior::decode_boxes(p, centers, strides, 1.0, 256) +
             (1 - alpha) * ior::decode_boxes(q, centers, strides, 1.0, 256);
  CHECK((lhs - rhs).abs().max().item<double>() < 1e-9);
}

TEST_CASE("decode rejects un-normalized rows") {
  auto probs = torch::full({1, 4, 8}, 0.5, torch::kFloat64);
  auto centers = torch::tensor({{32.0, 32.0}}, torch::kFloat64);
  auto strides = torch::tensor({8.0}, torch::kFloat64);
  CHECK_THROWS(ior::decode_boxes(probs, centers, strides, 1.0, 64));
}

TEST_CASE("empty targets give a pure background loss") {
  auto cfg = tiny_config();
  auto state = ior::make_detector(cfg, {0, 1, 2}, 1);
  torch::manual_seed(2);
  auto out = ior::forward(state, torch::rand({2, 3, 64, 64}));
  auto parts = ior::detection_loss(out, {{}, {}}, {0, 1, 2}, state);
  CHECK(parts.num_pos == 0);
  CHECK(parts.dfl.item<double>() == 0.0);
  CHECK(parts.giou.item<double>() == 0.0);
  CHECK(parts.qfl.item<double>() > 0.0);
  CHECK(std::isfinite(parts.total.item<double>()));
}

TEST_CASE("total combines the parts with fixed weights") {
  auto cfg = tiny_config();
  auto state = ior::make_detector(cfg, {0, 1, 2}, 3);
  torch::manual_seed(4);
  auto out = ior::forward(state, torch::rand({1, 3, 64, 64}));
  std::vector<std::vector<ior::Annotation>> targets = {{{1, {20, 20, 24, 16}}}};
  auto parts = ior::detection_loss(out, targets, {0, 1, 2}, state);
  CHECK(parts.num_pos > 0);
  const double expect = 1.0 * parts.qfl.item<double>() + 0.25 * parts.dfl.item<double>() +
                        2.0 * parts.giou.item<double>();
  CHECK(parts.total.item<double>() == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("targets outside the active set are rejected") {
  auto cfg = tiny_config();
  auto state = ior::make_detector(cfg, {0, 1, 2}, 3);
  auto out = ior::forward(state, torch::rand({1, 3, 64, 64}));
  std::vector<std::vector<ior::Annotation>> targets = {{{2, {20, 20, 24, 16}}}};
  CHECK_THROWS(ior::detection_loss(out, targets, {0, 1}, state));
}

TEST_CASE("autograd input gradient matches finite differences") {
  auto cfg = tiny_config();
  auto state = ior::make_detector(cfg, {0, 1, 2}, 9);
  state.model->to(torch::kFloat64);
  ior::set_eval(state);  // keep batchnorm off the batch statistics path

  std::vector<std::vector<ior::Annotation>> targets = {
      {{0, {10, 12, 20, 18}}, {2, {30, 34, 24, 22}}}};

  torch::manual_seed(6);
  auto x = torch::rand({1, 3, 64, 64}, torch::kFloat64);

  auto loss_at = [&](const torch::Tensor& inp) {
    auto out = state.model->run(inp, false);
    return ior::detection_loss(out, targets, {0, 1, 2}, state).total;
  };

  auto xg = x.clone().requires_grad_(true);
  auto loss = loss_at(xg);
  loss.backward();
  auto grad = xg.grad();

  torch::NoGradGuard guard;
  const double h = 1e-6;
  torch::manual_seed(7);
  for (int t = 0; t < 6; ++t) {
    const int64_t c = torch::randint(3, {1}).item<int64_t>();
    const int64_t y = torch::randint(64, {1}).item<int64_t>();
    const int64_t xx = torch::randint(64, {1}).item<int64_t>();
    auto xp = x.clone();
    xp[0][c][y][xx] += h;
    auto xm = x.clone();
    xm[0][c][y][xx] -= h;
    const double fd = (loss_at(xp).item<double>() - loss_at(xm).item<double>()) / (2 * h);
    const double an = grad[0][c][y][xx].item<double>();
    CHECK(std::abs(fd - an) < 1e-4 * std::max(1.0, std::abs(an)));
  }
}

}  // TEST_SUITE
