#include "ior_doctest.hpp"

#include <filesystem>
#include <fstream>
#include <vector>

#include "ior/checkpoint.hpp"
#include "ior/experiment.hpp"
#include "ior/manifest.hpp"
#include "ior/shapes_world.hpp"
#include "ior/train.hpp"

namespace fs = std::filesystem;

namespace {

struct TempDir {
  std::string path;
  explicit TempDir(const std::string& name) : path("/tmp/ior_test_" + name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

ior::ExperimentConfig tiny_experiment() {
  ior::ExperimentConfig cfg;
  cfg.dataset.num_classes = 2;
  cfg.dataset.train_images = 12;
  cfg.dataset.val_images = 6;
  cfg.dataset.min_objects = 1;
  cfg.dataset.max_objects = 2;
  cfg.dataset.canvas = 32;
  cfg.dataset.clutter = 0.05;
  cfg.dataset.min_class_coverage = 3;
  cfg.dataset.seed = 5;
  cfg.schedule.steps = {{0}, {1}};
  cfg.mode = "non-co";
  cfg.detector.input_size = 32;
  cfg.detector.strides = {8, 16};
  cfg.detector.reg_bins = 8;
  cfg.detector.backbone_channels = {4, 6, 8, 10};
  cfg.detector.fpn_channels = 8;
  cfg.detector.head_convs = 1;
  cfg.train.base_epochs = 12;
  cfg.train.incremental_epochs = 2;
  cfg.train.batch_size = 4;
  cfg.train.learning_rate = 3e-3;
  cfg.train.warmup_steps = 4;
  cfg.train.log_every = 4;
  cfg.train.seed = 7;
  cfg.inversion.iterations = 6;
  cfg.inversion.per_class = 2;
  cfg.inversion.batch = 2;
  cfg.inversion.jitter = 1;
  cfg.inversion.w_min = 0.2;
  cfg.inversion.w_max = 0.4;
  cfg.replay.replays_per_image = 1;
  cfg.replay.only_verified = false;
  cfg.distill.top_k = 8;
  cfg.distill.roi_size = 2;
  return cfg;
}

// dataset rendered and base model trained once, shared by the cases below
struct Pipeline {
  TempDir dir{"train_fixture"};
  ior::ExperimentConfig cfg = tiny_experiment();
  std::vector<ior::DatasetSplit> splits;
  ior::DetectorState base;
  std::vector<ior::StepMetrics> base_rows;

  Pipeline() {
    const auto dataset = dir.path + "/dataset";
    ior::generate_dataset(cfg, dataset);
    splits = ior::build_training_splits(dataset, cfg.schedule, cfg.mode);
    base = ior::make_detector(cfg.detector, cfg.schedule.steps[0], 7);
    ior::Rng rng(7);
    base_rows = ior::train_base(base, splits[0], cfg.train, rng);
  }
};

Pipeline& pipeline() {
  static Pipeline p;
  return p;
}

std::vector<ior::GeneratedSample> fake_bank(int64_t cls, int64_t image_size, int count) {
  torch::manual_seed(11);
  std::vector<ior::GeneratedSample> bank;
  for (int i = 0; i < count; ++i) {
    ior::GeneratedSample s;
    s.image = torch::rand({3, image_size, image_size});
    s.label.cls = cls;
    s.label.box = {4.0, 5.0, 12.0, 9.0};
    s.verified = true;
    s.teacher_score = 0.9;
    bank.push_back(std::move(s));
  }
  return bank;
}

std::vector<torch::Tensor> param_snapshot(const ior::DetectorState& state) {
  std::vector<torch::Tensor> out;
  for (const auto& p : state.model->parameters()) out.push_back(p.detach().clone());
  return out;
}

}  // namespace

TEST_SUITE("train") {

TEST_CASE("metrics csv round trips and rejects foreign headers") {
  TempDir dir("metrics_csv");
  const std::string path = dir.path + "/m.csv";
  std::vector<ior::StepMetrics> rows = {{0, 1.5, 0.25, 0.125, 1.875}, {50, 0.75, 0.0, 0.5, 1.25}};
  ior::write_metrics_csv(path, rows);

  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,L_detect,L_feat,L_logit,L_total");

  const auto back = ior::read_metrics_csv(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].step == 0);
  CHECK(back[0].total == doctest::Approx(1.875));
  CHECK(back[1].logit == doctest::Approx(0.5));

  std::ofstream(path) << "step,loss\n1,2\n";
  CHECK_THROWS_AS(ior::read_metrics_csv(path), std::runtime_error);
}

TEST_CASE("base training reduces the detection loss and logs detection-only rows") {
  auto& p = pipeline();
  REQUIRE(!p.base_rows.empty());
  CHECK(p.base_rows.front().step == 0);
  for (const auto& r : p.base_rows) {
    CHECK(r.feat == 0.0);
    CHECK(r.logit == 0.0);
    CHECK(r.detect == r.total);
    CHECK(std::isfinite(r.detect));
  }
  CHECK(p.base_rows.back().detect < p.base_rows.front().detect);
  // final row is always logged
  const auto n = static_cast<int64_t>(p.splits[0].images.size());
  const int64_t batches = (n + p.cfg.train.batch_size - 1) / p.cfg.train.batch_size;
  CHECK(p.base_rows.back().step == p.cfg.train.base_epochs * batches - 1);
  CHECK(!p.base.model->is_training());
}

TEST_CASE("incremental with every toggle off is pure fine-tuning") {
  auto& p = pipeline();
  auto cfg = p.cfg;
  cfg.toggles = {false, false, false, false};
  auto student = ior::expand_for_new_classes(p.base, {1}, 3);
  ior::IncrementalSetup setup;
  setup.split = &p.splits[1];
  setup.teacher = &p.base;
  setup.old_classes = {0};
  ior::Rng rng(3);
  const auto rows = ior::train_incremental(student, setup, cfg, rng);
  REQUIRE(!rows.empty());
  for (const auto& r : rows) {
    CHECK(r.feat == 0.0);
    CHECK(r.logit == 0.0);
    CHECK(r.detect == doctest::Approx(r.total));
  }
}

TEST_CASE("incremental run with replay and high-value distillation leaves the teacher intact") {
  auto& p = pipeline();
  auto cfg = p.cfg;
  cfg.toggles = {true, true, true, false};
  cfg.distill.hvd_on = true;
  const auto before = param_snapshot(p.base);

  auto student = ior::expand_for_new_classes(p.base, {1}, 3);
  ior::IncrementalSetup setup;
  setup.split = &p.splits[1];
  setup.teacher = &p.base;
  setup.old_classes = {0};
  setup.crops = ior::crop_objects(fake_bank(0, 32, 4), false);
  ior::Rng rng(3);
  const auto rows = ior::train_incremental(student, setup, cfg, rng);

  REQUIRE(!rows.empty());
  for (const auto& r : rows) {
    CHECK(std::isfinite(r.total));
    CHECK(r.feat >= 0.0);
    CHECK(r.logit >= 0.0);
  }
  // distillation pulls on the student only
  const auto after = param_snapshot(p.base);
  REQUIRE(after.size() == before.size());
  for (size_t i = 0; i < after.size(); ++i) CHECK(torch::equal(after[i], before[i]));
  CHECK(!student.model->is_training());
}

TEST_CASE("incremental accepts dense distillation and pseudo labels") {
  auto& p = pipeline();
  auto cfg = p.cfg;
  cfg.toggles = {true, true, true, true};
  cfg.distill.hvd_on = false;
  cfg.train.incremental_epochs = 1;

  auto student = ior::expand_for_new_classes(p.base, {1}, 3);
  ior::IncrementalSetup setup;
  setup.split = &p.splits[1];
  setup.teacher = &p.base;
  setup.old_classes = {0};
  setup.crops = ior::crop_objects(fake_bank(0, 32, 3), false);
  ior::Rng rng(9);
  const auto rows = ior::train_incremental(student, setup, cfg, rng);
  REQUIRE(!rows.empty());
  for (const auto& r : rows) CHECK(std::isfinite(r.total));
}

TEST_CASE("manifest stages persist atomically and gate on their hash") {
  TempDir dir("manifest");
  const std::string path = dir.path + "/manifest.json";
  ior::RunManifest m;
  m.config_hash = "abc";
  m.source_revision = "rev0";
  ior::StageRecord rec;
  rec.config_hash = "h1";
  rec.seed = 42;
  rec.wall_seconds = 1.5;
  rec.artifacts = {"a/b.ckpt"};
  ior::record_stage(m, path, "train-base", rec);

  CHECK(!fs::exists(path + ".tmp"));
  const auto back = ior::load_manifest(path);
  CHECK(back.config_hash == "abc");
  CHECK(back.source_revision == "rev0");
  REQUIRE(back.stages.count("train-base") == 1);
  CHECK(back.stages.at("train-base").seed == 42);
  CHECK(back.stages.at("train-base").artifacts == std::vector<std::string>{"a/b.ckpt"});

  CHECK(ior::stage_current(back, "train-base", "h1"));
  CHECK(!ior::stage_current(back, "train-base", "h2"));
  CHECK(!ior::stage_current(back, "gen-data", "h1"));

  CHECK(ior::load_manifest(dir.path + "/none.json").stages.empty());
}

TEST_CASE("missing stage inputs are reported by the stage that makes them") {
  TempDir dir("missing_stage");
  const auto cfg = tiny_experiment();
  const auto paths = ior::default_paths(dir.path);
  ior::StageRunner runner(paths.manifest_file, cfg);
  CHECK_THROWS_WITH_AS(ior::stage_train_base(cfg, paths, runner),
                       doctest::Contains("gen-data"), std::runtime_error);
  CHECK_THROWS_WITH_AS(ior::stage_invert(cfg, paths, 1, runner),
                       doctest::Contains("train-base"), std::runtime_error);
  CHECK_THROWS_WITH_AS(ior::stage_eval(cfg, paths, 1, runner),
                       doctest::Contains("train-inc-step-1"), std::runtime_error);
}

TEST_CASE("full experiment runs end to end and resumes without redoing work") {
  TempDir dir("full_experiment");
  const auto cfg = tiny_experiment();
  const auto paths = ior::default_paths(dir.path);

  const auto evals = ior::run_full_experiment(cfg, paths);
  REQUIRE(evals.size() == 2);
  CHECK(evals[0].step == 0);
  CHECK(evals[1].step == 1);
  CHECK(fs::exists(paths.checkpoint(0)));
  CHECK(fs::exists(paths.checkpoint(1)));
  CHECK(fs::exists(paths.bank_dir(1) + "/bank_manifest.json"));
  CHECK(fs::exists(paths.bank_dir(1) + "/ratios.json"));
  CHECK(fs::exists(paths.metrics_csv(0)));
  CHECK(fs::exists(paths.metrics_csv(1)));
  CHECK(fs::exists(paths.eval_csv(1)));
  CHECK(fs::exists(paths.summary_json()));
  CHECK(fs::exists(paths.manifest_file));

  const auto cached = ior::read_summary_step(paths.summary_json(), 1);
  REQUIRE(cached.has_value());
  CHECK(cached->total_ap == doctest::Approx(evals[1].result.total_ap));

  const auto stamp0 = fs::last_write_time(paths.checkpoint(0));
  const auto stamp1 = fs::last_write_time(paths.checkpoint(1));
  const auto again = ior::run_full_experiment(cfg, paths);
  CHECK(fs::last_write_time(paths.checkpoint(0)) == stamp0);
  CHECK(fs::last_write_time(paths.checkpoint(1)) == stamp1);
  REQUIRE(again.size() == 2);
  CHECK(again[1].result.total_ap == doctest::Approx(evals[1].result.total_ap));

  // a config change that only touches the incremental stage leaves the base alone
  auto cfg2 = cfg;
  cfg2.distill.top_k = 4;
  const auto third = ior::run_full_experiment(cfg2, paths);
  CHECK(fs::last_write_time(paths.checkpoint(0)) == stamp0);
  CHECK(fs::last_write_time(paths.checkpoint(1)) != stamp1);
  REQUIRE(third.size() == 2);
}

TEST_CASE("ablation variants pin the four method rows") {
  const auto cfg = tiny_experiment();
  const auto ft = ior::ablation_variant(cfg, "finetune");
  CHECK(!ft.toggles.replay_on);
  CHECK(!ft.toggles.feat_distill_on);
  CHECK(!ft.toggles.logit_distill_on);
  const auto d = ior::ablation_variant(cfg, "distill");
  CHECK(!d.toggles.replay_on);
  CHECK(d.toggles.feat_distill_on);
  CHECK(!d.distill.hvd_on);
  const auto dr = ior::ablation_variant(cfg, "distill_replay");
  CHECK(dr.toggles.replay_on);
  CHECK(!dr.distill.hvd_on);
  const auto hv = ior::ablation_variant(cfg, "hvd");
  CHECK(hv.toggles.replay_on);
  CHECK(hv.distill.hvd_on);
  CHECK_THROWS_AS(ior::ablation_variant(cfg, "bogus"), std::invalid_argument);
}

TEST_CASE("ablation csv round trips") {
  TempDir dir("ablation_csv");
  const std::string path = dir.path + "/ablation.csv";
  std::vector<ior::AblationRow> rows(2);
  rows[0].name = "finetune";
  rows[0].seed = 0;
  rows[0].step = 1;
  rows[0].result.old_ap = 0.1;
  rows[0].result.new_ap = 0.5;
  rows[0].result.total_ap = 0.3;
  rows[1].name = "hvd";
  rows[1].seed = 2;
  rows[1].step = 1;
  rows[1].result.old_ap = 0.4;
  rows[1].result.new_ap = 0.5;
  rows[1].result.total_ap = 0.45;
  ior::write_ablation_csv(path, rows);
  const auto back = ior::read_ablation_csv(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == "finetune");
  CHECK(back[1].seed == 2);
  CHECK(back[1].result.old_ap == doctest::Approx(0.4));
}

}  // TEST_SUITE
