#include "ior_doctest.hpp"

#include <opencv2/imgcodecs.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ior/experiment.hpp"
#include "ior/inversion.hpp"
#include "ior/plot.hpp"

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

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ior::EvalResult result_with(double old_ap, double new_ap, double total_ap) {
  ior::EvalResult r;
  r.old_ap = old_ap;
  r.new_ap = new_ap;
  r.total_ap = total_ap;
  r.per_class_ap[0] = old_ap;
  r.per_class_ap[1] = new_ap;
  return r;
}

}  // namespace

TEST_SUITE("plot") {

TEST_CASE("eval summary rows are recovered from the per-step CSV") {
  TempDir dir("plot_eval_row");
  const std::string path = dir.path + "/eval.csv";
  ior::write_eval_csv(path, 2, result_with(0.25, 0.5, 0.375));
  const auto row = ior::read_eval_summary_row(path);
  CHECK(row.step == 2);
  CHECK(row.old_ap == doctest::Approx(0.25));
  CHECK(row.new_ap == doctest::Approx(0.5));
  CHECK(row.total_ap == doctest::Approx(0.375));

  std::ofstream(path) << "";
  CHECK_THROWS_WITH_AS(ior::read_eval_summary_row(path), doctest::Contains("empty CSV"),
                       std::runtime_error);
  std::ofstream(path) << "step,class_id,ap\n1,0,0.5\n";
  CHECK_THROWS_WITH_AS(ior::read_eval_summary_row(path), doctest::Contains("summary rows"),
                       std::runtime_error);
}

TEST_CASE("ap curves render deterministically from eval CSVs") {
  TempDir dir("plot_curves");
  const std::string a = dir.path + "/eval_0.csv";
  const std::string b = dir.path + "/eval_1.csv";
  ior::write_eval_csv(a, 0, result_with(0.0, 0.6, 0.6));
  ior::write_eval_csv(b, 1, result_with(0.35, 0.5, 0.42));

  const std::string png = dir.path + "/curves.png";
  ior::plot_ap_curves({b, a}, png);
  cv::Mat canvas = cv::imread(png, cv::IMREAD_COLOR);
  REQUIRE(!canvas.empty());
  CHECK(canvas.cols == 720);
  CHECK(canvas.rows == 480);

  const auto first = file_bytes(png);
  ior::plot_ap_curves({a, b}, png);
  CHECK(file_bytes(png) == first);

  CHECK_THROWS_AS(ior::plot_ap_curves({}, png), std::runtime_error);
}

TEST_CASE("ablation bars render and reject an empty table") {
  TempDir dir("plot_bars");
  const std::string csv = dir.path + "/ablation.csv";
  std::vector<ior::AblationRow> rows;
  for (const auto& name : {"finetune", "distill", "distill_replay", "hvd"})
    for (uint64_t seed : {0, 1}) {
      ior::AblationRow r;
      r.name = name;
      r.seed = seed;
      r.step = 1;
      r.result = result_with(0.1 + 0.05 * seed, 0.5, 0.3);
      rows.push_back(r);
    }
  ior::write_ablation_csv(csv, rows);

  const std::string png = dir.path + "/bars.png";
  ior::plot_ablation_bars(csv, png);
  cv::Mat canvas = cv::imread(png, cv::IMREAD_COLOR);
  REQUIRE(!canvas.empty());
  CHECK(canvas.cols == 720);

  const auto first = file_bytes(png);
  ior::plot_ablation_bars(csv, png);
  CHECK(file_bytes(png) == first);

  ior::write_ablation_csv(csv, {});
  CHECK_THROWS_WITH_AS(ior::plot_ablation_bars(csv, png), doctest::Contains("empty CSV"),
                       std::runtime_error);
}

TEST_CASE("contact sheet lays out one captioned tile per bank entry") {
  TempDir dir("plot_sheet");
  const std::string bank_dir = dir.path + "/bank";
  std::vector<ior::GeneratedSample> bank;
  for (int i = 0; i < 5; ++i) {
    ior::GeneratedSample s;
    s.image = torch::full({3, 32, 32}, 0.5f);
    s.label.cls = i % 2;
    s.label.box = {4.0, 5.0, 12.0, 9.0};
    s.verified = i != 4;
    s.teacher_score = 0.8;
    bank.push_back(std::move(s));
  }
  ior::save_bank(bank_dir, bank, "hash");

  const std::string png = dir.path + "/sheet.png";
  ior::plot_contact_sheet(bank_dir, png);
  cv::Mat canvas = cv::imread(png, cv::IMREAD_COLOR);
  REQUIRE(!canvas.empty());
  // 5 entries -> 3 columns, 2 rows of 96px tiles with 18px captions and 4px padding
  CHECK(canvas.cols == 4 + 3 * 100);
  CHECK(canvas.rows == 4 + 2 * 118);

  // inside the first tile, away from the label box: the constant gray survives
  const auto px = canvas.at<cv::Vec3b>(4 + 80, 4 + 80);
  CHECK(std::abs(int(px[0]) - 128) <= 1);
  CHECK(std::abs(int(px[1]) - 128) <= 1);
  CHECK(std::abs(int(px[2]) - 128) <= 1);

  const auto first = file_bytes(png);
  ior::plot_contact_sheet(bank_dir, png);
  CHECK(file_bytes(png) == first);

  CHECK_THROWS_AS(ior::plot_contact_sheet(dir.path + "/missing", png), std::runtime_error);
}

}  // TEST_SUITE
