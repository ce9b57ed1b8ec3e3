#include "ior_doctest.hpp"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "ior/manifest.hpp"

namespace fs = std::filesystem;

namespace {

struct TempDir {
  std::string path;
  explicit TempDir(const std::string& name) : path("/tmp/ior_cli_" + name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string cli_binary() {
  if (const char* env = std::getenv("IOR_CLI_BIN")) return env;
  return (fs::read_symlink("/proc/self/exe").parent_path() / "ior").string();
}

// exit code plus combined output
struct RunResult {
  int code = -1;
  std::string output;
};

RunResult run_cli(const std::string& args, const std::string& scratch) {
  const auto log = scratch + "/cli_log.txt";
  const int status = std::system((cli_binary() + " " + args + " >" + log + " 2>&1").c_str());
  RunResult r;
  if (WIFEXITED(status)) r.code = WEXITSTATUS(status);
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.output = ss.str();
  return r;
}

std::string write_tiny_config(const std::string& dir) {
  const auto path = dir + "/tiny.json";
  std::ofstream out(path);
  out << R"({
  "dataset": {"num_classes": 2, "train_images": 8, "val_images": 4, "max_objects": 2,
              "canvas": 32, "clutter": 0.0, "min_class_coverage": 2, "seed": 5},
  "schedule": [[0], [1]],
  "detector": {"input_size": 32, "strides": [8, 16], "reg_bins": 8,
               "backbone_channels": [4, 6, 8, 10], "fpn_channels": 8, "head_convs": 1},
  "train": {"base_epochs": 2, "incremental_epochs": 1, "batch_size": 4,
            "warmup_steps": 2, "log_every": 2, "seed": 7},
  "inversion": {"iterations": 2, "per_class": 1, "batch": 1, "jitter": 1,
                "w_min": 0.2, "w_max": 0.4},
  "replay": {"replays_per_image": 1, "only_verified": false},
  "distill": {"top_k": 8, "roi_size": 2}
})";
  return path;
}

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("bad invocations exit nonzero with a message") {
    TempDir tmp("bad_invocations");
    auto r = run_cli("", tmp.path);
    CHECK_NE(r.code, 0);

    r = run_cli("train-base", tmp.path);
    CHECK_NE(r.code, 0);
    CHECK_NE(r.output.find("--config"), std::string::npos);

    r = run_cli("gen-data --config " + tmp.path + "/absent.json", tmp.path);
    CHECK_EQ(r.code, 1);
    CHECK_NE(r.output.find("error:"), std::string::npos);

    const auto cfg = write_tiny_config(tmp.path);
    r = run_cli("invert --config " + cfg + " --workdir " + tmp.path + "/run --step 5", tmp.path);
    CHECK_EQ(r.code, 1);
    CHECK_NE(r.output.find("outside schedule range"), std::string::npos);
  }

  TEST_CASE("gen-data is reproducible and resumable") {
    TempDir tmp("gen_data");
    const auto cfg = write_tiny_config(tmp.path);
    const auto run_a = tmp.path + "/a";
    const auto run_b = tmp.path + "/b";

    CHECK_EQ(run_cli("gen-data --config " + cfg + " --workdir " + run_a, tmp.path).code, 0);
    CHECK_EQ(run_cli("gen-data --config " + cfg + " --workdir " + run_b, tmp.path).code, 0);
    CHECK_EQ(file_bytes(run_a + "/dataset/train/annotations.json"),
             file_bytes(run_b + "/dataset/train/annotations.json"));

    const auto again = run_cli("gen-data --config " + cfg + " --workdir " + run_a, tmp.path);
    CHECK_EQ(again.code, 0);
    CHECK_NE(again.output.find("up to date"), std::string::npos);
  }

  TEST_CASE("--seed overrides the config seed in the manifest") {
    TempDir tmp("seed_override");
    const auto cfg = write_tiny_config(tmp.path);
    const auto run = tmp.path + "/run";
    CHECK_EQ(run_cli("gen-data --config " + cfg + " --workdir " + run + " --seed 11", tmp.path)
                 .code,
             0);
    const auto manifest = ior::load_manifest(run + "/manifest.json");
    REQUIRE(manifest.stages.count("gen-data") == 1);
    CHECK_EQ(manifest.stages.at("gen-data").seed, 11);
  }

  TEST_CASE("missing stage inputs name the stage to run") {
    TempDir tmp("missing_stage");
    const auto cfg = write_tiny_config(tmp.path);
    const auto r =
        run_cli("train-base --config " + cfg + " --workdir " + tmp.path + "/run", tmp.path);
    CHECK_EQ(r.code, 1);
    CHECK_NE(r.output.find("gen-data"), std::string::npos);
  }

  TEST_CASE("pipeline commands chain through eval and plot") {
    TempDir tmp("pipeline");
    const auto cfg = write_tiny_config(tmp.path);
    const auto run = tmp.path + "/run";

    CHECK_EQ(run_cli("gen-data --config " + cfg + " --workdir " + run, tmp.path).code, 0);
    CHECK_EQ(run_cli("train-base --config " + cfg + " --workdir " + run, tmp.path).code, 0);
    const auto inc = run_cli("train-inc --config " + cfg + " --workdir " + run, tmp.path);
    CHECK_EQ(inc.code, 0);
    CHECK_NE(inc.output.find("invert-step-1"), std::string::npos);

    const auto ev = run_cli("eval --config " + cfg + " --workdir " + run, tmp.path);
    CHECK_EQ(ev.code, 0);
    CHECK_NE(ev.output.find("step 0:"), std::string::npos);
    CHECK_NE(ev.output.find("step 1:"), std::string::npos);
    CHECK_NE(ev.output.find("total_ap"), std::string::npos);
    CHECK(fs::exists(run + "/results/eval_step_1.csv"));

    CHECK_EQ(run_cli("plot --config " + cfg + " --workdir " + run, tmp.path).code, 0);
    CHECK(fs::exists(run + "/plots/ap_vs_step.png"));
    CHECK(fs::exists(run + "/plots/bank_contact_sheet.png"));

    const auto empty = run_cli("plot --config " + cfg + " --workdir " + tmp.path + "/none",
                               tmp.path);
    CHECK_EQ(empty.code, 1);
  }
}
