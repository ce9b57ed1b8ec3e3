#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ior/config.hpp"
#include "ior/eval.hpp"
#include "ior/manifest.hpp"

namespace ior {

// canonical artifact layout under one run directory
struct RunPaths {
  std::string workdir;
  std::string dataset_dir;
  std::string checkpoints_dir;
  std::string bank_root;
  std::string metrics_dir;
  std::string results_dir;
  std::string plots_dir;
  std::string manifest_file;

  std::string checkpoint(size_t step) const;  // step 0 = base model
  std::string bank_dir(size_t step) const;
  std::string metrics_csv(size_t step) const;
  std::string eval_csv(size_t step) const;
  std::string summary_json() const;
};

RunPaths default_paths(const std::string& workdir);

// per-stage config hashes: a stage re-runs only when inputs it can see changed
std::string gen_stage_hash(const ExperimentConfig& cfg);
std::string base_stage_hash(const ExperimentConfig& cfg);
std::string invert_stage_hash(const ExperimentConfig& cfg, size_t step);
std::string inc_stage_hash(const ExperimentConfig& cfg, size_t step);

// manifest-backed skip/record around the work functions below
class StageRunner {
 public:
  StageRunner(std::string manifest_path, const ExperimentConfig& cfg);

  // false when the stage was current and primary_artifact exists
  bool run(const std::string& stage, const std::string& hash,
           const std::string& primary_artifact, uint64_t seed,
           std::vector<std::string> artifacts, const std::function<void()>& work);

  const RunManifest& manifest() const { return manifest_; }

 private:
  std::string path_;
  RunManifest manifest_;
};

uint64_t stage_seed(uint64_t base_seed, uint64_t salt);

// work functions; no manifest handling, throw on missing inputs
void do_gen_data(const ExperimentConfig& cfg, const std::string& dataset_dir);
void do_train_base(const ExperimentConfig& cfg, const std::string& dataset_dir,
                   const std::string& ckpt_out, const std::string& metrics_out,
                   uint64_t seed);
struct BankBuildStats {
  int64_t requested = 0;
  int64_t generated = 0;
  int64_t verified = 0;
};
BankBuildStats do_invert(const ExperimentConfig& cfg, const std::string& dataset_dir,
                         const std::string& teacher_ckpt, const std::string& bank_out,
                         size_t step, uint64_t seed);
void do_train_inc(const ExperimentConfig& cfg, const std::string& dataset_dir,
                  const std::string& prev_ckpt, const std::string& bank_dir,
                  const std::string& ckpt_out, const std::string& metrics_out, size_t step,
                  uint64_t seed);
EvalResult do_eval(const ExperimentConfig& cfg, const std::string& dataset_dir,
                   const std::string& ckpt, size_t step);

void upsert_summary(const std::string& path, size_t step, const EvalResult& result);
std::optional<EvalResult> read_summary_step(const std::string& path, size_t step);
void write_eval_csv(const std::string& path, size_t step, const EvalResult& result);

// stage wrappers with the canonical names used by the CLI
void stage_gen_data(const ExperimentConfig& cfg, const RunPaths& paths, StageRunner& runner);
void stage_train_base(const ExperimentConfig& cfg, const RunPaths& paths,
                      StageRunner& runner);
void stage_invert(const ExperimentConfig& cfg, const RunPaths& paths, size_t step,
                  StageRunner& runner);
void stage_train_inc(const ExperimentConfig& cfg, const RunPaths& paths, size_t step,
                     StageRunner& runner);
EvalResult stage_eval(const ExperimentConfig& cfg, const RunPaths& paths, size_t step,
                      StageRunner& runner);

struct StepEval {
  size_t step = 0;
  EvalResult result;
};

// gen-data through eval for every schedule step
std::vector<StepEval> run_full_experiment(const ExperimentConfig& cfg, const RunPaths& paths);

struct AblationRow {
  std::string name;  // finetune | distill | distill_replay | hvd
  uint64_t seed = 0;
  size_t step = 0;
  EvalResult result;
};

ExperimentConfig ablation_variant(const ExperimentConfig& cfg, const std::string& name);

// the four-method ladder per seed; dataset, base model and bank are shared
// where their stage hashes allow; rows land in <workdir>/ablation.csv
std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg, const std::string& workdir,
                                      const std::vector<uint64_t>& seeds);

void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows);
std::vector<AblationRow> read_ablation_csv(const std::string& path);

}  // namespace ior
