#include "ior/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "ior/checkpoint.hpp"
#include "ior/dataset.hpp"
#include "ior/inversion.hpp"
#include "ior/replay.hpp"
#include "ior/shapes_world.hpp"
#include "ior/train.hpp"

namespace fs = std::filesystem;

namespace ior {

namespace {

std::string step_name(const char* prefix, size_t step) {
  return std::string(prefix) + "-step-" + std::to_string(step);
}

// which earlier stage produces the checkpoint for `step`
std::string producer_of_checkpoint(size_t step) {
  return step == 0 ? std::string("train-base") : step_name("train-inc", step);
}

void require_artifact(const std::string& path, const std::string& producer) {
  if (!fs::exists(path))
    throw std::runtime_error("missing artifact " + path + "; run " + producer + " first");
}

std::string subset_hash(const ExperimentConfig& cfg, const std::vector<std::string>& keys) {
  const auto full = experiment_config_to_json(cfg);
  nlohmann::json j;
  for (const auto& k : keys) j[k] = full.at(k);
  return sha256_hex(j.dump());
}

}  // namespace

std::string RunPaths::checkpoint(size_t step) const {
  return checkpoints_dir + "/step_" + std::to_string(step) + ".ckpt";
}
std::string RunPaths::bank_dir(size_t step) const {
  return bank_root + "/step_" + std::to_string(step);
}
std::string RunPaths::metrics_csv(size_t step) const {
  return metrics_dir + "/step_" + std::to_string(step) + ".csv";
}
std::string RunPaths::eval_csv(size_t step) const {
  return results_dir + "/eval_step_" + std::to_string(step) + ".csv";
}
std::string RunPaths::summary_json() const { return results_dir + "/summary.json"; }

RunPaths default_paths(const std::string& workdir) {
  RunPaths p;
  p.workdir = workdir;
  p.dataset_dir = workdir + "/dataset";
  p.checkpoints_dir = workdir + "/checkpoints";
  p.bank_root = workdir + "/bank";
  p.metrics_dir = workdir + "/metrics";
  p.results_dir = workdir + "/results";
  p.plots_dir = workdir + "/plots";
  p.manifest_file = workdir + "/manifest.json";
  return p;
}

std::string gen_stage_hash(const ExperimentConfig& cfg) {
  return subset_hash(cfg, {"dataset", "schedule", "mode"});
}
std::string base_stage_hash(const ExperimentConfig& cfg) {
  return subset_hash(cfg, {"dataset", "schedule", "mode", "detector", "train"});
}
std::string invert_stage_hash(const ExperimentConfig& cfg, size_t step) {
  // the step-1 teacher is the base model, which no toggle can influence
  if (step <= 1)
    return subset_hash(cfg, {"dataset", "schedule", "mode", "detector", "train", "inversion"});
  return subset_hash(cfg, {"dataset", "schedule", "mode", "detector", "train", "inversion",
                           "replay", "distill", "toggles"});
}
std::string inc_stage_hash(const ExperimentConfig& cfg, size_t) {
  return config_hash(cfg);
}

StageRunner::StageRunner(std::string manifest_path, const ExperimentConfig& cfg)
    : path_(std::move(manifest_path)), manifest_(load_manifest(path_)) {
  manifest_.config_hash = config_hash(cfg);
  manifest_.source_revision = detect_source_revision();
}

bool StageRunner::run(const std::string& stage, const std::string& hash,
                      const std::string& primary_artifact, uint64_t seed,
                      std::vector<std::string> artifacts,
                      const std::function<void()>& work) {
  if (stage_current(manifest_, stage, hash) && !primary_artifact.empty() &&
      fs::exists(primary_artifact)) {
    std::cout << "[" << stage << "] up to date\n";
    return false;
  }
  const auto t0 = std::chrono::steady_clock::now();
  work();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  StageRecord rec;
  rec.config_hash = hash;
  rec.seed = seed;
  rec.wall_seconds = secs;
  rec.artifacts = std::move(artifacts);
  record_stage(manifest_, path_, stage, std::move(rec));
  std::cout << "[" << stage << "] done (" << secs << " s)\n";
  return true;
}

uint64_t stage_seed(uint64_t base_seed, uint64_t salt) {
  uint64_t x = base_seed * 0x9e3779b97f4a7c15ULL + salt;
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  return x;
}

void do_gen_data(const ExperimentConfig& cfg, const std::string& dataset_dir) {
  generate_dataset(cfg, dataset_dir);
}

void do_train_base(const ExperimentConfig& cfg, const std::string& dataset_dir,
                   const std::string& ckpt_out, const std::string& metrics_out,
                   uint64_t seed) {
  const auto splits = build_training_splits(dataset_dir, cfg.schedule, cfg.mode);
  auto state = make_detector(cfg.detector, cfg.schedule.steps.at(0), seed);
  Rng rng(seed);
  const auto rows = train_base(state, splits.at(0), cfg.train, rng);
  fs::create_directories(fs::path(metrics_out).parent_path());
  write_metrics_csv(metrics_out, rows);
  fs::create_directories(fs::path(ckpt_out).parent_path());
  save_checkpoint(state, ckpt_out);
}

BankBuildStats do_invert(const ExperimentConfig& cfg, const std::string& dataset_dir,
                         const std::string& teacher_ckpt, const std::string& bank_out,
                         size_t step, uint64_t seed) {
  if (step == 0) throw std::invalid_argument("do_invert: step must be >= 1");
  auto teacher = load_checkpoint(teacher_ckpt);
  const auto seen = cfg.schedule.seen_through(step - 1);

  const auto data = read_annotations((fs::path(dataset_dir) / "train" / "annotations.json").string());
  std::map<int64_t, std::vector<Annotation>> per_class;
  for (int64_t cid : seen) per_class[cid];
  for (const auto& [image_id, anns] : data.by_image)
    for (const auto& ann : anns)
      if (per_class.count(ann.class_id)) per_class[ann.class_id].push_back(ann);
  const auto hist = build_ratio_histograms(per_class, cfg.inversion.ratio_bins);
  fs::create_directories(bank_out);
  save_ratio_histograms((fs::path(bank_out) / "ratios.json").string(), hist);

  Rng rng(seed);
  std::vector<SampledLabel> labels;
  for (int64_t cid : seen)
    for (int64_t i = 0; i < cfg.inversion.per_class; ++i)
      labels.push_back(sample_label(cid, cfg.detector.input_size, hist, cfg.inversion, rng));

  BankBuildStats stats;
  stats.requested = static_cast<int64_t>(labels.size());
  std::vector<GeneratedSample> bank;
  const auto chunk = static_cast<size_t>(cfg.inversion.batch);
  for (size_t first = 0; first < labels.size(); first += chunk) {
    const size_t last = std::min(labels.size(), first + chunk);
    const std::vector<SampledLabel> part(labels.begin() + first, labels.begin() + last);
    auto samples = invert(teacher, part, cfg.inversion, rng);
    for (auto& s : samples) {
      const auto v =
          verify_generated(teacher, s, cfg.inversion.verify_score, cfg.inversion.verify_iou);
      s.verified = v.verified;
      s.teacher_score = v.teacher_score;
      s.seed = seed;
      if (s.verified) ++stats.verified;
    }
    bank.insert(bank.end(), std::make_move_iterator(samples.begin()),
                std::make_move_iterator(samples.end()));
  }
  stats.generated = static_cast<int64_t>(bank.size());
  save_bank(bank_out, bank, invert_stage_hash(cfg, step));
  return stats;
}

void do_train_inc(const ExperimentConfig& cfg, const std::string& dataset_dir,
                  const std::string& prev_ckpt, const std::string& bank_dir,
                  const std::string& ckpt_out, const std::string& metrics_out, size_t step,
                  uint64_t seed) {
  if (step == 0) throw std::invalid_argument("do_train_inc: step must be >= 1");
  auto teacher = load_checkpoint(prev_ckpt);
  const auto splits = build_training_splits(dataset_dir, cfg.schedule, cfg.mode);
  if (step >= splits.size())
    throw std::invalid_argument("do_train_inc: schedule has no step " + std::to_string(step));

  auto student = expand_for_new_classes(teacher, cfg.schedule.steps.at(step), seed);
  IncrementalSetup setup;
  setup.split = &splits[step];
  setup.teacher = &teacher;
  setup.old_classes = cfg.schedule.seen_through(step - 1);
  if (cfg.toggles.replay_on) {
    const auto bank = load_bank(bank_dir);
    setup.crops = crop_objects(bank, cfg.replay.only_verified);
  }

  Rng rng(seed);
  const auto rows = train_incremental(student, setup, cfg, rng);
  fs::create_directories(fs::path(metrics_out).parent_path());
  write_metrics_csv(metrics_out, rows);
  fs::create_directories(fs::path(ckpt_out).parent_path());
  save_checkpoint(student, ckpt_out);
}

EvalResult do_eval(const ExperimentConfig& cfg, const std::string& dataset_dir,
                   const std::string& ckpt, size_t step) {
  auto state = load_checkpoint(ckpt);
  const auto seen = cfg.schedule.seen_through(step);
  auto split = load_eval_split(dataset_dir, seen);
  const std::vector<int64_t> old_classes =
      step == 0 ? std::vector<int64_t>{} : cfg.schedule.seen_through(step - 1);
  return evaluate_split(state, split, cfg.train, old_classes, cfg.schedule.steps.at(step));
}

void upsert_summary(const std::string& path, size_t step, const EvalResult& result) {
  nlohmann::json j;
  {
    std::ifstream in(path);
    if (in) in >> j;
  }
  if (!j.is_object()) j = nlohmann::json::object();
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [cid, ap] : result.per_class_ap) per_class[std::to_string(cid)] = ap;
  j["steps"][std::to_string(step)] = {{"old_ap", result.old_ap},
                                      {"new_ap", result.new_ap},
                                      {"total_ap", result.total_ap},
                                      {"per_class", per_class}};
  write_file_atomic(path, j.dump(2) + "\n");
}

std::optional<EvalResult> read_summary_step(const std::string& path, size_t step) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
  const auto key = std::to_string(step);
  if (!j.contains("steps") || !j["steps"].contains(key)) return std::nullopt;
  const auto& e = j["steps"][key];
  EvalResult r;
  r.old_ap = e.value("old_ap", 0.0);
  r.new_ap = e.value("new_ap", 0.0);
  r.total_ap = e.value("total_ap", 0.0);
  const auto per_class = e.value("per_class", nlohmann::json::object());
  for (const auto& [cid, ap] : per_class.items())
    r.per_class_ap[std::stoll(cid)] = ap.get<double>();
  return r;
}

void write_eval_csv(const std::string& path, size_t step, const EvalResult& result) {
  std::ostringstream out;
  out << "step,class_id,ap\n";
  for (const auto& [cid, ap] : result.per_class_ap)
    out << step << "," << cid << "," << ap << "\n";
  out << step << ",old_ap," << result.old_ap << "\n";
  out << step << ",new_ap," << result.new_ap << "\n";
  out << step << ",total_ap," << result.total_ap << "\n";
  write_file_atomic(path, out.str());
}

void stage_gen_data(const ExperimentConfig& cfg, const RunPaths& paths, StageRunner& runner) {
  const auto hash = gen_stage_hash(cfg);
  runner.run("gen-data", hash, paths.dataset_dir + "/dataset_manifest.json", cfg.dataset.seed,
             {paths.dataset_dir},
             [&] { do_gen_data(cfg, paths.dataset_dir); });
}

void stage_train_base(const ExperimentConfig& cfg, const RunPaths& paths,
                      StageRunner& runner) {
  const auto hash = base_stage_hash(cfg);
  const auto seed = stage_seed(cfg.train.seed, 1);
  runner.run("train-base", hash, paths.checkpoint(0), seed,
             {paths.checkpoint(0), paths.metrics_csv(0)}, [&] {
               require_artifact(paths.dataset_dir + "/dataset_manifest.json", "gen-data");
               do_train_base(cfg, paths.dataset_dir, paths.checkpoint(0),
                             paths.metrics_csv(0), seed);
             });
}

void stage_invert(const ExperimentConfig& cfg, const RunPaths& paths, size_t step,
                  StageRunner& runner) {
  const auto name = step_name("invert", step);
  const auto hash = invert_stage_hash(cfg, step);
  const auto seed = stage_seed(cfg.train.seed, 100 + step);
  runner.run(name, hash, paths.bank_dir(step) + "/bank_manifest.json", seed,
             {paths.bank_dir(step)}, [&] {
               require_artifact(paths.checkpoint(step - 1), producer_of_checkpoint(step - 1));
               const auto stats = do_invert(cfg, paths.dataset_dir, paths.checkpoint(step - 1),
                                            paths.bank_dir(step), step, seed);
               std::cout << "[" << name << "] verified " << stats.verified << "/"
                         << stats.generated << "\n";
             });
}

void stage_train_inc(const ExperimentConfig& cfg, const RunPaths& paths, size_t step,
                     StageRunner& runner) {
  const auto name = step_name("train-inc", step);
  const auto hash = inc_stage_hash(cfg, step);
  const auto seed = stage_seed(cfg.train.seed, 200 + step);
  runner.run(name, hash, paths.checkpoint(step), seed,
             {paths.checkpoint(step), paths.metrics_csv(step)}, [&] {
               require_artifact(paths.checkpoint(step - 1), producer_of_checkpoint(step - 1));
               if (cfg.toggles.replay_on)
                 require_artifact(paths.bank_dir(step) + "/bank_manifest.json",
                                  step_name("invert", step));
               do_train_inc(cfg, paths.dataset_dir, paths.checkpoint(step - 1),
                            paths.bank_dir(step), paths.checkpoint(step),
                            paths.metrics_csv(step), step, seed);
             });
}

EvalResult stage_eval(const ExperimentConfig& cfg, const RunPaths& paths, size_t step,
                      StageRunner& runner) {
  const auto name = step_name("eval", step);
  const auto hash = inc_stage_hash(cfg, step);
  if (stage_current(runner.manifest(), name, hash))
    if (const auto cached = read_summary_step(paths.summary_json(), step)) {
      std::cout << "[" << name << "] up to date\n";
      return *cached;
    }
  EvalResult result;
  runner.run(name, hash, "", 0, {paths.eval_csv(step), paths.summary_json()}, [&] {
    require_artifact(paths.checkpoint(step), producer_of_checkpoint(step));
    result = do_eval(cfg, paths.dataset_dir, paths.checkpoint(step), step);
    write_eval_csv(paths.eval_csv(step), step, result);
    upsert_summary(paths.summary_json(), step, result);
  });
  std::cout << "[" << name << "] old_ap " << result.old_ap << " new_ap " << result.new_ap
            << " total_ap " << result.total_ap << "\n";
  return result;
}

std::vector<StepEval> run_full_experiment(const ExperimentConfig& cfg, const RunPaths& paths) {
  cfg.validate();
  StageRunner runner(paths.manifest_file, cfg);
  stage_gen_data(cfg, paths, runner);
  stage_train_base(cfg, paths, runner);
  std::vector<StepEval> evals;
  evals.push_back({0, stage_eval(cfg, paths, 0, runner)});
  for (size_t step = 1; step < cfg.schedule.steps.size(); ++step) {
    if (cfg.toggles.replay_on) stage_invert(cfg, paths, step, runner);
    stage_train_inc(cfg, paths, step, runner);
    evals.push_back({step, stage_eval(cfg, paths, step, runner)});
  }
  return evals;
}

ExperimentConfig ablation_variant(const ExperimentConfig& cfg, const std::string& name) {
  ExperimentConfig out = cfg;
  out.toggles.pseudo_label_on = false;
  if (name == "finetune") {
    out.toggles.replay_on = false;
    out.toggles.feat_distill_on = false;
    out.toggles.logit_distill_on = false;
  } else if (name == "distill") {
    out.toggles.replay_on = false;
    out.toggles.feat_distill_on = true;
    out.toggles.logit_distill_on = true;
    out.distill.hvd_on = false;
  } else if (name == "distill_replay") {
    out.toggles.replay_on = true;
    out.toggles.feat_distill_on = true;
    out.toggles.logit_distill_on = true;
    out.distill.hvd_on = false;
  } else if (name == "hvd") {
    out.toggles.replay_on = true;
    out.toggles.feat_distill_on = true;
    out.toggles.logit_distill_on = true;
    out.distill.hvd_on = true;
  } else {
    throw std::invalid_argument("ablation_variant: unknown row " + name);
  }
  return out;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg, const std::string& workdir,
                                      const std::vector<uint64_t>& seeds) {
  cfg.validate();
  if (seeds.empty()) throw std::invalid_argument("run_ablation: no seeds");
  const std::vector<std::string> names = {"finetune", "distill", "distill_replay", "hvd"};

  const auto shared = default_paths(workdir);
  {
    StageRunner runner(shared.manifest_file, cfg);
    stage_gen_data(cfg, shared, runner);
  }

  std::vector<AblationRow> rows;
  for (const uint64_t seed : seeds) {
    ExperimentConfig seed_cfg = cfg;
    seed_cfg.train.seed = seed;
    const std::string seed_dir = workdir + "/ablate/seed" + std::to_string(seed);
    auto sp = default_paths(seed_dir);
    sp.dataset_dir = shared.dataset_dir;
    StageRunner seed_runner(sp.manifest_file, seed_cfg);
    stage_train_base(seed_cfg, sp, seed_runner);
    stage_invert(seed_cfg, sp, 1, seed_runner);

    for (const auto& name : names) {
      const auto row_cfg = ablation_variant(seed_cfg, name);
      auto rp = default_paths(seed_dir + "/" + name);
      rp.dataset_dir = shared.dataset_dir;
      StageRunner row_runner(rp.manifest_file, row_cfg);

      std::string prev_ckpt = sp.checkpoint(0);
      for (size_t step = 1; step < cfg.schedule.steps.size(); ++step) {
        // the first bank comes off the shared base model; later banks depend
        // on this row's own trajectory
        std::string bank = sp.bank_dir(1);
        if (row_cfg.toggles.replay_on && step >= 2) {
          bank = rp.bank_dir(step);
          const auto iname = step_name("invert", step);
          const auto iseed = stage_seed(seed, 100 + step);
          const std::string teacher = rp.checkpoint(step - 1);
          row_runner.run(iname, invert_stage_hash(row_cfg, step),
                         bank + "/bank_manifest.json", iseed, {bank}, [&] {
                           require_artifact(teacher, producer_of_checkpoint(step - 1));
                           do_invert(row_cfg, sp.dataset_dir, teacher, bank, step, iseed);
                         });
        }
        const auto tname = step_name("train-inc", step);
        const auto tseed = stage_seed(seed, 200 + step);
        const std::string in_ckpt = prev_ckpt;
        const std::string out_ckpt = rp.checkpoint(step);
        row_runner.run(tname, inc_stage_hash(row_cfg, step), out_ckpt, tseed,
                       {out_ckpt, rp.metrics_csv(step)}, [&, step] {
                         require_artifact(in_ckpt, step == 1 ? "train-base"
                                                             : producer_of_checkpoint(step - 1));
                         if (row_cfg.toggles.replay_on)
                           require_artifact(bank + "/bank_manifest.json",
                                            step_name("invert", step));
                         do_train_inc(row_cfg, sp.dataset_dir, in_ckpt, bank, out_ckpt,
                                      rp.metrics_csv(step), step, tseed);
                       });
        auto result = stage_eval(row_cfg, rp, step, row_runner);
        rows.push_back({name, seed, step, std::move(result)});
        prev_ckpt = out_ckpt;
      }
    }
  }
  write_ablation_csv(workdir + "/ablation.csv", rows);
  return rows;
}

void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "row,seed,step,old_ap,new_ap,total_ap\n";
  for (const auto& r : rows)
    out << r.name << "," << r.seed << "," << r.step << "," << r.result.old_ap << ","
        << r.result.new_ap << "," << r.result.total_ap << "\n";
  write_file_atomic(path, out.str());
}

std::vector<AblationRow> read_ablation_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_ablation_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "row,seed,step,old_ap,new_ap,total_ap")
    throw std::runtime_error("read_ablation_csv: bad header in " + path);
  std::vector<AblationRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    AblationRow r;
    std::string field;
    if (!std::getline(ss, r.name, ',')) break;
    std::getline(ss, field, ',');
    r.seed = std::stoull(field);
    std::getline(ss, field, ',');
    r.step = std::stoul(field);
    std::getline(ss, field, ',');
    r.result.old_ap = std::stod(field);
    std::getline(ss, field, ',');
    r.result.new_ap = std::stod(field);
    std::getline(ss, field, ',');
    r.result.total_ap = std::stod(field);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace ior
