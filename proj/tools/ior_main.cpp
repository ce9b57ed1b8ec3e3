#include <torch/torch.h>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "ior/config.hpp"
#include "ior/experiment.hpp"
#include "ior/plot.hpp"

namespace fs = std::filesystem;

namespace {

void apply_determinism_env() {
  const char* flag = std::getenv("IOR_DETERMINISTIC");
  if (flag == nullptr || std::string(flag) != "1") return;
  torch::set_num_threads(1);
  at::globalContext().setDeterministicAlgorithms(true, /*warn_only=*/true);
}

struct Options {
  std::string config;
  std::string workdir = ".";
  int64_t seed = -1;       // overrides the command's seed when >= 0
  int64_t per_class = -1;  // overrides inversion.per_class when >= 0
  int64_t step = -1;       // restricts staged commands to one schedule step
  std::vector<uint64_t> seeds = {0, 1, 2};
  int64_t bank_step = 1;
};

// every command takes --config and --workdir; flags win over file values
CLI::App* add_command(CLI::App& app, Options& opt, const std::string& name,
                      const std::string& description) {
  auto* cmd = app.add_subcommand(name, description);
  cmd->add_option("--config", opt.config, "experiment config file")->required();
  cmd->add_option("--workdir", opt.workdir, "run directory (default .)");
  return cmd;
}

ior::ExperimentConfig load_config(const Options& opt) {
  auto cfg = ior::load_experiment_config(opt.config);
  if (opt.per_class >= 0) cfg.inversion.per_class = opt.per_class;
  return cfg;
}

size_t last_schedule_step(const ior::ExperimentConfig& cfg) {
  return cfg.schedule.steps.size() - 1;
}

std::vector<size_t> selected_steps(const Options& opt, size_t first, size_t last) {
  if (opt.step >= 0) {
    const auto s = static_cast<size_t>(opt.step);
    if (s < first || s > last)
      throw std::runtime_error("--step " + std::to_string(s) + " outside schedule range " +
                               std::to_string(first) + ".." + std::to_string(last));
    return {s};
  }
  std::vector<size_t> steps;
  for (size_t s = first; s <= last; ++s) steps.push_back(s);
  return steps;
}

int cmd_gen_data(const Options& opt) {
  auto cfg = load_config(opt);
  if (opt.seed >= 0) cfg.dataset.seed = static_cast<uint64_t>(opt.seed);
  cfg.validate();
  const auto paths = ior::default_paths(opt.workdir);
  ior::StageRunner runner(paths.manifest_file, cfg);
  ior::stage_gen_data(cfg, paths, runner);
  return 0;
}

int cmd_train_base(const Options& opt) {
  auto cfg = load_config(opt);
  if (opt.seed >= 0) cfg.train.seed = static_cast<uint64_t>(opt.seed);
  cfg.validate();
  const auto paths = ior::default_paths(opt.workdir);
  ior::StageRunner runner(paths.manifest_file, cfg);
  ior::stage_train_base(cfg, paths, runner);
  ior::stage_eval(cfg, paths, 0, runner);
  return 0;
}

int cmd_invert(const Options& opt) {
  auto cfg = load_config(opt);
  if (opt.seed >= 0) cfg.train.seed = static_cast<uint64_t>(opt.seed);
  cfg.validate();
  if (cfg.schedule.steps.size() < 2)
    throw std::runtime_error("schedule has no incremental step to invert for");
  const auto paths = ior::default_paths(opt.workdir);
  ior::StageRunner runner(paths.manifest_file, cfg);
  const size_t s = opt.step >= 0 ? static_cast<size_t>(opt.step) : 1;
  if (s < 1 || s > last_schedule_step(cfg))
    throw std::runtime_error("--step " + std::to_string(s) + " outside schedule range 1.." +
                             std::to_string(last_schedule_step(cfg)));
  ior::stage_invert(cfg, paths, s, runner);
  return 0;
}

int cmd_train_inc(const Options& opt) {
  auto cfg = load_config(opt);
  if (opt.seed >= 0) cfg.train.seed = static_cast<uint64_t>(opt.seed);
  cfg.validate();
  if (cfg.schedule.steps.size() < 2)
    throw std::runtime_error("schedule has no incremental step");
  const auto paths = ior::default_paths(opt.workdir);
  ior::StageRunner runner(paths.manifest_file, cfg);
  for (const size_t s : selected_steps(opt, 1, last_schedule_step(cfg))) {
    if (cfg.toggles.replay_on) ior::stage_invert(cfg, paths, s, runner);
    ior::stage_train_inc(cfg, paths, s, runner);
    ior::stage_eval(cfg, paths, s, runner);
  }
  return 0;
}

int cmd_eval(const Options& opt) {
  auto cfg = load_config(opt);
  if (opt.seed >= 0) cfg.train.seed = static_cast<uint64_t>(opt.seed);
  cfg.validate();
  const auto paths = ior::default_paths(opt.workdir);
  ior::StageRunner runner(paths.manifest_file, cfg);
  for (const size_t s : selected_steps(opt, 0, last_schedule_step(cfg))) {
    if (opt.step < 0 && !fs::exists(paths.checkpoint(s))) continue;
    const auto r = ior::stage_eval(cfg, paths, s, runner);
    std::cout << "step " << s << ": old_ap " << r.old_ap << " new_ap " << r.new_ap
              << " total_ap " << r.total_ap << "\n";
  }
  return 0;
}

int cmd_ablate(const Options& opt) {
  auto cfg = load_config(opt);
  if (opt.seed >= 0) cfg.train.seed = static_cast<uint64_t>(opt.seed);
  cfg.validate();
  const auto rows = ior::run_ablation(cfg, opt.workdir, opt.seeds);
  std::cout << "row,seed,step,old_ap,new_ap,total_ap\n";
  for (const auto& r : rows)
    std::cout << r.name << "," << r.seed << "," << r.step << "," << r.result.old_ap << ","
              << r.result.new_ap << "," << r.result.total_ap << "\n";
  std::cout << "wrote " << opt.workdir << "/ablation.csv\n";
  return 0;
}

int cmd_plot(const Options& opt) {
  auto cfg = load_config(opt);
  cfg.validate();
  const auto paths = ior::default_paths(opt.workdir);
  fs::create_directories(paths.plots_dir);
  int figures = 0;

  std::vector<std::string> eval_csvs;
  for (size_t s = 0; s < cfg.schedule.steps.size(); ++s)
    if (fs::exists(paths.eval_csv(s))) eval_csvs.push_back(paths.eval_csv(s));
  if (!eval_csvs.empty()) {
    ior::plot_ap_curves(eval_csvs, paths.plots_dir + "/ap_vs_step.png");
    std::cout << "wrote " << paths.plots_dir << "/ap_vs_step.png\n";
    ++figures;
  }
  if (fs::exists(opt.workdir + "/ablation.csv")) {
    ior::plot_ablation_bars(opt.workdir + "/ablation.csv", paths.plots_dir + "/ablation.png");
    std::cout << "wrote " << paths.plots_dir << "/ablation.png\n";
    ++figures;
  }
  const auto bank = paths.bank_dir(static_cast<size_t>(opt.bank_step));
  if (fs::exists(bank + "/bank_manifest.json")) {
    ior::plot_contact_sheet(bank, paths.plots_dir + "/bank_contact_sheet.png");
    std::cout << "wrote " << paths.plots_dir << "/bank_contact_sheet.png\n";
    ++figures;
  }
  if (figures == 0)
    throw std::runtime_error("nothing to plot under " + opt.workdir +
                             "; run eval, ablate or invert first");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  apply_determinism_env();

  CLI::App app{"inversed-objects replay: incremental detection experiments"};
  app.require_subcommand(1);
  Options opt;

  auto* gen = add_command(app, opt, "gen-data", "render the dataset and its splits");
  gen->add_option("--seed", opt.seed, "override dataset seed");

  auto* base = add_command(app, opt, "train-base", "train the base-task detector");
  base->add_option("--seed", opt.seed, "override training seed");

  auto* invert = add_command(app, opt, "invert", "build the generated-object bank");
  invert->add_option("--seed", opt.seed, "override training seed");
  invert->add_option("--per-class", opt.per_class, "objects per old class");
  invert->add_option("--step", opt.step, "schedule step (default 1)");

  auto* inc = add_command(app, opt, "train-inc", "run the incremental step(s)");
  inc->add_option("--seed", opt.seed, "override training seed");
  inc->add_option("--per-class", opt.per_class, "objects per old class");
  inc->add_option("--step", opt.step, "restrict to one schedule step");

  auto* eval = add_command(app, opt, "eval", "evaluate checkpoints on the validation set");
  eval->add_option("--seed", opt.seed, "override training seed");
  eval->add_option("--step", opt.step, "restrict to one schedule step");

  auto* ablate = add_command(app, opt, "ablate", "run the method ladder over seeds");
  ablate->add_option("--seed", opt.seed, "override training seed");
  ablate->add_option("--seeds", opt.seeds, "seeds for the ladder (default 0 1 2)");
  ablate->add_option("--per-class", opt.per_class, "objects per old class");

  auto* plot = add_command(app, opt, "plot", "emit figures from run artifacts");
  plot->add_option("--bank-step", opt.bank_step, "bank step for the contact sheet");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(opt);
    if (base->parsed()) return cmd_train_base(opt);
    if (invert->parsed()) return cmd_invert(opt);
    if (inc->parsed()) return cmd_train_inc(opt);
    if (eval->parsed()) return cmd_eval(opt);
    if (ablate->parsed()) return cmd_ablate(opt);
    if (plot->parsed()) return cmd_plot(opt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
