#pragma once

#include <string>
#include <vector>

namespace ior {

struct StepApRow {
  int64_t step = 0;
  double old_ap = 0.0;
  double new_ap = 0.0;
  double total_ap = 0.0;
};

// summary rows of one per-step eval CSV; throws on an empty or truncated file
StepApRow read_eval_summary_row(const std::string& eval_csv);

// old/new/total AP against the schedule step, one point per input CSV
void plot_ap_curves(const std::vector<std::string>& eval_csvs, const std::string& out_png);

// grouped bars per ablation row at the last recorded step, seeds averaged
void plot_ablation_bars(const std::string& ablation_csv, const std::string& out_png);

// one tile per bank entry: the generated image, its label box, a class caption
void plot_contact_sheet(const std::string& bank_dir, const std::string& out_png);

}  // namespace ior
