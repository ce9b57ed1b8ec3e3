#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <string>
#include <vector>

#include "json.hpp"

#include "ior/config.hpp"
#include "ior/eval.hpp"
#include "ior/experiment.hpp"
#include "ior/manifest.hpp"
#include "ior/plot.hpp"
#include "ior/shapes_world.hpp"
#include "ior/train.hpp"

namespace py = pybind11;

namespace {

// configs cross the boundary as JSON text; structured edits happen in python
ior::ExperimentConfig config_from_text(const std::string& text) {
  return ior::parse_experiment_config(nlohmann::json::parse(text));
}

std::string config_to_text(const ior::ExperimentConfig& cfg) {
  return ior::experiment_config_to_json(cfg).dump(2);
}

// stage driver over one run directory; each call reloads the manifest so
// several Run objects on the same workdir stay consistent
class Run {
 public:
  Run(const ior::ExperimentConfig& cfg, const std::string& workdir)
      : cfg_(cfg), paths_(ior::default_paths(workdir)) {
    cfg_.validate();
  }

  void gen_data() {
    ior::StageRunner runner(paths_.manifest_file, cfg_);
    ior::stage_gen_data(cfg_, paths_, runner);
  }
  void train_base() {
    ior::StageRunner runner(paths_.manifest_file, cfg_);
    ior::stage_train_base(cfg_, paths_, runner);
  }
  void invert(size_t step) {
    ior::StageRunner runner(paths_.manifest_file, cfg_);
    ior::stage_invert(cfg_, paths_, step, runner);
  }
  void train_inc(size_t step) {
    ior::StageRunner runner(paths_.manifest_file, cfg_);
    if (cfg_.toggles.replay_on) ior::stage_invert(cfg_, paths_, step, runner);
    ior::stage_train_inc(cfg_, paths_, step, runner);
  }
  ior::EvalResult evaluate(size_t step) {
    ior::StageRunner runner(paths_.manifest_file, cfg_);
    return ior::stage_eval(cfg_, paths_, step, runner);
  }
  std::vector<ior::StepEval> run_all() { return ior::run_full_experiment(cfg_, paths_); }

  std::string checkpoint(size_t step) const { return paths_.checkpoint(step); }
  std::string bank_dir(size_t step) const { return paths_.bank_dir(step); }
  std::string metrics_csv(size_t step) const { return paths_.metrics_csv(step); }
  std::string eval_csv(size_t step) const { return paths_.eval_csv(step); }
  std::string workdir() const { return paths_.workdir; }

 private:
  ior::ExperimentConfig cfg_;
  ior::RunPaths paths_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "incremental object detection with inversion-generated replay";

  py::class_<ior::ExperimentConfig>(m, "ExperimentConfig")
      .def_static("load", &ior::load_experiment_config, py::arg("path"))
      .def_static("parse", &config_from_text, py::arg("json_text"))
      .def("json", &config_to_text)
      .def("hash", &ior::config_hash)
      .def("validate", &ior::ExperimentConfig::validate)
      .def("__repr__", [](const ior::ExperimentConfig& cfg) {
        return "ExperimentConfig(hash=" + ior::config_hash(cfg).substr(0, 12) + ")";
      });

  py::class_<ior::EvalResult>(m, "EvalResult")
      .def_readonly("old_ap", &ior::EvalResult::old_ap)
      .def_readonly("new_ap", &ior::EvalResult::new_ap)
      .def_readonly("total_ap", &ior::EvalResult::total_ap)
      .def_readonly("per_class_ap", &ior::EvalResult::per_class_ap)
      .def("__repr__", [](const ior::EvalResult& r) {
        return "EvalResult(old_ap=" + std::to_string(r.old_ap) +
               ", new_ap=" + std::to_string(r.new_ap) +
               ", total_ap=" + std::to_string(r.total_ap) + ")";
      });

  py::class_<ior::StepEval>(m, "StepEval")
      .def_readonly("step", &ior::StepEval::step)
      .def_readonly("result", &ior::StepEval::result);

  py::class_<ior::AblationRow>(m, "AblationRow")
      .def_readonly("name", &ior::AblationRow::name)
      .def_readonly("seed", &ior::AblationRow::seed)
      .def_readonly("step", &ior::AblationRow::step)
      .def_readonly("result", &ior::AblationRow::result);

  py::class_<ior::StepMetrics>(m, "StepMetrics")
      .def_readonly("step", &ior::StepMetrics::step)
      .def_readonly("detect", &ior::StepMetrics::detect)
      .def_readonly("feat", &ior::StepMetrics::feat)
      .def_readonly("logit", &ior::StepMetrics::logit)
      .def_readonly("total", &ior::StepMetrics::total);

  py::class_<Run>(m, "Run")
      .def(py::init<const ior::ExperimentConfig&, const std::string&>(), py::arg("config"),
           py::arg("workdir"))
      .def("gen_data", &Run::gen_data, py::call_guard<py::gil_scoped_release>())
      .def("train_base", &Run::train_base, py::call_guard<py::gil_scoped_release>())
      .def("invert", &Run::invert, py::arg("step") = 1,
           py::call_guard<py::gil_scoped_release>())
      .def("train_inc", &Run::train_inc, py::arg("step") = 1,
           py::call_guard<py::gil_scoped_release>())
      .def("evaluate", &Run::evaluate, py::arg("step"),
           py::call_guard<py::gil_scoped_release>())
      .def("run_all", &Run::run_all, py::call_guard<py::gil_scoped_release>())
      .def("checkpoint", &Run::checkpoint, py::arg("step"))
      .def("bank_dir", &Run::bank_dir, py::arg("step"))
      .def("metrics_csv", &Run::metrics_csv, py::arg("step"))
      .def("eval_csv", &Run::eval_csv, py::arg("step"))
      .def_property_readonly("workdir", &Run::workdir);

  m.def("generate_dataset", &ior::generate_dataset, py::arg("config"), py::arg("out_dir"),
        py::call_guard<py::gil_scoped_release>());
  m.def(
      "run_ablation",
      [](const ior::ExperimentConfig& cfg, const std::string& workdir,
         const std::vector<uint64_t>& seeds) { return ior::run_ablation(cfg, workdir, seeds); },
      py::arg("config"), py::arg("workdir"), py::arg("seeds") = std::vector<uint64_t>{0, 1, 2},
      py::call_guard<py::gil_scoped_release>());
  m.def("ablation_variant", &ior::ablation_variant, py::arg("config"), py::arg("name"));

  m.def("read_metrics_csv", &ior::read_metrics_csv, py::arg("path"));
  m.def("read_ablation_csv", &ior::read_ablation_csv, py::arg("path"));
  m.def("class_name", [](int64_t class_id) { return ior::class_spec(class_id).name; },
        py::arg("class_id"));

  m.def("plot_ap_curves", &ior::plot_ap_curves, py::arg("eval_csvs"), py::arg("out_png"));
  m.def("plot_ablation_bars", &ior::plot_ablation_bars, py::arg("ablation_csv"),
        py::arg("out_png"));
  m.def("plot_contact_sheet", &ior::plot_contact_sheet, py::arg("bank_dir"),
        py::arg("out_png"));
}
