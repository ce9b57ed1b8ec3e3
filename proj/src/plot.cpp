#include "ior/plot.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

#include "ior/experiment.hpp"
#include "ior/inversion.hpp"
#include "ior/shapes_world.hpp"

namespace fs = std::filesystem;

namespace ior {

namespace {

const cv::Scalar kWhite(255, 255, 255);
const cv::Scalar kBlack(40, 40, 40);
const cv::Scalar kGrid(220, 220, 220);
const cv::Scalar kOld(60, 60, 200);    // BGR red
const cv::Scalar kNew(200, 90, 40);    // BGR blue
const cv::Scalar kTotal(60, 140, 60);  // BGR green

struct Frame {
  int left, top, right, bottom;
  int x_of(double t) const { return left + static_cast<int>(std::lround(t * (right - left))); }
  int y_of(double ap) const {
    return bottom - static_cast<int>(std::lround(ap * (bottom - top)));
  }
};

void draw_ap_grid(cv::Mat& canvas, const Frame& f, const std::string& title) {
  for (int i = 0; i <= 10; ++i) {
    const double ap = i / 10.0;
    const int y = f.y_of(ap);
    cv::line(canvas, {f.left, y}, {f.right, y}, kGrid, 1);
    std::ostringstream label;
    label.precision(1);
    label << std::fixed << ap;
    cv::putText(canvas, label.str(), {f.left - 38, y + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4,
                kBlack, 1);
  }
  cv::rectangle(canvas, {f.left, f.top}, {f.right, f.bottom}, kBlack, 1);
  cv::putText(canvas, title, {f.left, f.top - 12}, cv::FONT_HERSHEY_SIMPLEX, 0.6, kBlack, 1);
}

void draw_legend(cv::Mat& canvas, int x, int y) {
  const std::vector<std::pair<std::string, cv::Scalar>> entries = {
      {"total", kTotal}, {"old", kOld}, {"new", kNew}};
  for (size_t i = 0; i < entries.size(); ++i) {
    const int yy = y + static_cast<int>(i) * 18;
    cv::rectangle(canvas, {x, yy - 8}, {x + 12, yy + 2}, entries[i].second, cv::FILLED);
    cv::putText(canvas, entries[i].first, {x + 18, yy + 2}, cv::FONT_HERSHEY_SIMPLEX, 0.45,
                kBlack, 1);
  }
}

void write_png(const std::string& path, const cv::Mat& canvas) {
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  if (!cv::imwrite(path, canvas)) throw std::runtime_error("cannot write " + path);
}

cv::Mat tile_bgr(const torch::Tensor& image) {
  auto hwc = (image.detach().clamp(0, 1) * 255.0).permute({1, 2, 0}).contiguous();
  cv::Mat rgb(static_cast<int>(image.size(1)), static_cast<int>(image.size(2)), CV_32FC3,
              hwc.data_ptr<float>());
  cv::Mat bgr, out;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  bgr.convertTo(out, CV_8UC3);
  return out;
}

}  // namespace

StepApRow read_eval_summary_row(const std::string& eval_csv) {
  std::ifstream in(eval_csv);
  if (!in) throw std::runtime_error("cannot open " + eval_csv);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty CSV: " + eval_csv);
  if (line != "step,class_id,ap")
    throw std::runtime_error("bad eval CSV header in " + eval_csv);
  StepApRow row;
  int found = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string step_s, key, val;
    if (!std::getline(ss, step_s, ',') || !std::getline(ss, key, ',') ||
        !std::getline(ss, val, ','))
      throw std::runtime_error("bad eval CSV row in " + eval_csv + ": " + line);
    row.step = std::stoll(step_s);
    if (key == "old_ap") {
      row.old_ap = std::stod(val);
      ++found;
    } else if (key == "new_ap") {
      row.new_ap = std::stod(val);
      ++found;
    } else if (key == "total_ap") {
      row.total_ap = std::stod(val);
      ++found;
    }
  }
  if (found != 3)
    throw std::runtime_error("eval CSV " + eval_csv + " is missing its summary rows");
  return row;
}

void plot_ap_curves(const std::vector<std::string>& eval_csvs, const std::string& out_png) {
  if (eval_csvs.empty()) throw std::runtime_error("plot_ap_curves: no eval CSVs");
  std::vector<StepApRow> rows;
  for (const auto& path : eval_csvs) rows.push_back(read_eval_summary_row(path));
  std::sort(rows.begin(), rows.end(),
            [](const StepApRow& a, const StepApRow& b) { return a.step < b.step; });

  cv::Mat canvas(480, 720, CV_8UC3, kWhite);
  const Frame f{70, 50, 640, 430};
  draw_ap_grid(canvas, f, "AP vs step");
  draw_legend(canvas, f.right + 12, f.top + 10);
  cv::putText(canvas, "step", {(f.left + f.right) / 2 - 16, f.bottom + 36},
              cv::FONT_HERSHEY_SIMPLEX, 0.5, kBlack, 1);

  const size_t n = rows.size();
  auto x_at = [&](size_t i) {
    return n == 1 ? f.x_of(0.5) : f.x_of(static_cast<double>(i) / (n - 1));
  };
  for (size_t i = 0; i < n; ++i) {
    const int x = x_at(i);
    cv::line(canvas, {x, f.bottom}, {x, f.bottom + 5}, kBlack, 1);
    cv::putText(canvas, std::to_string(rows[i].step), {x - 5, f.bottom + 20},
                cv::FONT_HERSHEY_SIMPLEX, 0.45, kBlack, 1);
  }
  const std::vector<std::pair<cv::Scalar, std::function<double(const StepApRow&)>>> series = {
      {kTotal, [](const StepApRow& r) { return r.total_ap; }},
      {kOld, [](const StepApRow& r) { return r.old_ap; }},
      {kNew, [](const StepApRow& r) { return r.new_ap; }}};
  for (const auto& [color, get] : series) {
    for (size_t i = 0; i + 1 < n; ++i)
      cv::line(canvas, {x_at(i), f.y_of(get(rows[i]))}, {x_at(i + 1), f.y_of(get(rows[i + 1]))},
               color, 2);
    for (size_t i = 0; i < n; ++i)
      cv::circle(canvas, {x_at(i), f.y_of(get(rows[i]))}, 4, color, cv::FILLED);
  }
  write_png(out_png, canvas);
}

void plot_ablation_bars(const std::string& ablation_csv, const std::string& out_png) {
  const auto rows = read_ablation_csv(ablation_csv);
  if (rows.empty()) throw std::runtime_error("empty CSV: " + ablation_csv);
  size_t last_step = 0;
  for (const auto& r : rows) last_step = std::max(last_step, r.step);

  // ladder order first, anything else in file order
  std::vector<std::string> order;
  for (const auto& name : {"finetune", "distill", "distill_replay", "hvd"})
    for (const auto& r : rows)
      if (r.step == last_step && r.name == name &&
          std::find(order.begin(), order.end(), name) == order.end())
        order.push_back(name);
  for (const auto& r : rows)
    if (r.step == last_step && std::find(order.begin(), order.end(), r.name) == order.end())
      order.push_back(r.name);

  struct Sums {
    double old_ap = 0, new_ap = 0, total_ap = 0;
    int count = 0;
  };
  std::map<std::string, Sums> by_name;
  for (const auto& r : rows)
    if (r.step == last_step) {
      auto& s = by_name[r.name];
      s.old_ap += r.result.old_ap;
      s.new_ap += r.result.new_ap;
      s.total_ap += r.result.total_ap;
      ++s.count;
    }

  cv::Mat canvas(480, 720, CV_8UC3, kWhite);
  const Frame f{70, 50, 690, 410};
  draw_ap_grid(canvas, f, "ablation (seed mean, step " + std::to_string(last_step) + ")");

  const int groups = static_cast<int>(order.size());
  const int slot = (f.right - f.left) / std::max(1, groups);
  const int bar = std::max(6, slot / 5);
  for (int g = 0; g < groups; ++g) {
    const auto& s = by_name[order[g]];
    const double vals[3] = {s.old_ap / s.count, s.new_ap / s.count, s.total_ap / s.count};
    const cv::Scalar colors[3] = {kOld, kNew, kTotal};
    const int cx = f.left + g * slot + slot / 2;
    for (int k = 0; k < 3; ++k) {
      const int x0 = cx + (k - 1) * bar - bar / 2;
      const int y = f.y_of(vals[k]);
      cv::rectangle(canvas, {x0, y}, {x0 + bar - 2, f.bottom}, colors[k], cv::FILLED);
      std::ostringstream v;
      v.precision(2);
      v << std::fixed << vals[k];
      cv::putText(canvas, v.str(), {x0 - 6, y - 6}, cv::FONT_HERSHEY_SIMPLEX, 0.35, kBlack, 1);
    }
    cv::putText(canvas, order[g], {cx - slot / 2 + 8, f.bottom + 22},
                cv::FONT_HERSHEY_SIMPLEX, 0.45, kBlack, 1);
  }
  draw_legend(canvas, f.left + 8, f.top + 14);
  write_png(out_png, canvas);
}

void plot_contact_sheet(const std::string& bank_dir, const std::string& out_png) {
  const auto bank = load_bank(bank_dir);
  if (bank.empty()) throw std::runtime_error("empty bank: " + bank_dir);

  const int tile = 96;
  const int caption = 18;
  const int pad = 4;
  const int n = static_cast<int>(bank.size());
  const int cols = std::min(8, static_cast<int>(std::ceil(std::sqrt(double(n)))));
  const int rows = (n + cols - 1) / cols;
  const int cell_w = tile + pad;
  const int cell_h = tile + caption + pad;
  cv::Mat canvas(pad + rows * cell_h, pad + cols * cell_w, CV_8UC3, kWhite);

  for (int i = 0; i < n; ++i) {
    const int r = i / cols;
    const int c = i % cols;
    const int x0 = pad + c * cell_w;
    const int y0 = pad + r * cell_h;
    cv::Mat img = tile_bgr(bank[i].image);
    cv::Mat resized;
    cv::resize(img, resized, {tile, tile}, 0, 0, cv::INTER_AREA);
    resized.copyTo(canvas(cv::Rect(x0, y0, tile, tile)));

    const double sx = double(tile) / img.cols;
    const double sy = double(tile) / img.rows;
    const auto& b = bank[i].label.box;
    cv::rectangle(canvas,
                  {x0 + int(std::lround(b.x * sx)), y0 + int(std::lround(b.y * sy))},
                  {x0 + int(std::lround((b.x + b.w) * sx)),
                   y0 + int(std::lround((b.y + b.h) * sy))},
                  cv::Scalar(0, 220, 220), 1);

    std::string name = class_spec(bank[i].label.cls).name;
    if (!bank[i].verified) name += " *";
    cv::putText(canvas, name, {x0 + 2, y0 + tile + 13}, cv::FONT_HERSHEY_SIMPLEX, 0.38,
                kBlack, 1);
  }
  write_png(out_png, canvas);
}

}  // namespace ior
