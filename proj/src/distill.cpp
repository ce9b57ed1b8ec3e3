#include "ior/distill.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <tuple>

#include "ior/losses.hpp"

namespace ior {

namespace {

// bilinear read of feature [C,H,W] at continuous points, coordinates clamped
// to the map; returns [C, N]
torch::Tensor bilinear_at(const torch::Tensor& feature, const std::vector<double>& ys,
                          const std::vector<double>& xs) {
  const int64_t H = feature.size(1), W = feature.size(2);
  const auto N = static_cast<int64_t>(ys.size());
  std::vector<int64_t> i00(N), i01(N), i10(N), i11(N);
  std::vector<double> w00(N), w01(N), w10(N), w11(N);
  for (int64_t n = 0; n < N; ++n) {
    const double y = std::clamp(ys[n], 0.0, static_cast<double>(H - 1));
    const double x = std::clamp(xs[n], 0.0, static_cast<double>(W - 1));
    const auto y0 = std::min<int64_t>(static_cast<int64_t>(std::floor(y)), H - 2 >= 0 ? H - 2 : 0);
    const auto x0 = std::min<int64_t>(static_cast<int64_t>(std::floor(x)), W - 2 >= 0 ? W - 2 : 0);
    const int64_t y1 = std::min<int64_t>(y0 + 1, H - 1);
    const int64_t x1 = std::min<int64_t>(x0 + 1, W - 1);
    const double fy = y - static_cast<double>(y0);
    const double fx = x - static_cast<double>(x0);
    i00[n] = y0 * W + x0;
    i01[n] = y0 * W + x1;
    i10[n] = y1 * W + x0;
    i11[n] = y1 * W + x1;
    w00[n] = (1 - fy) * (1 - fx);
    w01[n] = (1 - fy) * fx;
    w10[n] = fy * (1 - fx);
    w11[n] = fy * fx;
  }
  auto flat = feature.reshape({feature.size(0), H * W});
  auto opts = feature.options();
  auto pick = [&](const std::vector<int64_t>& idx, const std::vector<double>& w) {
    auto it = torch::tensor(idx, torch::kLong);
    auto wt = torch::tensor(w, torch::kDouble).to(opts.dtype()).unsqueeze(0);
    return flat.index_select(1, it) * wt;
  };
  return pick(i00, w00) + pick(i01, w01) + pick(i10, w10) + pick(i11, w11);
}

}  // namespace

torch::Tensor roi_align(const torch::Tensor& feature, const BoxXYWH& box, int64_t stride,
                        int64_t roi_size, int64_t samples) {
  if (feature.dim() != 3) throw std::invalid_argument("roi_align: expected a [C,H,W] map");
  if (roi_size < 1 || samples < 1)
    throw std::invalid_argument("roi_align: grid and sample counts must be positive");
  const int64_t C = feature.size(0);
  const double s = static_cast<double>(stride);

  if (box.w / s <= 1.0 || box.h / s <= 1.0) {
    const double cy = (box.y + box.y2()) / 2.0 / s - 0.5;
    const double cx = (box.x + box.x2()) / 2.0 / s - 0.5;
    auto center = bilinear_at(feature, {cy}, {cx});
    return center.reshape({C, 1, 1}).expand({C, roi_size, roi_size}).clone();
  }

  const double y1 = box.y / s - 0.5, y2 = box.y2() / s - 0.5;
  const double x1 = box.x / s - 0.5, x2 = box.x2() / s - 0.5;
  const double ch = (y2 - y1) / roi_size, cw = (x2 - x1) / roi_size;

  std::vector<double> ys_axis, xs_axis;
  for (int64_t cell = 0; cell < roi_size; ++cell) {
    for (int64_t k = 0; k < samples; ++k) {
      const double frac = (static_cast<double>(k) + 0.5) / static_cast<double>(samples);
      ys_axis.push_back(y1 + ch * (cell + frac));
      xs_axis.push_back(x1 + cw * (cell + frac));
    }
  }
  std::vector<double> ys, xs;
  for (double y : ys_axis)
    for (double x : xs_axis) {
      ys.push_back(y);
      xs.push_back(x);
    }

  auto sampled = bilinear_at(feature, ys, xs);
  return sampled.reshape({C, roi_size, samples, roi_size, samples}).mean({2, 4});
}

torch::Tensor feat_distill_loss(const std::vector<torch::Tensor>& teacher_feats,
                                const std::vector<torch::Tensor>& student_feats,
                                const std::vector<std::vector<ReplayedBox>>& replayed,
                                const DetectorConfig& cfg, const DistillConfig& dcfg) {
  if (teacher_feats.size() != student_feats.size())
    throw std::invalid_argument("feat_distill_loss: level counts differ");
  auto loss = torch::zeros({}, student_feats.empty() ? torch::TensorOptions()
                                                     : student_feats[0].options());
  int64_t count = 0;
  for (size_t i = 0; i < replayed.size(); ++i) {
    for (const auto& rep : replayed[i]) {
      const auto level = level_for_box(rep.box, cfg);
      const int64_t stride = cfg.strides[level];
      auto t = roi_align(teacher_feats[level][i].detach(), rep.box, stride, dcfg.roi_size);
      auto s = roi_align(student_feats[level][i], rep.box, stride, dcfg.roi_size);
      loss = loss + (s - t).pow(2).mean();
      ++count;
    }
  }
  if (count == 0) return loss;
  return loss / static_cast<double>(count);
}

std::vector<TopKSelection> select_topk(const DetectorOutputs& teacher_outputs,
                                       const std::vector<int64_t>& old_classes,
                                       const DetectorState& teacher, const DistillConfig& cfg) {
  if (old_classes.empty()) throw std::invalid_argument("select_topk: no old classes");
  std::vector<int64_t> channels;
  for (int64_t cls : old_classes) channels.push_back(teacher.channel_of(cls));
  auto channel_index = torch::tensor(channels, torch::kLong);

  const auto B = teacher_outputs.cls_logits[0].size(0);
  std::vector<TopKSelection> result(B);
  for (int64_t i = 0; i < B; ++i) {
    TopKSelection all;
    for (size_t l = 0; l < teacher_outputs.cls_logits.size(); ++l) {
      auto scores = torch::sigmoid(teacher_outputs.cls_logits[l][i])
                        .index_select(0, channel_index)
                        .amax(0)
                        .to(torch::kDouble)
                        .contiguous();
      auto acc = scores.accessor<double, 2>();
      for (int64_t y = 0; y < scores.size(0); ++y)
        for (int64_t x = 0; x < scores.size(1); ++x)
          all.push_back({static_cast<int64_t>(l), y, x, acc[y][x]});
    }
    std::sort(all.begin(), all.end(), [](const TopKPosition& a, const TopKPosition& b) {
      if (a.score != b.score) return a.score > b.score;
      return std::tie(a.level, a.y, a.x) < std::tie(b.level, b.y, b.x);
    });
    const auto k = std::min<size_t>(static_cast<size_t>(cfg.top_k), all.size());
    result[i].assign(all.begin(), all.begin() + k);
  }
  return result;
}

namespace {

torch::Tensor side_distributions(const torch::Tensor& reg_at_position, int64_t bins,
                                 double temperature) {
  auto sides = reg_at_position.reshape({4, bins}) / temperature;
  return torch::softmax(sides, 1).clamp_min(1e-8);
}

}  // namespace

torch::Tensor logit_distill_loss(const DetectorOutputs& teacher_outputs,
                                 const DetectorOutputs& student_outputs,
                                 const std::vector<TopKSelection>& selection,
                                 const std::vector<int64_t>& old_classes,
                                 const DetectorState& teacher, const DetectorState& student,
                                 const DistillConfig& cfg) {
  if (old_classes.empty()) throw std::invalid_argument("logit_distill_loss: no old classes");
  std::vector<int64_t> t_ch, s_ch;
  for (int64_t cls : old_classes) {
    t_ch.push_back(teacher.channel_of(cls));
    s_ch.push_back(student.channel_of(cls));
  }
  auto t_index = torch::tensor(t_ch, torch::kLong);
  auto s_index = torch::tensor(s_ch, torch::kLong);
  const int64_t bins = teacher.config.reg_bins;

  auto loss = torch::zeros({}, student_outputs.cls_logits[0].options());
  int64_t count = 0;
  for (size_t i = 0; i < selection.size(); ++i) {
    for (const auto& p : selection[i]) {
      using torch::indexing::Slice;
      auto t_logits = teacher_outputs.cls_logits[p.level]
                          .index({static_cast<int64_t>(i), Slice(), p.y, p.x})
                          .index_select(0, t_index)
                          .detach();
      auto s_logits = student_outputs.cls_logits[p.level]
                          .index({static_cast<int64_t>(i), Slice(), p.y, p.x})
                          .index_select(0, s_index);
      loss = loss + (s_logits - t_logits).pow(2).mean();

      auto t_reg = teacher_outputs.reg_dists[p.level]
                       .index({static_cast<int64_t>(i), Slice(), p.y, p.x})
                       .detach();
      auto s_reg = student_outputs.reg_dists[p.level]
                       .index({static_cast<int64_t>(i), Slice(), p.y, p.x});
      auto t_dist = side_distributions(t_reg, bins, cfg.kl_temperature);
      auto s_dist = side_distributions(s_reg, bins, cfg.kl_temperature);
      loss = loss + (t_dist * (t_dist.log() - s_dist.log())).sum();
      ++count;
    }
  }
  if (count == 0) return loss;
  return loss / static_cast<double>(count);
}

DistillLossParts full_map_distill(const DetectorOutputs& teacher_outputs,
                                  const DetectorOutputs& student_outputs,
                                  const std::vector<int64_t>& old_classes,
                                  const DetectorState& teacher, const DetectorState& student,
                                  const DistillConfig& cfg) {
  if (old_classes.empty()) throw std::invalid_argument("full_map_distill: no old classes");
  std::vector<int64_t> t_ch, s_ch;
  for (int64_t cls : old_classes) {
    t_ch.push_back(teacher.channel_of(cls));
    s_ch.push_back(student.channel_of(cls));
  }
  auto t_index = torch::tensor(t_ch, torch::kLong);
  auto s_index = torch::tensor(s_ch, torch::kLong);
  const int64_t bins = teacher.config.reg_bins;
  const auto levels = static_cast<int64_t>(teacher_outputs.cls_logits.size());

  auto feat = torch::zeros({}, student_outputs.cls_logits[0].options());
  auto logit = torch::zeros({}, student_outputs.cls_logits[0].options());
  for (int64_t l = 0; l < levels; ++l) {
    feat = feat + (student_outputs.cls_features[l] -
                   teacher_outputs.cls_features[l].detach())
                      .pow(2)
                      .mean();

    auto t_logits = teacher_outputs.cls_logits[l].index_select(1, t_index).detach();
    auto s_logits = student_outputs.cls_logits[l].index_select(1, s_index);
    logit = logit + (s_logits - t_logits).pow(2).mean();

    const auto B = teacher_outputs.reg_dists[l].size(0);
    const auto H = teacher_outputs.reg_dists[l].size(2);
    const auto W = teacher_outputs.reg_dists[l].size(3);
    auto t_sides = teacher_outputs.reg_dists[l].detach().reshape({B, 4, bins, H, W}) /
                   cfg.kl_temperature;
    auto s_sides = student_outputs.reg_dists[l].reshape({B, 4, bins, H, W}) /
                   cfg.kl_temperature;
    auto t_dist = torch::softmax(t_sides, 2).clamp_min(1e-8);
    auto s_dist = torch::softmax(s_sides, 2).clamp_min(1e-8);
    auto kl = (t_dist * (t_dist.log() - s_dist.log())).sum(2);  // [B, 4, H, W]
    logit = logit + kl.sum(1).mean();
  }
  feat = feat / static_cast<double>(levels);
  logit = logit / static_cast<double>(levels);
  return {feat, logit};
}

torch::Tensor total_loss(const torch::Tensor& detect, const torch::Tensor& feat,
                         const torch::Tensor& logit, const DistillConfig& cfg) {
  const double wf = cfg.hvd_on ? cfg.w_feat : cfg.full_w_feat;
  const double wl = cfg.hvd_on ? cfg.w_logit : cfg.full_w_logit;
  auto total = detect + wf * feat + wl * logit;
  if (!std::isfinite(total.item<double>())) {
    std::ostringstream msg;
    msg << "total_loss: non-finite combination (detect=" << detect.item<double>()
        << ", feat=" << feat.item<double>() << ", logit=" << logit.item<double>() << ")";
    throw std::runtime_error(msg.str());
  }
  return total;
}

}  // namespace ior
