#include "ior/losses.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

namespace ior {

int64_t level_for_box(const BoxXYWH& box, const DetectorConfig& cfg) {
  const double half = std::max(box.w, box.h) * 0.5;
  for (size_t l = 0; l < cfg.strides.size(); ++l) {
    const double range = (cfg.reg_bins - 1) * cfg.bin_width * cfg.strides[l];
    if (half + 2.0 * cfg.strides[l] <= range) return static_cast<int64_t>(l);
  }
  return static_cast<int64_t>(cfg.strides.size()) - 1;
}

torch::Tensor level_positions(int64_t level, const DetectorConfig& cfg) {
  const int64_t W = cfg.level_size(level);
  const double s = static_cast<double>(cfg.strides[level]);
  auto coord = (torch::arange(W, torch::kFloat64) + 0.5) * s;
  auto yy = coord.view({W, 1}).expand({W, W});
  auto xx = coord.view({1, W}).expand({W, W});
  return torch::stack({xx.reshape(-1), yy.reshape(-1)}, 1);  // [W*W, 2] as (x, y)
}

std::vector<PositiveSample> assign_positives(const std::vector<Annotation>& targets,
                                             const DetectorConfig& cfg) {
  constexpr double kCenterRadius = 1.5;  // in strides
  // claim maps: (level, pos) -> gt index, smaller box wins
  std::vector<std::map<int64_t, int64_t>> claims(cfg.strides.size());

  auto try_claim = [&](int64_t level, int64_t pos, int64_t gt) {
    auto it = claims[level].find(pos);
    if (it == claims[level].end()) {
      claims[level][pos] = gt;
    } else if (targets[gt].box.area() < targets[it->second].box.area()) {
      it->second = gt;
    }
  };

  for (size_t g = 0; g < targets.size(); ++g) {
    const auto& box = targets[g].box;
    const int64_t level = level_for_box(box, cfg);
    const double s = static_cast<double>(cfg.strides[level]);
    const int64_t W = cfg.level_size(level);
    const double cx = box.x + box.w * 0.5;
    const double cy = box.y + box.h * 0.5;

    const int64_t x_lo = std::max<int64_t>(0, static_cast<int64_t>(std::floor(box.x / s - 0.5)));
    const int64_t x_hi = std::min<int64_t>(W - 1, static_cast<int64_t>(std::ceil(box.x2() / s)));
    const int64_t y_lo = std::max<int64_t>(0, static_cast<int64_t>(std::floor(box.y / s - 0.5)));
    const int64_t y_hi = std::min<int64_t>(W - 1, static_cast<int64_t>(std::ceil(box.y2() / s)));

    bool claimed_any = false;
    for (int64_t iy = y_lo; iy <= y_hi; ++iy) {
      for (int64_t ix = x_lo; ix <= x_hi; ++ix) {
        const double px = (ix + 0.5) * s;
        const double py = (iy + 0.5) * s;
        const bool inside = px >= box.x && px <= box.x2() && py >= box.y && py <= box.y2();
        const bool near_center =
            std::abs(px - cx) <= kCenterRadius * s && std::abs(py - cy) <= kCenterRadius * s;
        if (inside && near_center) {
          try_claim(level, iy * W + ix, static_cast<int64_t>(g));
          claimed_any = true;
        }
      }
    }
    if (!claimed_any) {
      // fall back to the grid point nearest the box center
      const int64_t ix = std::clamp<int64_t>(static_cast<int64_t>(cx / s), 0, W - 1);
      const int64_t iy = std::clamp<int64_t>(static_cast<int64_t>(cy / s), 0, W - 1);
      try_claim(level, iy * W + ix, static_cast<int64_t>(g));
    }
  }

  std::vector<PositiveSample> out;
  for (size_t l = 0; l < claims.size(); ++l) {
    for (const auto& [pos, gt] : claims[l]) {
      out.push_back({static_cast<int64_t>(l), pos, gt});
    }
  }
  return out;
}

torch::Tensor decode_offsets(const torch::Tensor& probs, const torch::Tensor& strides,
                             double bin_width) {
  if (probs.dim() != 3 || probs.size(1) != 4)
    throw std::invalid_argument("decode: expected probs of shape [N, 4, bins]");
  auto sums = probs.sum(-1);
  if (probs.size(0) > 0 && (sums - 1.0).abs().max().item<double>() > 1e-4)
    throw std::invalid_argument("decode: regression distributions are not normalized");
  auto bins = torch::arange(probs.size(2), probs.options());
  auto expectation = (probs * bins).sum(-1);  // [N, 4] in bin units
  return expectation * bin_width * strides.to(probs.dtype()).unsqueeze(1);
}

torch::Tensor decode_boxes(const torch::Tensor& probs, const torch::Tensor& centers,
                           const torch::Tensor& strides, double bin_width,
                           int64_t image_size) {
  auto offsets = decode_offsets(probs, strides, bin_width);  // l, t, r, b
  auto cx = centers.select(1, 0).to(probs.dtype());
  auto cy = centers.select(1, 1).to(probs.dtype());
  auto x1 = cx - offsets.select(1, 0);
  auto y1 = cy - offsets.select(1, 1);
  auto x2 = cx + offsets.select(1, 2);
  auto y2 = cy + offsets.select(1, 3);
  auto boxes = torch::stack({x1, y1, x2, y2}, 1);
  return boxes.clamp(0.0, static_cast<double>(image_size));
}

namespace {

// pairwise GIoU of xyxy boxes, [N]
torch::Tensor pairwise_giou(const torch::Tensor& a, const torch::Tensor& b) {
  auto ax1 = a.select(1, 0), ay1 = a.select(1, 1), ax2 = a.select(1, 2), ay2 = a.select(1, 3);
  auto bx1 = b.select(1, 0), by1 = b.select(1, 1), bx2 = b.select(1, 2), by2 = b.select(1, 3);
  auto inter_w = (torch::min(ax2, bx2) - torch::max(ax1, bx1)).clamp_min(0);
  auto inter_h = (torch::min(ay2, by2) - torch::max(ay1, by1)).clamp_min(0);
  auto inter = inter_w * inter_h;
  auto area_a = (ax2 - ax1).clamp_min(0) * (ay2 - ay1).clamp_min(0);
  auto area_b = (bx2 - bx1).clamp_min(0) * (by2 - by1).clamp_min(0);
  auto uni = area_a + area_b - inter;
  auto iou = inter / uni.clamp_min(1e-9);
  auto hull_w = (torch::max(ax2, bx2) - torch::min(ax1, bx1)).clamp_min(0);
  auto hull_h = (torch::max(ay2, by2) - torch::min(ay1, by1)).clamp_min(0);
  auto hull = (hull_w * hull_h).clamp_min(1e-9);
  return iou - (hull - uni) / hull;
}

struct LevelPositives {
  std::vector<int64_t> flat_index;   // b * HW + pos
  std::vector<int64_t> cls_channel;  // index within active_classes
  std::vector<double> center_x, center_y;
  std::vector<double> gt_x1, gt_y1, gt_x2, gt_y2;
};

}  // namespace

DetectionLossParts detection_loss(const DetectorOutputs& outputs,
                                  const std::vector<std::vector<Annotation>>& targets,
                                  const std::vector<int64_t>& active_classes,
                                  const DetectorState& state,
                                  const DetectionLossWeights& weights) {
  const auto& cfg = state.config;
  const int64_t B = outputs.cls_logits.at(0).size(0);
  if (static_cast<int64_t>(targets.size()) != B)
    throw std::invalid_argument("detection_loss: one target list per image required");

  std::vector<int64_t> active_channels;
  std::map<int64_t, int64_t> class_to_slot;  // class id -> index within active set
  for (int64_t cid : active_classes) {
    class_to_slot[cid] = static_cast<int64_t>(active_channels.size());
    active_channels.push_back(state.channel_of(cid));
  }
  for (const auto& img_targets : targets) {
    for (const auto& ann : img_targets) {
      if (class_to_slot.find(ann.class_id) == class_to_slot.end())
        throw std::invalid_argument("detection_loss: target class " +
                                    std::to_string(ann.class_id) + " not in active set");
    }
  }

  const auto opts = outputs.cls_logits[0].options();
  const int64_t num_levels = static_cast<int64_t>(cfg.strides.size());
  const int64_t A = static_cast<int64_t>(active_channels.size());

  std::vector<LevelPositives> by_level(num_levels);
  int64_t num_pos = 0;
  for (int64_t b = 0; b < B; ++b) {
    for (const auto& p : assign_positives(targets[b], cfg)) {
      const auto& ann = targets[b][p.gt_index];
      const int64_t W = cfg.level_size(p.level);
      auto& lvl = by_level[p.level];
      lvl.flat_index.push_back(b * W * W + p.pos);
      lvl.cls_channel.push_back(class_to_slot.at(ann.class_id));
      const double s = static_cast<double>(cfg.strides[p.level]);
      lvl.center_x.push_back((p.pos % W + 0.5) * s);
      lvl.center_y.push_back((p.pos / W + 0.5) * s);
      lvl.gt_x1.push_back(ann.box.x);
      lvl.gt_y1.push_back(ann.box.y);
      lvl.gt_x2.push_back(ann.box.x2());
      lvl.gt_y2.push_back(ann.box.y2());
      ++num_pos;
    }
  }
  const double pos_norm = static_cast<double>(std::max<int64_t>(num_pos, 1));

  auto qfl_sum = torch::zeros({}, opts);
  auto dfl_sum = torch::zeros({}, opts);
  auto giou_sum = torch::zeros({}, opts);

  for (int64_t l = 0; l < num_levels; ++l) {
    const int64_t W = cfg.level_size(l);
    const int64_t HW = W * W;
    auto logits = outputs.cls_logits[l]
                      .index_select(1, torch::tensor(active_channels, torch::kLong))
                      .permute({0, 2, 3, 1})
                      .reshape({B * HW, A});  // [B*HW, A]

    auto quality = torch::zeros({B * HW, A}, opts);
    const auto& lvl = by_level[l];
    const int64_t P = static_cast<int64_t>(lvl.flat_index.size());

    torch::Tensor sel_logits_reg, probs, decoded, gt_boxes;
    if (P > 0) {
      auto flat_idx = torch::tensor(lvl.flat_index, torch::kLong);
      auto reg = outputs.reg_dists[l]
                     .view({B, 4, cfg.reg_bins, HW})
                     .permute({0, 3, 1, 2})
                     .reshape({B * HW, 4, cfg.reg_bins});
      sel_logits_reg = reg.index_select(0, flat_idx);  // [P, 4, bins]
      probs = torch::softmax(sel_logits_reg, 2);

      auto centers = torch::stack({torch::tensor(lvl.center_x, torch::kFloat64),
                                   torch::tensor(lvl.center_y, torch::kFloat64)},
                                  1)
                         .to(opts.dtype());
      auto strides_t =
          torch::full({P}, static_cast<double>(cfg.strides[l]), torch::kFloat64).to(opts.dtype());
      decoded = decode_boxes(probs, centers, strides_t, cfg.bin_width, cfg.input_size);
      gt_boxes = torch::stack({torch::tensor(lvl.gt_x1, torch::kFloat64),
                               torch::tensor(lvl.gt_y1, torch::kFloat64),
                               torch::tensor(lvl.gt_x2, torch::kFloat64),
                               torch::tensor(lvl.gt_y2, torch::kFloat64)},
                              1)
                     .to(opts.dtype());

      // localization quality becomes the classification target
      auto q = pairwise_giou(decoded.detach(), gt_boxes).clamp(0.0, 1.0);
      auto row = flat_idx;
      auto col = torch::tensor(lvl.cls_channel, torch::kLong);
      quality.index_put_({row, col}, q);
    }

    auto bce = torch::binary_cross_entropy_with_logits(
        logits, quality, {}, {}, torch::Reduction::None);
    auto modulator = (quality - torch::sigmoid(logits)).abs().pow(2.0);
    qfl_sum = qfl_sum + (bce * modulator).sum();

    if (P > 0) {
      // distribution focal: distance targets in bin units, split over the
      // two neighboring bins
      auto centers_x = torch::tensor(lvl.center_x, torch::kFloat64);
      auto centers_y = torch::tensor(lvl.center_y, torch::kFloat64);
      auto dist = torch::stack({centers_x - torch::tensor(lvl.gt_x1, torch::kFloat64),
                                centers_y - torch::tensor(lvl.gt_y1, torch::kFloat64),
                                torch::tensor(lvl.gt_x2, torch::kFloat64) - centers_x,
                                torch::tensor(lvl.gt_y2, torch::kFloat64) - centers_y},
                               1);  // [P, 4] pixels
      const double unit = cfg.bin_width * cfg.strides[l];
      auto t = (dist / unit).clamp(0.0, cfg.reg_bins - 1 - 1e-4).to(opts.dtype());
      auto lo = t.floor();
      auto w_hi = t - lo;
      auto w_lo = 1.0 - w_hi;
      auto logp = torch::log_softmax(sel_logits_reg, 2);
      auto lo_idx = lo.to(torch::kLong).unsqueeze(2);
      auto logp_lo = logp.gather(2, lo_idx).squeeze(2);
      auto logp_hi = logp.gather(2, (lo_idx + 1).clamp_max(cfg.reg_bins - 1)).squeeze(2);
      dfl_sum = dfl_sum - (w_lo * logp_lo + w_hi * logp_hi).sum() / 4.0;

      giou_sum = giou_sum + (1.0 - pairwise_giou(decoded, gt_boxes)).sum();
    }
  }

  DetectionLossParts parts;
  parts.qfl = qfl_sum / pos_norm;
  parts.dfl = dfl_sum / pos_norm;
  parts.giou = giou_sum / pos_norm;
  parts.total = weights.cls * parts.qfl + weights.dfl * parts.dfl + weights.giou * parts.giou;
  parts.num_pos = num_pos;
  return parts;
}

}  // namespace ior
