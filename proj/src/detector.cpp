#include "ior/detector.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "ior/losses.hpp"

namespace ior {

void DetectorConfig::validate() const {
  if (num_classes < 1) throw std::invalid_argument("DetectorConfig: num_classes must be >= 1");
  if (reg_bins < 2) throw std::invalid_argument("DetectorConfig: reg_bins must be >= 2");
  if (strides.empty()) throw std::invalid_argument("DetectorConfig: strides must be non-empty");
  for (size_t i = 1; i < strides.size(); ++i) {
    if (strides[i] <= strides[i - 1])
      throw std::invalid_argument("DetectorConfig: strides must be strictly increasing");
  }
  for (int64_t s : strides) {
    if (input_size % s != 0)
      throw std::invalid_argument("DetectorConfig: input_size must be divisible by every stride");
  }
  if (backbone_channels.size() < 2)
    throw std::invalid_argument("DetectorConfig: need at least two backbone stages");
  if (bin_width <= 0.0) throw std::invalid_argument("DetectorConfig: bin_width must be positive");
}

torch::Tensor normalize_reg_dists(const torch::Tensor& reg_dists, int64_t reg_bins) {
  auto shape = reg_dists.sizes().vec();
  auto sides = reg_dists.view({shape[0], 4, reg_bins, shape[2], shape[3]});
  return torch::softmax(sides, 2).view(shape);
}

CaptureBNImpl::CaptureBNImpl(int64_t channels, double momentum) {
  bn = register_module("bn", torch::nn::BatchNorm2d(
                                 torch::nn::BatchNorm2dOptions(channels).momentum(momentum)));
}

torch::Tensor CaptureBNImpl::forward(const torch::Tensor& x) {
  if (capture) {
    // unbiased variance, the same estimator the running stats accumulate
    captured.mean = x.mean({0, 2, 3});
    captured.var = x.var({0, 2, 3}, /*unbiased=*/true);
  }
  return bn->forward(x);
}

void CaptureBNImpl::train(bool on) {
  torch::nn::Module::train(frozen_ ? false : on);
}

void CaptureBNImpl::set_frozen(bool frozen) {
  frozen_ = frozen;
  if (frozen) {
    bn->eval();
    bn->weight.set_requires_grad(false);
    bn->bias.set_requires_grad(false);
  } else {
    bn->weight.set_requires_grad(true);
    bn->bias.set_requires_grad(true);
  }
}

ConvBNImpl::ConvBNImpl(int64_t in, int64_t out, int64_t stride, double momentum) {
  conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3)
                                                       .stride(stride)
                                                       .padding(1)
                                                       .bias(false)));
  bn = register_module("bn", CaptureBN(out, momentum));
  torch::nn::init::kaiming_normal_(conv->weight, 0.0, torch::kFanOut, torch::kReLU);
}

torch::Tensor ConvBNImpl::forward(const torch::Tensor& x) {
  return torch::relu(bn->forward(conv->forward(x)));
}

namespace {

int64_t gn_groups(int64_t channels) {
  for (int64_t g : {8, 4, 2}) {
    if (channels % g == 0) return g;
  }
  return 1;
}

}  // namespace

GflDetectorImpl::GflDetectorImpl(const DetectorConfig& cfg) : cfg_(cfg) {
  cfg_.validate();

  // stem at stride 2, then one downsample + one refine block per stage
  const auto& ch = cfg_.backbone_channels;
  int64_t cum_stride = 2;
  int64_t in = 3;
  auto add_block = [&](int64_t out, int64_t stride) {
    auto block = ConvBN(in, out, stride, cfg_.bn_momentum);
    register_module("block" + std::to_string(blocks_.size()), block);
    blocks_.push_back(block);
    in = out;
  };
  add_block(ch[0], 2);
  std::vector<int64_t> block_stride{cum_stride};
  std::vector<int64_t> block_channels{ch[0]};
  for (size_t s = 1; s < ch.size(); ++s) {
    add_block(ch[s], 2);
    cum_stride *= 2;
    block_stride.push_back(cum_stride);
    block_channels.push_back(ch[s]);
    add_block(ch[s], 1);
    block_stride.push_back(cum_stride);
    block_channels.push_back(ch[s]);
  }

  for (int64_t want : cfg_.strides) {
    int64_t tap = -1;
    for (size_t i = 0; i < block_stride.size(); ++i) {
      if (block_stride[i] == want) tap = static_cast<int64_t>(i);
    }
    if (tap < 0)
      throw std::invalid_argument("DetectorConfig: no backbone stage at stride " +
                                  std::to_string(want));
    tap_blocks_.push_back(tap);
  }

  const int64_t F = cfg_.fpn_channels;
  for (size_t l = 0; l < tap_blocks_.size(); ++l) {
    auto lat = torch::nn::Conv2d(
        torch::nn::Conv2dOptions(block_channels[tap_blocks_[l]], F, 1));
    auto smooth = torch::nn::Conv2d(torch::nn::Conv2dOptions(F, F, 3).padding(1));
    torch::nn::init::kaiming_normal_(lat->weight, 0.0, torch::kFanOut, torch::kReLU);
    torch::nn::init::zeros_(lat->bias);
    torch::nn::init::kaiming_normal_(smooth->weight, 0.0, torch::kFanOut, torch::kReLU);
    torch::nn::init::zeros_(smooth->bias);
    register_module("lateral" + std::to_string(l), lat);
    register_module("fpn_smooth" + std::to_string(l), smooth);
    laterals_.push_back(lat);
    fpn_smooth_.push_back(smooth);
  }

  auto make_tower = [&](const std::string& name) {
    torch::nn::Sequential tower;
    for (int64_t i = 0; i < cfg_.head_convs; ++i) {
      auto conv = torch::nn::Conv2d(torch::nn::Conv2dOptions(F, F, 3).padding(1));
      torch::nn::init::normal_(conv->weight, 0.0, 0.01);
      torch::nn::init::zeros_(conv->bias);
      tower->push_back(conv);
      tower->push_back(torch::nn::GroupNorm(gn_groups(F), F));
      tower->push_back(torch::nn::ReLU());
    }
    register_module(name, tower);
    return tower;
  };
  cls_tower_ = make_tower("cls_tower");
  reg_tower_ = make_tower("reg_tower");

  cls_pred_ = register_module(
      "cls_pred", torch::nn::Conv2d(torch::nn::Conv2dOptions(F, cfg_.num_classes, 3).padding(1)));
  reg_pred_ = register_module(
      "reg_pred",
      torch::nn::Conv2d(torch::nn::Conv2dOptions(F, 4 * cfg_.reg_bins, 3).padding(1)));
  torch::nn::init::normal_(cls_pred_->weight, 0.0, 0.01);
  // prior probability ~0.01 so a fresh head stays quiet
  torch::nn::init::constant_(cls_pred_->bias, -std::log(99.0));
  torch::nn::init::normal_(reg_pred_->weight, 0.0, 0.01);
  torch::nn::init::zeros_(reg_pred_->bias);

  for (const auto& m : modules(/*include_self=*/false)) {
    if (auto bn = std::dynamic_pointer_cast<CaptureBNImpl>(m)) {
      bn_layers_.push_back(CaptureBN(bn));
    }
  }
}

DetectorOutputs GflDetectorImpl::run(const torch::Tensor& batch, bool capture_bn) {
  if (batch.dim() != 4 || batch.size(1) != 3 || batch.size(2) != cfg_.input_size ||
      batch.size(3) != cfg_.input_size) {
    throw std::invalid_argument("forward: expected [B, 3, " + std::to_string(cfg_.input_size) +
                                ", " + std::to_string(cfg_.input_size) + "] input");
  }

  for (auto& bn : bn_layers_) bn->capture = capture_bn;

  std::vector<torch::Tensor> taps(tap_blocks_.size());
  torch::Tensor x = batch;
  for (size_t i = 0; i < blocks_.size(); ++i) {
    x = blocks_[i]->forward(x);
    for (size_t l = 0; l < tap_blocks_.size(); ++l) {
      if (tap_blocks_[l] == static_cast<int64_t>(i)) taps[l] = x;
    }
  }

  // top-down pathway
  std::vector<torch::Tensor> pyramid(taps.size());
  for (int64_t l = static_cast<int64_t>(taps.size()) - 1; l >= 0; --l) {
    auto p = laterals_[l]->forward(taps[l]);
    if (l + 1 < static_cast<int64_t>(taps.size())) {
      p = p + torch::upsample_nearest2d(pyramid[l + 1], {p.size(2), p.size(3)});
    }
    pyramid[l] = p;
  }

  DetectorOutputs out;
  for (size_t l = 0; l < pyramid.size(); ++l) {
    auto p = fpn_smooth_[l]->forward(pyramid[l]);
    auto cls_feat = cls_tower_->forward(p);
    auto reg_feat = reg_tower_->forward(p);
    out.cls_features.push_back(cls_feat);
    out.cls_logits.push_back(cls_pred_->forward(cls_feat));
    out.reg_dists.push_back(reg_pred_->forward(reg_feat));
  }

  if (capture_bn) {
    for (auto& bn : bn_layers_) {
      out.batch_stats.push_back(bn->captured);
      bn->capture = false;
    }
  }
  return out;
}

int64_t DetectorState::channel_of(int64_t class_id) const {
  for (size_t k = 0; k < class_registry.size(); ++k) {
    if (class_registry[k] == class_id) return static_cast<int64_t>(k);
  }
  throw std::invalid_argument("unknown class id " + std::to_string(class_id));
}

bool DetectorState::knows_class(int64_t class_id) const {
  return std::find(class_registry.begin(), class_registry.end(), class_id) !=
         class_registry.end();
}

DetectorState make_detector(DetectorConfig config, std::vector<int64_t> class_ids,
                            uint64_t seed) {
  for (size_t i = 0; i < class_ids.size(); ++i) {
    for (size_t j = i + 1; j < class_ids.size(); ++j) {
      if (class_ids[i] == class_ids[j])
        throw std::invalid_argument("class registry must not contain duplicates");
    }
  }
  config.num_classes = static_cast<int64_t>(class_ids.size());
  torch::manual_seed(seed);
  DetectorState state;
  state.config = config;
  state.model = GflDetector(config);
  state.class_registry = std::move(class_ids);
  return state;
}

namespace {

void copy_tensors_by_name(const GflDetector& src, GflDetector& dst) {
  auto src_params = src->named_parameters();
  auto dst_params = dst->named_parameters();
  torch::NoGradGuard guard;
  for (auto& item : dst_params) {
    auto* t = src_params.find(item.key());
    if (t == nullptr) throw std::runtime_error("clone: missing parameter " + item.key());
    if (item.value().sizes() == t->sizes()) {
      item.value().copy_(*t);
    } else if (item.key().rfind("cls_pred.", 0) == 0) {
      // widened head: old rows first, fresh initialization for the rest
      item.value().narrow(0, 0, t->size(0)).copy_(*t);
    } else {
      throw std::runtime_error("clone: shape mismatch at " + item.key());
    }
  }
  auto src_bufs = src->named_buffers();
  auto dst_bufs = dst->named_buffers();
  for (auto& item : dst_bufs) {
    auto* t = src_bufs.find(item.key());
    if (t == nullptr) throw std::runtime_error("clone: missing buffer " + item.key());
    item.value().copy_(*t);
  }
}

}  // namespace

DetectorState clone_detector(const DetectorState& state) {
  DetectorState out;
  out.config = state.config;
  out.class_registry = state.class_registry;
  torch::manual_seed(0);
  out.model = GflDetector(state.config);
  copy_tensors_by_name(state.model, out.model);
  auto& src_bns = state.model->bn_layers();
  auto& dst_bns = out.model->bn_layers();
  for (size_t i = 0; i < src_bns.size(); ++i) dst_bns[i]->set_frozen(src_bns[i]->frozen());
  out.model->eval();
  return out;
}

DetectorOutputs forward(DetectorState& state, const torch::Tensor& batch, bool capture_bn) {
  return state.model->run(batch, capture_bn);
}

DetectorOutputs forward(DetectorState& state, const std::vector<ImagePlane>& batch,
                        bool capture_bn) {
  if (batch.empty()) throw std::invalid_argument("forward: empty batch");
  return forward(state, torch::stack(batch, 0), capture_bn);
}

std::vector<std::vector<Detection>> postprocess(const DetectorState& state,
                                                const DetectorOutputs& outputs,
                                                double score_threshold, double nms_iou,
                                                int64_t max_detections) {
  torch::NoGradGuard guard;
  const auto& cfg = state.config;
  const int64_t B = outputs.cls_logits.at(0).size(0);

  std::vector<std::vector<Detection>> results(B);
  for (int64_t b = 0; b < B; ++b) {
    std::vector<Detection> candidates;
    for (size_t l = 0; l < outputs.cls_logits.size(); ++l) {
      const int64_t W = cfg.level_size(l);
      auto scores = torch::sigmoid(outputs.cls_logits[l][b]);  // [C, H, W]
      auto mask = scores > score_threshold;
      auto idx = mask.nonzero();  // [M, 3] as (c, y, x)
      if (idx.size(0) == 0) continue;

      const int64_t M = idx.size(0);
      auto probs_map = normalize_reg_dists(outputs.reg_dists[l].slice(0, b, b + 1),
                                           cfg.reg_bins)[0]
                           .view({4, cfg.reg_bins, W * W});
      auto idx_a = idx.accessor<int64_t, 2>();
      auto centers = torch::empty({M, 2}, torch::kFloat64);
      auto pos = torch::empty({M}, torch::kLong);
      auto c_acc = centers.accessor<double, 2>();
      auto p_acc = pos.accessor<int64_t, 1>();
      for (int64_t m = 0; m < M; ++m) {
        const int64_t y = idx_a[m][1], x = idx_a[m][2];
        c_acc[m][0] = (x + 0.5) * cfg.strides[l];
        c_acc[m][1] = (y + 0.5) * cfg.strides[l];
        p_acc[m] = y * W + x;
      }
      auto probs = probs_map.index_select(2, pos).permute({2, 0, 1}).to(torch::kFloat64);
      auto strides = torch::full({M}, static_cast<double>(cfg.strides[l]), torch::kFloat64);
      auto boxes = decode_boxes(probs, centers, strides, cfg.bin_width, cfg.input_size);
      auto box_a = boxes.accessor<double, 2>();
      auto score_flat = scores.view({cfg.num_classes, W * W});
      for (int64_t m = 0; m < M; ++m) {
        Detection d;
        d.class_id = state.class_registry.at(idx_a[m][0]);
        d.score = score_flat[idx_a[m][0]][p_acc[m]].item<double>();
        d.box = {box_a[m][0], box_a[m][1], box_a[m][2] - box_a[m][0],
                 box_a[m][3] - box_a[m][1]};
        if (d.box.w > 0 && d.box.h > 0) candidates.push_back(d);
      }
    }

    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });

    // greedy per-class suppression
    std::vector<Detection> kept;
    for (const auto& cand : candidates) {
      bool suppressed = false;
      for (const auto& k : kept) {
        if (k.class_id == cand.class_id && iou(k.box, cand.box) > nms_iou) {
          suppressed = true;
          break;
        }
      }
      if (!suppressed) {
        kept.push_back(cand);
        if (static_cast<int64_t>(kept.size()) >= max_detections) break;
      }
    }
    results[b] = std::move(kept);
  }
  return results;
}

DetectorState expand_for_new_classes(const DetectorState& state,
                                     const std::vector<int64_t>& new_class_ids,
                                     uint64_t seed) {
  for (size_t i = 0; i < new_class_ids.size(); ++i) {
    if (state.knows_class(new_class_ids[i]))
      throw std::invalid_argument("expand: class " + std::to_string(new_class_ids[i]) +
                                  " already registered");
    for (size_t j = i + 1; j < new_class_ids.size(); ++j) {
      if (new_class_ids[i] == new_class_ids[j])
        throw std::invalid_argument("expand: duplicate class id " +
                                    std::to_string(new_class_ids[i]));
    }
  }
  if (new_class_ids.empty()) return clone_detector(state);

  DetectorState out;
  out.config = state.config;
  out.config.num_classes = state.config.num_classes + static_cast<int64_t>(new_class_ids.size());
  out.class_registry = state.class_registry;
  out.class_registry.insert(out.class_registry.end(), new_class_ids.begin(),
                            new_class_ids.end());
  torch::manual_seed(seed);
  out.model = GflDetector(out.config);
  copy_tensors_by_name(state.model, out.model);
  freeze_batchnorm(out);
  out.model->eval();
  return out;
}

void freeze_batchnorm(DetectorState& state) {
  for (auto& bn : state.model->bn_layers()) bn->set_frozen(true);
}

std::vector<BnStats> bn_running_stats(const DetectorState& state) {
  std::vector<BnStats> stats;
  for (auto& bn : state.model->bn_layers()) {
    stats.push_back({bn->bn->running_mean, bn->bn->running_var});
  }
  return stats;
}

void set_eval(DetectorState& state) { state.model->eval(); }
void set_train(DetectorState& state) { state.model->train(); }

}  // namespace ior
