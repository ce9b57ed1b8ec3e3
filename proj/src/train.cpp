#include "ior/train.hpp"

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "ior/distill.hpp"
#include "ior/losses.hpp"

namespace ior {

namespace {

constexpr const char* kMetricsHeader = "step,L_detect,L_feat,L_logit,L_total";

std::vector<size_t> shuffled_indices(size_t n, Rng& rng) {
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  for (size_t i = n; i > 1; --i) {
    const auto j = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

// linear warmup to the peak, cosine decay to 5% of it afterwards
double scheduled_lr(const TrainConfig& cfg, int64_t step, int64_t total_steps) {
  const double peak = cfg.learning_rate;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return peak * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  const int64_t span = std::max<int64_t>(1, total_steps - cfg.warmup_steps);
  const double t = static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span);
  const double floor = 0.05 * peak;
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(t * M_PI));
}

void set_lr(torch::optim::Adam& opt, double lr) {
  for (auto& group : opt.param_groups())
    static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
}

// keeps decoded images across epochs when the whole split fits in memory
class SplitImages {
 public:
  explicit SplitImages(const DatasetSplit& split) : split_(split) {
    int64_t bytes = 0;
    for (const auto& rec : split.images) bytes += 3 * rec.width * rec.height * 4;
    if (bytes < (int64_t{512} << 20)) cache_.resize(split.images.size());
  }

  ImagePlane get(size_t i) {
    if (cache_.empty()) return load_split_image(split_, i);
    if (!cache_[i].defined()) cache_[i] = load_split_image(split_, i);
    return cache_[i];
  }

 private:
  const DatasetSplit& split_;
  std::vector<torch::Tensor> cache_;
};

void load_batch(const DatasetSplit& split, SplitImages& store,
                const std::vector<size_t>& order, size_t first, size_t last,
                std::vector<ImagePlane>& images,
                std::vector<std::vector<Annotation>>& targets) {
  images.clear();
  targets.clear();
  for (size_t k = first; k < last; ++k) {
    const size_t i = order[k];
    images.push_back(store.get(i));
    const auto it = split.annotations.find(split.images[i].id);
    targets.push_back(it == split.annotations.end() ? std::vector<Annotation>{} : it->second);
  }
}

}  // namespace

void write_metrics_csv(const std::string& path, const std::vector<StepMetrics>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_metrics_csv: cannot open " + path);
  out << kMetricsHeader << "\n";
  for (const auto& r : rows)
    out << r.step << "," << r.detect << "," << r.feat << "," << r.logit << "," << r.total
        << "\n";
  if (!out) throw std::runtime_error("write_metrics_csv: write failed for " + path);
}

std::vector<StepMetrics> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_metrics_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader)
    throw std::runtime_error("read_metrics_csv: bad header in " + path);
  std::vector<StepMetrics> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    StepMetrics r;
    char c1, c2, c3, c4;
    if (!(ss >> r.step >> c1 >> r.detect >> c2 >> r.feat >> c3 >> r.logit >> c4 >> r.total) ||
        c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',')
      throw std::runtime_error("read_metrics_csv: bad row in " + path + ": " + line);
    rows.push_back(r);
  }
  return rows;
}

std::vector<StepMetrics> train_base(DetectorState& state, const DatasetSplit& split,
                                    const TrainConfig& cfg, Rng& rng) {
  cfg.validate();
  if (split.images.empty()) throw std::invalid_argument("train_base: split has no images");
  set_train(state);
  torch::optim::Adam opt(
      state.model->parameters(),
      torch::optim::AdamOptions(cfg.learning_rate).weight_decay(cfg.weight_decay));

  const auto n = split.images.size();
  const auto batch = static_cast<size_t>(cfg.batch_size);
  const int64_t batches_per_epoch = static_cast<int64_t>((n + batch - 1) / batch);
  const int64_t total_steps = cfg.base_epochs * batches_per_epoch;

  SplitImages store(split);
  std::vector<StepMetrics> rows;
  std::vector<ImagePlane> images;
  std::vector<std::vector<Annotation>> targets;
  int64_t step = 0;
  for (int64_t epoch = 0; epoch < cfg.base_epochs; ++epoch) {
    const auto order = shuffled_indices(n, rng);
    for (size_t first = 0; first < n; first += batch, ++step) {
      load_batch(split, store, order, first, std::min(n, first + batch), images, targets);
      set_lr(opt, scheduled_lr(cfg, step, total_steps));
      opt.zero_grad();
      auto out = forward(state, images);
      auto parts = detection_loss(out, targets, split.classes, state);
      parts.total.backward();
      torch::nn::utils::clip_grad_norm_(state.model->parameters(), 10.0);
      opt.step();
      if (step % cfg.log_every == 0 || step + 1 == total_steps) {
        const double d = parts.total.item<double>();
        rows.push_back({step, d, 0.0, 0.0, d});
      }
    }
  }
  set_eval(state);
  return rows;
}

std::vector<StepMetrics> train_incremental(DetectorState& student,
                                           const IncrementalSetup& setup,
                                           const ExperimentConfig& cfg, Rng& rng) {
  if (setup.split == nullptr || setup.teacher == nullptr)
    throw std::invalid_argument("train_incremental: split and teacher are required");
  cfg.train.validate();
  cfg.replay.validate();
  cfg.distill.validate();
  const DatasetSplit& split = *setup.split;
  if (split.images.empty())
    throw std::invalid_argument("train_incremental: split has no images");
  for (int64_t cid : setup.old_classes)
    if (!student.knows_class(cid))
      throw std::invalid_argument("train_incremental: student head missing old class " +
                                  std::to_string(cid));

  const bool use_replay = cfg.toggles.replay_on && !setup.crops.empty();
  const bool need_teacher = cfg.toggles.feat_distill_on || cfg.toggles.logit_distill_on;

  set_eval(*setup.teacher);
  freeze_batchnorm(student);
  set_train(student);
  torch::optim::Adam opt(
      student.model->parameters(),
      torch::optim::AdamOptions(cfg.train.learning_rate).weight_decay(cfg.train.weight_decay));

  const auto n = split.images.size();
  const auto batch = static_cast<size_t>(cfg.train.batch_size);
  const int64_t batches_per_epoch = static_cast<int64_t>((n + batch - 1) / batch);
  const int64_t total_steps = cfg.train.incremental_epochs * batches_per_epoch;

  SplitImages store(split);
  std::vector<StepMetrics> rows;
  std::vector<ImagePlane> images;
  std::vector<std::vector<Annotation>> gt;
  int64_t step = 0;
  for (int64_t epoch = 0; epoch < cfg.train.incremental_epochs; ++epoch) {
    const auto order = shuffled_indices(n, rng);
    for (size_t first = 0; first < n; first += batch, ++step) {
      load_batch(split, store, order, first, std::min(n, first + batch), images, gt);

      std::vector<std::vector<ReplayedBox>> replayed(images.size());
      if (use_replay) {
        auto composites = augment_batch(images, gt, setup.crops, cfg.replay, rng);
        for (size_t i = 0; i < images.size(); ++i) {
          images[i] = composites[i].image;
          replayed[i] = std::move(composites[i].replayed);
        }
      }
      auto targets = gt;
      if (cfg.toggles.pseudo_label_on)
        for (size_t i = 0; i < replayed.size(); ++i)
          for (const auto& rb : replayed[i]) targets[i].push_back({rb.cls, rb.box});

      set_lr(opt, scheduled_lr(cfg.train, step, total_steps));
      opt.zero_grad();
      auto s_out = forward(student, images);
      DetectorOutputs t_out;
      if (need_teacher) {
        torch::NoGradGuard no_grad;
        t_out = forward(*setup.teacher, images);
      }

      auto parts = detection_loss(s_out, targets, student.class_registry, student);
      torch::Tensor feat = torch::zeros({});
      torch::Tensor logit = torch::zeros({});
      if (need_teacher) {
        if (cfg.distill.hvd_on) {
          if (cfg.toggles.feat_distill_on)
            feat = feat_distill_loss(t_out.cls_features, s_out.cls_features, replayed,
                                     student.config, cfg.distill);
          if (cfg.toggles.logit_distill_on) {
            const auto selection =
                select_topk(t_out, setup.old_classes, *setup.teacher, cfg.distill);
            logit = logit_distill_loss(t_out, s_out, selection, setup.old_classes,
                                       *setup.teacher, student, cfg.distill);
          }
        } else {
          auto dense = full_map_distill(t_out, s_out, setup.old_classes, *setup.teacher,
                                        student, cfg.distill);
          if (cfg.toggles.feat_distill_on) feat = dense.feat;
          if (cfg.toggles.logit_distill_on) logit = dense.logit;
        }
      }
      auto total = total_loss(parts.total, feat, logit, cfg.distill);
      total.backward();
      torch::nn::utils::clip_grad_norm_(student.model->parameters(), 10.0);
      opt.step();

      if (step % cfg.train.log_every == 0 || step + 1 == total_steps)
        rows.push_back({step, parts.total.item<double>(), feat.item<double>(),
                        logit.item<double>(), total.item<double>()});
    }
  }
  set_eval(student);
  return rows;
}

std::vector<EvalItem> collect_detections(DetectorState& state, const DatasetSplit& split,
                                         const TrainConfig& cfg) {
  set_eval(state);
  torch::NoGradGuard no_grad;
  std::vector<EvalItem> items;
  const auto n = split.images.size();
  const auto batch = static_cast<size_t>(cfg.batch_size);
  for (size_t first = 0; first < n; first += batch) {
    const size_t last = std::min(n, first + batch);
    std::vector<ImagePlane> images;
    for (size_t i = first; i < last; ++i) images.push_back(load_split_image(split, i));
    auto out = forward(state, images);
    auto dets = postprocess(state, out, cfg.score_threshold, cfg.nms_iou);
    for (size_t i = first; i < last; ++i) {
      EvalItem item;
      const auto it = split.annotations.find(split.images[i].id);
      if (it != split.annotations.end()) item.gt = it->second;
      item.dets = std::move(dets[i - first]);
      items.push_back(std::move(item));
    }
  }
  return items;
}

EvalResult evaluate_split(DetectorState& state, const DatasetSplit& split,
                          const TrainConfig& cfg, const std::vector<int64_t>& old_classes,
                          const std::vector<int64_t>& new_classes) {
  const auto items = collect_detections(state, split, cfg);
  auto result = evaluate_map(items, split.classes);
  fill_old_new(result, old_classes, new_classes);
  return result;
}

}  // namespace ior
