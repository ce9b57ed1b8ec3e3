#include "ior/inversion.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "ior/losses.hpp"

namespace ior {

int64_t AspectRatioHistogram::bin_of(double ratio) const {
  if (!(ratio > 0.0)) throw std::invalid_argument("histogram: ratio must be positive");
  const double t = std::log(ratio / ratio_min) / std::log(ratio_max / ratio_min);
  const auto b = static_cast<int64_t>(std::floor(t * static_cast<double>(bins)));
  return std::clamp<int64_t>(b, 0, bins - 1);
}

double AspectRatioHistogram::bin_lo(int64_t bin) const {
  return ratio_min * std::pow(ratio_max / ratio_min, static_cast<double>(bin) / bins);
}

double AspectRatioHistogram::bin_hi(int64_t bin) const { return bin_lo(bin + 1); }

AspectRatioHistogram build_ratio_histograms(
    const std::map<int64_t, std::vector<Annotation>>& per_class, int64_t bins) {
  AspectRatioHistogram hist;
  hist.bins = bins;
  for (const auto& [cls, annotations] : per_class) {
    if (annotations.empty())
      throw std::invalid_argument("histogram: class " + std::to_string(cls) +
                                  " has no annotations to learn ratios from");
    auto& counts = hist.counts[cls];
    counts.assign(bins, 0);
    for (const auto& ann : annotations) {
      if (ann.box.w <= 0.0 || ann.box.h <= 0.0)
        throw std::invalid_argument("histogram: degenerate box in class " +
                                    std::to_string(cls));
      ++counts[hist.bin_of(ann.box.h / ann.box.w)];
    }
  }
  return hist;
}

SampledLabel sample_label(int64_t cls, int64_t image_size, const AspectRatioHistogram& hist,
                          const InversionConfig& cfg, Rng& rng) {
  auto it = hist.counts.find(cls);
  if (it == hist.counts.end())
    throw std::invalid_argument("sample_label: class " + std::to_string(cls) +
                                " missing from the histogram");
  const auto& counts = it->second;
  int64_t total = 0;
  for (int64_t c : counts) total += c;
  if (total == 0)
    throw std::invalid_argument("sample_label: class " + std::to_string(cls) +
                                " has an empty histogram");

  const double S = static_cast<double>(image_size);
  for (int attempt = 0; attempt < 20; ++attempt) {
    const double w = rng.uniform(cfg.w_min, cfg.w_max) * S;

    // bin proportional to counts, then uniform inside the bin
    int64_t pick = rng.uniform_int(1, total);
    int64_t bin = 0;
    for (; bin < hist.bins; ++bin) {
      pick -= counts[bin];
      if (pick <= 0) break;
    }
    const double ratio = rng.uniform(hist.bin_lo(bin), hist.bin_hi(bin));

    const double h = w * ratio;
    if (h < 4.0 || h > S - 2.0) continue;
    SampledLabel label;
    label.cls = cls;
    label.box = {rng.uniform(1.0, S - 1.0 - w), rng.uniform(1.0, S - 1.0 - h), w, h};
    return label;
  }
  throw std::runtime_error("sample_label: class " + std::to_string(cls) +
                           " keeps drawing boxes that cannot fit a " +
                           std::to_string(image_size) + " px image");
}

torch::Tensor r_prior(const torch::Tensor& image, double alpha_tv, double alpha_l2) {
  if (image.dim() != 3) throw std::invalid_argument("r_prior: expected a [C,H,W] image");
  const int64_t H = image.size(1), W = image.size(2);
  auto zero = torch::zeros({}, image.options());
  torch::Tensor tv = zero;
  int64_t n_diffs = 0;
  if (W > 1) {
    auto dx = image.slice(2, 1) - image.slice(2, 0, W - 1);
    tv = tv + dx.pow(2).sum();
    n_diffs += dx.numel();
  }
  if (H > 1) {
    auto dy = image.slice(1, 1) - image.slice(1, 0, H - 1);
    tv = tv + dy.pow(2).sum();
    n_diffs += dy.numel();
  }
  if (n_diffs > 0) tv = tv / static_cast<double>(n_diffs);
  return alpha_tv * tv + alpha_l2 * image.pow(2).sum();
}

torch::Tensor r_bn(const std::vector<BnStats>& batch_stats,
                   const std::vector<BnStats>& running_stats, double alpha_bn) {
  if (batch_stats.size() != running_stats.size())
    throw std::invalid_argument("r_bn: stat lists cover different layer counts");
  if (batch_stats.empty()) throw std::invalid_argument("r_bn: no layers");
  auto total = torch::zeros({}, batch_stats[0].mean.options());
  for (size_t i = 0; i < batch_stats.size(); ++i) {
    if (batch_stats[i].mean.sizes() != running_stats[i].mean.sizes())
      throw std::invalid_argument("r_bn: layer " + std::to_string(i) + " width mismatch");
    total = total + (batch_stats[i].mean - running_stats[i].mean).pow(2).sum() +
            (batch_stats[i].var - running_stats[i].var).pow(2).sum();
  }
  return alpha_bn * total;
}

namespace {

torch::Tensor noise_init(int64_t batch, int64_t size, Rng& rng) {
  auto z = torch::empty({batch, 3, size, size}, torch::kFloat32);
  auto flat = z.view(-1);
  auto acc = flat.accessor<float, 1>();
  for (int64_t i = 0; i < flat.numel(); ++i) acc[i] = static_cast<float>(rng.normal());
  return z;
}

std::vector<std::vector<Annotation>> shifted_targets(const std::vector<SampledLabel>& labels,
                                                     int64_t dx, int64_t dy, int64_t size) {
  std::vector<std::vector<Annotation>> targets;
  targets.reserve(labels.size());
  for (const auto& label : labels) {
    BoxXYWH box = label.box;
    box.x += static_cast<double>(dx);
    box.y += static_cast<double>(dy);
    targets.push_back({{label.cls, clamp_box(box, size, size)}});
  }
  return targets;
}

}  // namespace

std::vector<GeneratedSample> invert(DetectorState& teacher,
                                    const std::vector<SampledLabel>& labels,
                                    const InversionConfig& cfg, Rng& rng,
                                    InversionLog* log) {
  cfg.validate();
  if (labels.empty()) return {};
  for (const auto& label : labels) {
    if (!teacher.knows_class(label.cls))
      throw std::invalid_argument("invert: teacher does not know class " +
                                  std::to_string(label.cls));
  }

  const int64_t S = teacher.config.input_size;
  const int64_t B = static_cast<int64_t>(labels.size());

  // pixels are the only trainable leaf; the teacher is fenced off
  std::vector<bool> grad_flags;
  for (auto& p : teacher.model->parameters()) {
    grad_flags.push_back(p.requires_grad());
    p.set_requires_grad(false);
  }
  set_eval(teacher);
  auto running = bn_running_stats(teacher);

  auto z = noise_init(B, S, rng).set_requires_grad(true);
  torch::optim::Adam optimizer({z}, torch::optim::AdamOptions(cfg.step_size));

  auto objective_at = [&](int64_t dx, int64_t dy) {
    auto pixels = torch::sigmoid(z);
    if (dx != 0 || dy != 0) pixels = torch::roll(pixels, {dy, dx}, {2, 3});
    auto outputs = teacher.model->run(pixels, /*capture_bn=*/true);
    auto targets = shifted_targets(labels, dx, dy, S);
    auto detect = detection_loss(outputs, targets, teacher.class_registry, teacher);
    auto prior = torch::zeros({}, pixels.options());
    for (int64_t b = 0; b < B; ++b)
      prior = prior + r_prior(pixels[b], cfg.alpha_tv, cfg.alpha_l2);
    prior = prior / static_cast<double>(B);
    auto bn = r_bn(outputs.batch_stats, running, cfg.alpha_bn);
    return std::make_tuple(detect.total + prior + bn, detect.total, prior, bn);
  };

  const int64_t sample_every = log ? log->sample_every : 100;
  {
    torch::NoGradGuard guard;
    auto [total, detect, prior, bn] = objective_at(0, 0);
    if (log) log->initial_objective = total.item<double>();
  }

  for (int64_t it = 0; it < cfg.iterations; ++it) {
    const double lr = cfg.step_size * 0.5 *
                      (1.0 + std::cos(M_PI * static_cast<double>(it) /
                                      static_cast<double>(cfg.iterations)));
    static_cast<torch::optim::AdamOptions&>(optimizer.param_groups()[0].options()).lr(lr);

    const int64_t dx = cfg.jitter > 0 ? rng.uniform_int(-cfg.jitter, cfg.jitter) : 0;
    const int64_t dy = cfg.jitter > 0 ? rng.uniform_int(-cfg.jitter, cfg.jitter) : 0;

    auto [total, detect, prior, bn] = objective_at(dx, dy);
    if (!std::isfinite(total.item<double>())) {
      std::ostringstream msg;
      msg << "invert: objective diverged at iteration " << it
          << " (detect=" << detect.item<double>() << ", prior=" << prior.item<double>()
          << ", bn=" << bn.item<double>() << ")";
      throw std::runtime_error(msg.str());
    }

    optimizer.zero_grad();
    total.backward();
    optimizer.step();

    if (log && (it % sample_every == 0 || it + 1 == cfg.iterations)) {
      torch::NoGradGuard guard;
      auto [t2, d2, p2, b2] = objective_at(0, 0);
      log->sampled.push_back(t2.item<double>());
    }
  }

  {
    torch::NoGradGuard guard;
    auto [total, detect, prior, bn] = objective_at(0, 0);
    if (log) log->final_objective = total.item<double>();
  }

  for (size_t i = 0; auto& p : teacher.model->parameters()) p.set_requires_grad(grad_flags[i++]);

  auto pixels = torch::sigmoid(z).detach();
  std::vector<GeneratedSample> samples;
  for (int64_t b = 0; b < B; ++b) {
    GeneratedSample s;
    s.image = pixels[b].clone();
    s.label = labels[b];
    samples.push_back(std::move(s));
  }
  return samples;
}

VerifyResult match_detections(const std::vector<Detection>& detections,
                              const SampledLabel& label, double score_thr, double iou_thr) {
  VerifyResult result;
  for (const auto& det : detections) {
    if (det.class_id != label.cls) continue;
    if (det.score < score_thr) continue;
    if (iou(det.box, label.box) < iou_thr) continue;
    result.verified = true;
    result.teacher_score = std::max(result.teacher_score, det.score);
  }
  return result;
}

VerifyResult verify_generated(DetectorState& teacher, const GeneratedSample& sample,
                              double score_thr, double iou_thr) {
  set_eval(teacher);
  torch::NoGradGuard guard;
  auto outputs = teacher.model->run(sample.image.unsqueeze(0), false);
  auto detections = postprocess(teacher, outputs, score_thr, 0.6);
  return match_detections(detections[0], sample.label, score_thr, iou_thr);
}

}  // namespace ior
