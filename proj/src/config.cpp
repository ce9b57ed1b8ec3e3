#include "ior/config.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace ior {

namespace {

using nlohmann::json;

// keeps track of which keys a section consumed; leftovers are an error
class StrictObject {
 public:
  StrictObject(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw std::invalid_argument(where_ + ": expected an object");
  }

  template <typename T>
  void opt(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw std::invalid_argument(where_ + "." + key + ": " + e.what());
    }
  }

  const json* section(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key)) return nullptr;
    return &j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (seen_.find(it.key()) == seen_.end())
        throw std::invalid_argument(where_ + ": unknown key \"" + it.key() + "\"");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

void parse_dataset(const json& j, ShapesWorldConfig& out) {
  StrictObject o(j, "dataset");
  o.opt("num_classes", out.num_classes);
  o.opt("train_images", out.train_images);
  o.opt("val_images", out.val_images);
  o.opt("min_objects", out.min_objects);
  o.opt("max_objects", out.max_objects);
  o.opt("canvas", out.canvas);
  o.opt("clutter", out.clutter);
  o.opt("min_class_coverage", out.min_class_coverage);
  o.opt("seed", out.seed);
  o.finish();
}

void parse_detector(const json& j, DetectorConfig& out) {
  StrictObject o(j, "detector");
  o.opt("input_size", out.input_size);
  o.opt("strides", out.strides);
  o.opt("reg_bins", out.reg_bins);
  o.opt("bin_width", out.bin_width);
  o.opt("backbone_channels", out.backbone_channels);
  o.opt("fpn_channels", out.fpn_channels);
  o.opt("head_convs", out.head_convs);
  o.opt("bn_momentum", out.bn_momentum);
  o.finish();
}

void parse_train(const json& j, TrainConfig& out) {
  StrictObject o(j, "train");
  o.opt("base_epochs", out.base_epochs);
  o.opt("incremental_epochs", out.incremental_epochs);
  o.opt("batch_size", out.batch_size);
  o.opt("learning_rate", out.learning_rate);
  o.opt("weight_decay", out.weight_decay);
  o.opt("warmup_steps", out.warmup_steps);
  o.opt("log_every", out.log_every);
  o.opt("seed", out.seed);
  o.opt("score_threshold", out.score_threshold);
  o.opt("nms_iou", out.nms_iou);
  o.finish();
}

void parse_inversion(const json& j, InversionConfig& out) {
  StrictObject o(j, "inversion");
  o.opt("iterations", out.iterations);
  o.opt("step_size", out.step_size);
  o.opt("alpha_tv", out.alpha_tv);
  o.opt("alpha_l2", out.alpha_l2);
  o.opt("alpha_bn", out.alpha_bn);
  o.opt("batch", out.batch);
  o.opt("jitter", out.jitter);
  o.opt("per_class", out.per_class);
  o.opt("ratio_bins", out.ratio_bins);
  o.opt("w_min", out.w_min);
  o.opt("w_max", out.w_max);
  o.opt("verify_score", out.verify_score);
  o.opt("verify_iou", out.verify_iou);
  o.finish();
}

void parse_replay(const json& j, ReplayConfig& out) {
  StrictObject o(j, "replay");
  o.opt("beta_a", out.beta_a);
  o.opt("beta_b", out.beta_b);
  o.opt("thr", out.thr);
  o.opt("replays_per_image", out.replays_per_image);
  o.opt("max_attempts", out.max_attempts);
  o.opt("scale_jitter_lo", out.scale_jitter_lo);
  o.opt("scale_jitter_hi", out.scale_jitter_hi);
  o.opt("only_verified", out.only_verified);
  o.finish();
}

void parse_distill(const json& j, DistillConfig& out) {
  StrictObject o(j, "distill");
  o.opt("top_k", out.top_k);
  o.opt("roi_size", out.roi_size);
  o.opt("w_feat", out.w_feat);
  o.opt("w_logit", out.w_logit);
  o.opt("kl_temperature", out.kl_temperature);
  o.opt("hvd_on", out.hvd_on);
  o.opt("full_w_feat", out.full_w_feat);
  o.opt("full_w_logit", out.full_w_logit);
  o.finish();
}

void parse_toggles(const json& j, Toggles& out) {
  StrictObject o(j, "toggles");
  o.opt("replay_on", out.replay_on);
  o.opt("feat_distill_on", out.feat_distill_on);
  o.opt("logit_distill_on", out.logit_distill_on);
  o.opt("pseudo_label_on", out.pseudo_label_on);
  o.finish();
}

}  // namespace

void ShapesWorldConfig::validate() const {
  if (num_classes < 2) throw std::invalid_argument("dataset: num_classes must be >= 2");
  if (train_images < 1 || val_images < 1)
    throw std::invalid_argument("dataset: split sizes must be positive");
  if (min_objects < 1 || max_objects < min_objects)
    throw std::invalid_argument("dataset: need 1 <= min_objects <= max_objects");
  if (canvas < 32) throw std::invalid_argument("dataset: canvas must be >= 32 px");
  if (clutter < 0.0 || clutter > 1.0)
    throw std::invalid_argument("dataset: clutter must lie in [0,1]");
  if (min_class_coverage < 1)
    throw std::invalid_argument("dataset: min_class_coverage must be >= 1");
}

void TaskSchedule::validate(int64_t num_classes) const {
  if (steps.empty()) throw std::invalid_argument("schedule: needs at least one step");
  std::set<int64_t> seen;
  for (const auto& step : steps) {
    if (step.empty()) throw std::invalid_argument("schedule: empty step");
    for (int64_t c : step) {
      if (c < 0 || c >= num_classes)
        throw std::invalid_argument("schedule: class " + std::to_string(c) + " out of range");
      if (!seen.insert(c).second)
        throw std::invalid_argument("schedule: class " + std::to_string(c) +
                                    " appears in two steps");
    }
  }
  if (static_cast<int64_t>(seen.size()) != num_classes)
    throw std::invalid_argument("schedule: steps must cover every class exactly once");
}

std::vector<int64_t> TaskSchedule::seen_through(size_t step) const {
  std::vector<int64_t> out;
  for (size_t s = 0; s <= step && s < steps.size(); ++s)
    out.insert(out.end(), steps[s].begin(), steps[s].end());
  return out;
}

std::vector<int64_t> TaskSchedule::all_classes() const {
  return seen_through(steps.empty() ? 0 : steps.size() - 1);
}

void TrainConfig::validate() const {
  if (base_epochs < 1 || incremental_epochs < 1)
    throw std::invalid_argument("train: epoch counts must be positive");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be positive");
  if (learning_rate <= 0.0) throw std::invalid_argument("train: learning_rate must be positive");
  if (score_threshold < 0.0 || score_threshold >= 1.0)
    throw std::invalid_argument("train: score_threshold must lie in [0,1)");
  if (nms_iou <= 0.0 || nms_iou >= 1.0)
    throw std::invalid_argument("train: nms_iou must lie in (0,1)");
}

void InversionConfig::validate() const {
  if (iterations < 0) throw std::invalid_argument("inversion: iterations must be >= 0");
  if (step_size <= 0.0) throw std::invalid_argument("inversion: step_size must be positive");
  if (alpha_tv < 0.0 || alpha_l2 < 0.0 || alpha_bn < 0.0)
    throw std::invalid_argument("inversion: regularizer weights must be >= 0");
  if (batch < 1) throw std::invalid_argument("inversion: batch must be positive");
  if (jitter < 0) throw std::invalid_argument("inversion: jitter must be >= 0");
  if (per_class < 1) throw std::invalid_argument("inversion: per_class must be positive");
  if (ratio_bins < 1) throw std::invalid_argument("inversion: ratio_bins must be positive");
  if (!(w_min > 0.0 && w_min <= w_max && w_max <= 1.0))
    throw std::invalid_argument("inversion: need 0 < w_min <= w_max <= 1");
  if (verify_iou <= 0.0 || verify_iou > 1.0)
    throw std::invalid_argument("inversion: verify_iou must lie in (0,1]");
}

void ReplayConfig::validate() const {
  if (beta_a <= 0.0 || beta_b <= 0.0)
    throw std::invalid_argument("replay: beta parameters must be positive");
  if (thr < 0.0 || thr >= 1.0) throw std::invalid_argument("replay: thr must lie in [0,1)");
  if (replays_per_image < 0)
    throw std::invalid_argument("replay: replays_per_image must be >= 0");
  if (max_attempts < 1) throw std::invalid_argument("replay: max_attempts must be positive");
  if (!(scale_jitter_lo > 0.0 && scale_jitter_lo <= scale_jitter_hi))
    throw std::invalid_argument("replay: bad scale_jitter range");
}

void DistillConfig::validate() const {
  if (top_k < 1) throw std::invalid_argument("distill: top_k must be >= 1");
  if (roi_size < 1) throw std::invalid_argument("distill: roi_size must be >= 1");
  if (w_feat < 0.0 || w_logit < 0.0 || full_w_feat < 0.0 || full_w_logit < 0.0)
    throw std::invalid_argument("distill: loss weights must be >= 0");
  if (kl_temperature <= 0.0)
    throw std::invalid_argument("distill: kl_temperature must be positive");
}

void ExperimentConfig::validate() const {
  dataset.validate();
  schedule.validate(dataset.num_classes);
  if (mode != "co" && mode != "non-co")
    throw std::invalid_argument("mode: expected \"co\" or \"non-co\"");
  DetectorConfig det = detector;
  det.num_classes = dataset.num_classes;
  det.validate();
  if (detector.input_size != dataset.canvas)
    throw std::invalid_argument("detector.input_size must equal dataset.canvas");
  train.validate();
  inversion.validate();
  replay.validate();
  distill.validate();
}

ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  ExperimentConfig cfg;
  StrictObject o(j, "config");
  if (const auto* s = o.section("dataset")) parse_dataset(*s, cfg.dataset);
  if (const auto* s = o.section("schedule")) {
    try {
      cfg.schedule.steps = s->get<std::vector<std::vector<int64_t>>>();
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument(std::string("schedule: ") + e.what());
    }
  }
  std::string mode = cfg.mode;
  o.opt("mode", mode);
  cfg.mode = mode;
  if (const auto* s = o.section("detector")) parse_detector(*s, cfg.detector);
  if (const auto* s = o.section("train")) parse_train(*s, cfg.train);
  if (const auto* s = o.section("inversion")) parse_inversion(*s, cfg.inversion);
  if (const auto* s = o.section("replay")) parse_replay(*s, cfg.replay);
  if (const auto* s = o.section("distill")) parse_distill(*s, cfg.distill);
  if (const auto* s = o.section("toggles")) parse_toggles(*s, cfg.toggles);
  o.finish();
  if (cfg.schedule.steps.empty()) {
    // default one-step schedule: first half, second half
    std::vector<int64_t> a, b;
    for (int64_t c = 0; c < cfg.dataset.num_classes; ++c)
      (c < cfg.dataset.num_classes / 2 ? a : b).push_back(c);
    cfg.schedule.steps = {a, b};
  }
  cfg.detector.num_classes = cfg.dataset.num_classes;
  if (!j.contains("detector") || !j.at("detector").contains("input_size"))
    cfg.detector.input_size = cfg.dataset.canvas;
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  return parse_experiment_config(j);
}

nlohmann::json experiment_config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["dataset"] = {{"num_classes", cfg.dataset.num_classes},
                  {"train_images", cfg.dataset.train_images},
                  {"val_images", cfg.dataset.val_images},
                  {"min_objects", cfg.dataset.min_objects},
                  {"max_objects", cfg.dataset.max_objects},
                  {"canvas", cfg.dataset.canvas},
                  {"clutter", cfg.dataset.clutter},
                  {"min_class_coverage", cfg.dataset.min_class_coverage},
                  {"seed", cfg.dataset.seed}};
  j["schedule"] = cfg.schedule.steps;
  j["mode"] = cfg.mode;
  j["detector"] = detector_config_to_json(cfg.detector);
  j["detector"].erase("num_classes");  // derived from the schedule
  j["train"] = {{"base_epochs", cfg.train.base_epochs},
                {"incremental_epochs", cfg.train.incremental_epochs},
                {"batch_size", cfg.train.batch_size},
                {"learning_rate", cfg.train.learning_rate},
                {"weight_decay", cfg.train.weight_decay},
                {"warmup_steps", cfg.train.warmup_steps},
                {"log_every", cfg.train.log_every},
                {"seed", cfg.train.seed},
                {"score_threshold", cfg.train.score_threshold},
                {"nms_iou", cfg.train.nms_iou}};
  j["inversion"] = {{"iterations", cfg.inversion.iterations},
                    {"step_size", cfg.inversion.step_size},
                    {"alpha_tv", cfg.inversion.alpha_tv},
                    {"alpha_l2", cfg.inversion.alpha_l2},
                    {"alpha_bn", cfg.inversion.alpha_bn},
                    {"batch", cfg.inversion.batch},
                    {"jitter", cfg.inversion.jitter},
                    {"per_class", cfg.inversion.per_class},
                    {"ratio_bins", cfg.inversion.ratio_bins},
                    {"w_min", cfg.inversion.w_min},
                    {"w_max", cfg.inversion.w_max},
                    {"verify_score", cfg.inversion.verify_score},
                    {"verify_iou", cfg.inversion.verify_iou}};
  j["replay"] = {{"beta_a", cfg.replay.beta_a},
                 {"beta_b", cfg.replay.beta_b},
                 {"thr", cfg.replay.thr},
                 {"replays_per_image", cfg.replay.replays_per_image},
                 {"max_attempts", cfg.replay.max_attempts},
                 {"scale_jitter_lo", cfg.replay.scale_jitter_lo},
                 {"scale_jitter_hi", cfg.replay.scale_jitter_hi},
                 {"only_verified", cfg.replay.only_verified}};
  j["distill"] = {{"top_k", cfg.distill.top_k},
                  {"roi_size", cfg.distill.roi_size},
                  {"w_feat", cfg.distill.w_feat},
                  {"w_logit", cfg.distill.w_logit},
                  {"kl_temperature", cfg.distill.kl_temperature},
                  {"hvd_on", cfg.distill.hvd_on},
                  {"full_w_feat", cfg.distill.full_w_feat},
                  {"full_w_logit", cfg.distill.full_w_logit}};
  j["toggles"] = {{"replay_on", cfg.toggles.replay_on},
                  {"feat_distill_on", cfg.toggles.feat_distill_on},
                  {"logit_distill_on", cfg.toggles.logit_distill_on},
                  {"pseudo_label_on", cfg.toggles.pseudo_label_on}};
  return j;
}

nlohmann::json detector_config_to_json(const DetectorConfig& cfg) {
  return {{"num_classes", cfg.num_classes},
          {"input_size", cfg.input_size},
          {"strides", cfg.strides},
          {"reg_bins", cfg.reg_bins},
          {"bin_width", cfg.bin_width},
          {"backbone_channels", cfg.backbone_channels},
          {"fpn_channels", cfg.fpn_channels},
          {"head_convs", cfg.head_convs},
          {"bn_momentum", cfg.bn_momentum}};
}

DetectorConfig detector_config_from_json(const nlohmann::json& j) {
  DetectorConfig cfg;
  StrictObject o(j, "detector");
  o.opt("num_classes", cfg.num_classes);
  o.opt("input_size", cfg.input_size);
  o.opt("strides", cfg.strides);
  o.opt("reg_bins", cfg.reg_bins);
  o.opt("bin_width", cfg.bin_width);
  o.opt("backbone_channels", cfg.backbone_channels);
  o.opt("fpn_channels", cfg.fpn_channels);
  o.opt("head_convs", cfg.head_convs);
  o.opt("bn_momentum", cfg.bn_momentum);
  o.finish();
  cfg.validate();
  return cfg;
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

std::string config_hash(const ExperimentConfig& cfg) {
  // nlohmann orders object keys, so the dump is canonical
  return sha256_hex(experiment_config_to_json(cfg).dump());
}

}  // namespace ior
