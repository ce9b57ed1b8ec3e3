#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "ior/image_io.hpp"
#include "ior/inversion.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace ior {

namespace {

void dump_json_atomic(const std::string& path, const nlohmann::json& j) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << j.dump(2) << "\n";
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("cannot move " + tmp + " into place");
}

nlohmann::json parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return nlohmann::json::parse(in);
}

std::string entry_stem(int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "obj_%06lld", static_cast<long long>(index));
  return buf;
}

}  // namespace

void save_ratio_histograms(const std::string& path, const AspectRatioHistogram& hist) {
  nlohmann::json j;
  j["ratio_min"] = hist.ratio_min;
  j["ratio_max"] = hist.ratio_max;
  j["bins"] = hist.bins;
  auto& counts = j["counts"] = nlohmann::json::object();
  for (const auto& [cls, c] : hist.counts) counts[std::to_string(cls)] = c;
  dump_json_atomic(path, j);
}

AspectRatioHistogram load_ratio_histograms(const std::string& path) {
  auto j = parse_file(path);
  AspectRatioHistogram hist;
  hist.ratio_min = j.at("ratio_min").get<double>();
  hist.ratio_max = j.at("ratio_max").get<double>();
  hist.bins = j.at("bins").get<int64_t>();
  for (const auto& [key, value] : j.at("counts").items()) {
    auto c = value.get<std::vector<int64_t>>();
    if (static_cast<int64_t>(c.size()) != hist.bins)
      throw std::runtime_error("histogram file " + path + ": class " + key +
                               " has the wrong bin count");
    hist.counts[std::stoll(key)] = std::move(c);
  }
  return hist;
}

void save_bank(const std::string& dir, const std::vector<GeneratedSample>& samples,
               const std::string& config_hash) {
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["config_hash"] = config_hash;
  manifest["count"] = samples.size();
  auto& entries = manifest["entries"] = nlohmann::json::array();
  std::map<int64_t, int64_t> per_class;
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const std::string stem = entry_stem(static_cast<int64_t>(i));
    save_png16((fs::path(dir) / (stem + ".png")).string(), s.image);

    nlohmann::json rec;
    rec["cls"] = s.label.cls;
    rec["box"] = {s.label.box.x, s.label.box.y, s.label.box.w, s.label.box.h};
    rec["teacher_score"] = s.teacher_score;
    rec["verified"] = s.verified;
    rec["seed"] = s.seed;
    rec["config_hash"] = config_hash;
    dump_json_atomic((fs::path(dir) / (stem + ".json")).string(), rec);

    entries.push_back(stem);
    ++per_class[s.label.cls];
  }
  auto& by_class = manifest["per_class"] = nlohmann::json::object();
  for (const auto& [cls, n] : per_class) by_class[std::to_string(cls)] = n;
  dump_json_atomic((fs::path(dir) / "bank_manifest.json").string(), manifest);
}

std::vector<GeneratedSample> load_bank(const std::string& dir) {
  auto manifest = parse_file((fs::path(dir) / "bank_manifest.json").string());
  std::vector<GeneratedSample> samples;
  for (const auto& stem_j : manifest.at("entries")) {
    const std::string stem = stem_j.get<std::string>();
    auto rec = parse_file((fs::path(dir) / (stem + ".json")).string());
    GeneratedSample s;
    s.image = load_png16((fs::path(dir) / (stem + ".png")).string());
    s.label.cls = rec.at("cls").get<int64_t>();
    auto box = rec.at("box").get<std::vector<double>>();
    if (box.size() != 4) throw std::runtime_error("bank entry " + stem + ": malformed box");
    s.label.box = {box[0], box[1], box[2], box[3]};
    s.teacher_score = rec.at("teacher_score").get<double>();
    s.verified = rec.at("verified").get<bool>();
    s.seed = rec.at("seed").get<uint64_t>();
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace ior
