#include "ior/manifest.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace fs = std::filesystem;

namespace ior {

void write_file_atomic(const std::string& path, const std::string& text) {
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string());
    out << text;
    if (!out.flush()) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, target);
}

std::string detect_source_revision() {
  const char* rev = std::getenv("IOR_SOURCE_REV");
  return (rev != nullptr && *rev != '\0') ? rev : "unknown";
}

RunManifest load_manifest(const std::string& path) {
  RunManifest m;
  std::ifstream in(path);
  if (!in) return m;
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("manifest: unparseable " + path + ": " + e.what());
  }
  m.config_hash = j.value("config_hash", "");
  m.source_revision = j.value("source_revision", "");
  const auto stages = j.value("stages", nlohmann::json::object());
  for (const auto& [name, sj] : stages.items()) {
    StageRecord rec;
    rec.config_hash = sj.value("config_hash", "");
    rec.seed = sj.value("seed", uint64_t{0});
    rec.wall_seconds = sj.value("wall_seconds", 0.0);
    const auto artifacts = sj.value("artifacts", nlohmann::json::array());
    for (const auto& a : artifacts) rec.artifacts.push_back(a.get<std::string>());
    m.stages[name] = std::move(rec);
  }
  return m;
}

void save_manifest(const std::string& path, const RunManifest& manifest) {
  nlohmann::json stages = nlohmann::json::object();
  for (const auto& [name, rec] : manifest.stages)
    stages[name] = {{"config_hash", rec.config_hash},
                    {"seed", rec.seed},
                    {"wall_seconds", rec.wall_seconds},
                    {"artifacts", rec.artifacts}};
  const nlohmann::json j = {{"config_hash", manifest.config_hash},
                            {"source_revision", manifest.source_revision},
                            {"stages", stages}};
  write_file_atomic(path, j.dump(2) + "\n");
}

bool stage_current(const RunManifest& manifest, const std::string& stage,
                   const std::string& hash) {
  const auto it = manifest.stages.find(stage);
  return it != manifest.stages.end() && it->second.config_hash == hash;
}

void record_stage(RunManifest& manifest, const std::string& path, const std::string& stage,
                  StageRecord record) {
  manifest.stages[stage] = std::move(record);
  save_manifest(path, manifest);
}

}  // namespace ior
