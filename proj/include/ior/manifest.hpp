#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace ior {

struct StageRecord {
  std::string config_hash;
  uint64_t seed = 0;
  double wall_seconds = 0.0;
  std::vector<std::string> artifacts;  // paths relative to the workdir
};

struct RunManifest {
  std::string config_hash;      // effective experiment config at last write
  std::string source_revision;  // IOR_SOURCE_REV when set
  std::map<std::string, StageRecord> stages;
};

std::string detect_source_revision();

// tmp + rename into place, parent directories created on demand
void write_file_atomic(const std::string& path, const std::string& text);

// missing file -> empty manifest
RunManifest load_manifest(const std::string& path);

// tmp + rename; partial files never become visible
void save_manifest(const std::string& path, const RunManifest& manifest);

// a stage is current when its recorded hash matches; such stages are no-ops
bool stage_current(const RunManifest& manifest, const std::string& stage,
                   const std::string& hash);

// upserts the record and persists immediately
void record_stage(RunManifest& manifest, const std::string& path, const std::string& stage,
                  StageRecord record);

}  // namespace ior
