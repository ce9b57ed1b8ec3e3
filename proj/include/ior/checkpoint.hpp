#pragma once

#include <string>

#include "ior/detector.hpp"

namespace ior {

// single-file container: magic line, JSON manifest (config, class registry,
// tensor table), then raw little-endian tensor blobs
inline constexpr const char* kCheckpointMagic = "ior-ckpt-v1";

void save_checkpoint(const DetectorState& state, const std::string& path);

// rebuilds the model from the stored config and copies every tensor by name;
// returns it frozen in eval mode
DetectorState load_checkpoint(const std::string& path);

}  // namespace ior
