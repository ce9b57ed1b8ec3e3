#pragma once

#include <string>

#include "ior/detector.hpp"

namespace ior {

// dataset images: 8-bit RGB PNG
void save_png8(const std::string& path, const ImagePlane& image);
ImagePlane load_png8(const std::string& path);

// bank images: 16-bit RGB PNG, resolution 1/65535
void save_png16(const std::string& path, const ImagePlane& image);
ImagePlane load_png16(const std::string& path);

}  // namespace ior
