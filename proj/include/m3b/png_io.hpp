#pragma once

#include <string>

#include "m3b/image.hpp"

namespace m3b {

// 8-bit grayscale, non-interlaced PNG. Reading rejects color or other bit
// depths; writing always uses filter type 0 scanlines.
GrayImage png_read(const std::string& path);
void png_write(const std::string& path, const GrayImage& img);

}  // namespace m3b
