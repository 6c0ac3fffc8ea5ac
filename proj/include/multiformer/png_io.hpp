#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace multiformer::png {

struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;   // 1 (gray) or 3 (RGB)
  int bit_depth = 0;  // 8 or 16
  std::vector<uint16_t> samples;  // row-major, interleaved channels
};

/// Throws LoadError naming `path` on any I/O or decode failure.
Image read(const std::string& path);
void write_rgb8(const std::string& path, int width, int height, const std::vector<uint8_t>& rgb);
void write_gray16(const std::string& path, int width, int height,
                  const std::vector<uint16_t>& values);

}  // namespace multiformer::png
