#pragma once

#include <cstdint>
#include <vector>

namespace vitscope::backbone {

/// Square 8-bit RGB raster, row-major, 3 bytes per pixel.
struct Image {
  int size = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  explicit Image(int s) : size(s), rgb(static_cast<std::size_t>(s) * s * 3, 0) {}

  std::uint8_t* pixel(int x, int y) { return rgb.data() + (static_cast<std::size_t>(y) * size + x) * 3; }
  const std::uint8_t* pixel(int x, int y) const {
    return rgb.data() + (static_cast<std::size_t>(y) * size + x) * 3;
  }

  friend bool operator==(const Image&, const Image&) = default;
};

}  // namespace vitscope::backbone
