#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "partformer/tensor.hpp"

namespace pf {

// 8-bit RGB image, interleaved row-major (r, g, b per pixel).
struct ImageU8 {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> rgb;

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t ch) {
    return rgb[(y * width + x) * 3 + ch];
  }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t ch) const {
    return rgb[(y * width + x) * 3 + ch];
  }
};

ImageU8 png_read(const std::string& path);              // throws DataError
void png_write(const std::string& path, const ImageU8& img);

// Channel-major floats, (v/255 - 0.5) / 0.5 per channel.
std::vector<Scalar> normalize_image(const ImageU8& img);

}  // namespace pf
