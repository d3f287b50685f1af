#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fsfnet {

/// Interleaved 8-bit image, 1 (gray) or 3 (RGB) channels.
struct ImageU8 {
  int h = 0;
  int w = 0;
  int channels = 0;
  std::vector<std::uint8_t> pix;

  std::uint8_t& at(int y, int x, int c) {
    return pix[(static_cast<std::size_t>(y) * w + x) * channels + c];
  }
  std::uint8_t at(int y, int x, int c) const {
    return pix[(static_cast<std::size_t>(y) * w + x) * channels + c];
  }
};

/// Single-channel 16-bit image; used for depth in millimeters (0 = missing).
struct ImageU16 {
  int h = 0;
  int w = 0;
  std::vector<std::uint16_t> pix;

  std::uint16_t& at(int y, int x) {
    return pix[static_cast<std::size_t>(y) * w + x];
  }
  std::uint16_t at(int y, int x) const {
    return pix[static_cast<std::size_t>(y) * w + x];
  }
};

ImageU8 make_image_u8(int h, int w, int channels);
ImageU16 make_image_u16(int h, int w);

/// Reads any PNG, coercing to 8-bit with the requested channel count (1 or 3).
ImageU8 read_png_u8(const std::string& path, int want_channels);

/// Reads a PNG that must be 16-bit grayscale; anything else is an error.
ImageU16 read_png_gray16(const std::string& path);

void write_png_u8(const std::string& path, const ImageU8& img);
void write_png_gray16(const std::string& path, const ImageU16& img);

}  // namespace fsfnet
