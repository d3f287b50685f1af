#include "fsfnet/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

#include "fsfnet/tensor.hpp"

namespace fsfnet {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_or_fail(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) fail("cannot open " + path);
  return f;
}

struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;

  PngReader() {
    png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr,
                                 nullptr);
    if (png) info = png_create_info_struct(png);
    if (!png || !info) fail("libpng allocation failed");
  }
  ~PngReader() { png_destroy_read_struct(&png, &info, nullptr); }
};

struct PngWriter {
  png_structp png = nullptr;
  png_infop info = nullptr;

  PngWriter() {
    png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr,
                                  nullptr);
    if (png) info = png_create_info_struct(png);
    if (!png || !info) fail("libpng allocation failed");
  }
  ~PngWriter() { png_destroy_write_struct(&png, &info); }
};

bool host_is_little_endian() {
  const std::uint16_t probe = 1;
  return *reinterpret_cast<const std::uint8_t*>(&probe) == 1;
}

}  // namespace

ImageU8 make_image_u8(int h, int w, int channels) {
  if (h < 1 || w < 1 || (channels != 1 && channels != 3)) {
    fail("ImageU8: bad extents " + std::to_string(h) + "x" + std::to_string(w) +
         "x" + std::to_string(channels));
  }
  ImageU8 img;
  img.h = h;
  img.w = w;
  img.channels = channels;
  img.pix.assign(static_cast<std::size_t>(h) * w * channels, 0);
  return img;
}

ImageU16 make_image_u16(int h, int w) {
  if (h < 1 || w < 1) fail("ImageU16: bad extents");
  ImageU16 img;
  img.h = h;
  img.w = w;
  img.pix.assign(static_cast<std::size_t>(h) * w, 0);
  return img;
}

ImageU8 read_png_u8(const std::string& path, int want_channels) {
  if (want_channels != 1 && want_channels != 3) {
    fail("read_png_u8: channel count must be 1 or 3");
  }
  auto file = open_or_fail(path, "rb");
  PngReader r;
  if (setjmp(png_jmpbuf(r.png))) fail("failed to decode PNG " + path);
  png_init_io(r.png, file.get());
  png_read_info(r.png, r.info);

  png_set_strip_16(r.png);
  png_set_strip_alpha(r.png);
  png_set_packing(r.png);
  png_set_expand(r.png);
  const png_byte color = png_get_color_type(r.png, r.info);
  if (want_channels == 3 &&
      (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)) {
    png_set_gray_to_rgb(r.png);
  }
  if (want_channels == 1 &&
      (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
       color == PNG_COLOR_TYPE_PALETTE)) {
    png_set_rgb_to_gray_fixed(r.png, 1, -1, -1);
  }
  png_read_update_info(r.png, r.info);

  auto img = make_image_u8(static_cast<int>(png_get_image_height(r.png, r.info)),
                           static_cast<int>(png_get_image_width(r.png, r.info)),
                           want_channels);
  if (static_cast<int>(png_get_channels(r.png, r.info)) != want_channels) {
    fail("read_png_u8: could not coerce " + path + " to " +
         std::to_string(want_channels) + " channels");
  }
  std::vector<png_bytep> rows(img.h);
  for (int y = 0; y < img.h; ++y) {
    rows[y] = img.pix.data() + static_cast<std::size_t>(y) * img.w * want_channels;
  }
  png_read_image(r.png, rows.data());
  png_read_end(r.png, nullptr);
  return img;
}

ImageU16 read_png_gray16(const std::string& path) {
  auto file = open_or_fail(path, "rb");
  PngReader r;
  if (setjmp(png_jmpbuf(r.png))) fail("failed to decode PNG " + path);
  png_init_io(r.png, file.get());
  png_read_info(r.png, r.info);
  if (png_get_color_type(r.png, r.info) != PNG_COLOR_TYPE_GRAY ||
      png_get_bit_depth(r.png, r.info) != 16) {
    fail(path + " is not a 16-bit grayscale PNG");
  }
  if (host_is_little_endian()) png_set_swap(r.png);
  png_read_update_info(r.png, r.info);

  auto img = make_image_u16(static_cast<int>(png_get_image_height(r.png, r.info)),
                            static_cast<int>(png_get_image_width(r.png, r.info)));
  std::vector<png_bytep> rows(img.h);
  for (int y = 0; y < img.h; ++y) {
    rows[y] = reinterpret_cast<png_bytep>(img.pix.data() +
                                          static_cast<std::size_t>(y) * img.w);
  }
  png_read_image(r.png, rows.data());
  png_read_end(r.png, nullptr);
  return img;
}

void write_png_u8(const std::string& path, const ImageU8& img) {
  if (img.channels != 1 && img.channels != 3) {
    fail("write_png_u8: channel count must be 1 or 3");
  }
  auto file = open_or_fail(path, "wb");
  PngWriter w;
  if (setjmp(png_jmpbuf(w.png))) fail("failed to encode PNG " + path);
  png_init_io(w.png, file.get());
  png_set_IHDR(w.png, w.info, img.w, img.h, 8,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(w.png, w.info);
  std::vector<png_bytep> rows(img.h);
  for (int y = 0; y < img.h; ++y) {
    rows[y] = const_cast<png_bytep>(
        img.pix.data() + static_cast<std::size_t>(y) * img.w * img.channels);
  }
  png_write_image(w.png, rows.data());
  png_write_end(w.png, nullptr);
}

void write_png_gray16(const std::string& path, const ImageU16& img) {
  auto file = open_or_fail(path, "wb");
  PngWriter w;
  if (setjmp(png_jmpbuf(w.png))) fail("failed to encode PNG " + path);
  png_init_io(w.png, file.get());
  png_set_IHDR(w.png, w.info, img.w, img.h, 16, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(w.png, w.info);
  if (host_is_little_endian()) png_set_swap(w.png);
  std::vector<png_bytep> rows(img.h);
  for (int y = 0; y < img.h; ++y) {
    rows[y] = reinterpret_cast<png_bytep>(const_cast<std::uint16_t*>(
        img.pix.data() + static_cast<std::size_t>(y) * img.w));
  }
  png_write_image(w.png, rows.data());
  png_write_end(w.png, nullptr);
}

}  // namespace fsfnet
