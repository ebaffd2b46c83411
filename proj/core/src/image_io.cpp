// SPDX-License-Identifier: Apache-2.0
#include "dmavg/image_io.hpp"

#include <png.h>

#include <csetjmp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "dmavg/errors.hpp"

namespace dmavg {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void png_warn(png_structp, png_const_charp) {}

}  // namespace

std::uint8_t to_byte(double value) {
  const double scaled = std::round((std::clamp(value, -1.0, 1.0) + 1.0) * 127.5);
  return static_cast<std::uint8_t>(std::clamp(scaled, 0.0, 255.0));
}

double from_byte(std::uint8_t value) { return static_cast<double>(value) / 127.5 - 1.0; }

void write_png(const std::filesystem::path& path, std::span<const double> image, LatentShape shape) {
  if (image.size() != shape.size() || (shape.channels != 1 && shape.channels != 3)) {
    throw InvalidArgument("write_png: expects a 1- or 3-channel image matching its shape");
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr file(std::fopen(path.string().c_str(), "wb"));
  if (!file) throw IoError("cannot write " + path.string());

  const int w = shape.width;
  const int h = shape.height;
  const int c = shape.channels;
  std::vector<png_byte> rows(static_cast<std::size_t>(w * h * c));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        rows[static_cast<std::size_t>((y * w + x) * c + ch)] =
            to_byte(image[static_cast<std::size_t>((ch * h + y) * w + x)]);
      }
    }
  }
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_warn);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png encoding failed for " + path.string());
  }
  {
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_set_compression_level(png, 6);
    png_write_info(png, info);
    for (int y = 0; y < h; ++y) {
      png_write_row(png, rows.data() + static_cast<std::size_t>(y * w * c));
    }
    png_write_end(png, nullptr);
  }
  png_destroy_write_struct(&png, &info);
}

std::vector<double> read_png(const std::filesystem::path& path, LatentShape* shape_out) {
  FilePtr file(std::fopen(path.string().c_str(), "rb"));
  if (!file) throw IoError("cannot open " + path.string());
  std::vector<double> image;
  std::vector<png_byte> buf;
  int w = 0, h = 0, c = 0;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_warn);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("png decoding failed for " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_packing(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  png_read_update_info(png, info);
  w = static_cast<int>(png_get_image_width(png, info));
  h = static_cast<int>(png_get_image_height(png, info));
  c = static_cast<int>(png_get_channels(png, info));
  if (c == 1 || c == 3) {
    buf.resize(static_cast<std::size_t>(w * h * c));
    for (int y = 0; y < h; ++y) {
      png_read_row(png, buf.data() + static_cast<std::size_t>(y * w * c), nullptr);
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  if (c != 1 && c != 3) throw IoError("unsupported PNG channel count in " + path.string());
  {
    image.resize(buf.size());
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int ch = 0; ch < c; ++ch) {
          image[static_cast<std::size_t>((ch * h + y) * w + x)] =
              from_byte(buf[static_cast<std::size_t>((y * w + x) * c + ch)]);
        }
      }
    }
    if (shape_out) *shape_out = {c, h, w};
  }
  return image;
}

}  // namespace dmavg
