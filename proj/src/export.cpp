#include "psx/export.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

#include "psx/error.hpp"

namespace psx {

Rgb diverging_color(double v) {
  if (std::isnan(v)) v = 0.0;
  v = std::clamp(v, -1.0, 1.0);
  const auto level = [](double t) { return static_cast<std::uint8_t>(std::lround(255.0 * t)); };
  if (v >= 0.0) return {255, level(1.0 - v), level(1.0 - v)};
  return {level(1.0 + v), level(1.0 + v), 255};
}

std::string grid_to_csv(std::span<const double> values, std::size_t height, std::size_t width) {
  if (values.size() != height * width) fail(ErrorCode::shape_mismatch, "grid size does not match extents");
  std::ostringstream out;
  out.precision(9);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      if (c) out << ',';
      out << values[r * width + c];
    }
    out << '\n';
  }
  return out.str();
}

void write_map_csv(const AttributionMap& map, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::io, "cannot open " + path.string() + " for writing");
  out << grid_to_csv(map.values, map.height, map.width);
  if (!out) fail(ErrorCode::io, "failed writing " + path.string());
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

// libpng reports errors via longjmp; the message is stashed for rethrowing.
struct PngErrorState {
  char message[256] = "libpng error";
};

void png_error_handler(png_structp png, png_const_charp message) {
  auto* state = static_cast<PngErrorState*>(png_get_error_ptr(png));
  std::snprintf(state->message, sizeof state->message, "%s", message);
  png_longjmp(png, 1);
}
void png_warning_handler(png_structp, png_const_charp) {}

}  // namespace

void write_rgb_png(const std::filesystem::path& path, std::size_t height, std::size_t width,
                   std::span<const std::uint8_t> rgb) {
  if (rgb.size() != height * width * 3) fail(ErrorCode::shape_mismatch, "RGB buffer does not match extents");
  if (height == 0 || width == 0) fail(ErrorCode::invalid_argument, "cannot write an empty PNG");
  File file(std::fopen(path.c_str(), "wb"));
  if (!file) fail(ErrorCode::io, "cannot open " + path.string() + " for writing");
  PngErrorState state;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &state, png_error_handler, png_warning_handler);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    fail(ErrorCode::io, "libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(ErrorCode::io, std::string("PNG write failed: ") + state.message);
  }
  {
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t r = 0; r < height; ++r) {
      png_write_row(png, const_cast<png_bytep>(rgb.data() + r * width * 3));
    }
    png_write_end(png, nullptr);
  }
  png_destroy_write_struct(&png, &info);
}

RgbImage read_rgb_png(const std::filesystem::path& path) {
  File file(std::fopen(path.c_str(), "rb"));
  if (!file) fail(ErrorCode::io, "cannot open " + path.string());
  PngErrorState state;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &state, png_error_handler, png_warning_handler);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    fail(ErrorCode::io, "libpng initialisation failed");
  }
  RgbImage image;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorCode::format, std::string("PNG read failed: ") + state.message);
  }
  {
    png_init_io(png, file.get());
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    image.height = png_get_image_height(png, info);
    image.width = png_get_image_width(png, info);
    image.rgb.resize(image.height * image.width * 3);
    for (std::size_t r = 0; r < image.height; ++r) png_read_row(png, image.rgb.data() + r * image.width * 3, nullptr);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return image;
}

void write_heatmap_png(const AttributionMap& map, const std::filesystem::path& path, std::size_t scale) {
  if (scale == 0) fail(ErrorCode::invalid_argument, "heatmap scale must be >= 1");
  const auto display = normalize_for_display(map.values);
  const std::size_t h = map.height * scale, w = map.width * scale;
  std::vector<std::uint8_t> rgb(h * w * 3);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const auto color = diverging_color(display.scaled[(r / scale) * map.width + c / scale]);
      std::copy(color.begin(), color.end(), rgb.begin() + static_cast<std::ptrdiff_t>((r * w + c) * 3));
    }
  }
  write_rgb_png(path, h, w, rgb);
}

}  // namespace psx
