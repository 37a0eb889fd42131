#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

#include "psx/protoshot.hpp"

namespace psx {

using Rgb = std::array<std::uint8_t, 3>;

/// Red/white/blue diverging palette for v in [-1, 1]: 0 is white, +1 pure
/// red, -1 pure blue. Inputs outside the range are clamped.
Rgb diverging_color(double v);

/// Row-major grid with one line per row and comma-separated values.
std::string grid_to_csv(std::span<const double> values, std::size_t height, std::size_t width);
void write_map_csv(const AttributionMap& map, const std::filesystem::path& path);

/// Heatmap over [-color_bound, +color_bound], `scale` pixels per cell.
void write_heatmap_png(const AttributionMap& map, const std::filesystem::path& path, std::size_t scale = 1);
void write_rgb_png(const std::filesystem::path& path, std::size_t height, std::size_t width,
                   std::span<const std::uint8_t> rgb);

struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> rgb;
};
RgbImage read_rgb_png(const std::filesystem::path& path);

}  // namespace psx
