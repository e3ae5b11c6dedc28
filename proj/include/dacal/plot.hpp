#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dacal/metrics.hpp"
#include "dacal/tensor.hpp"

namespace dacal {

/// 8-bit RGB raster.
class Canvas {
 public:
  Canvas(int width, int height, std::array<std::uint8_t, 3> background = {255, 255, 255});

  void fill_rect(int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> colour);
  void line(int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> colour, int thickness = 1);
  void save_png(const std::filesystem::path& path) const;

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  std::array<std::uint8_t, 3> pixel(int x, int y) const;

 private:
  int width_, height_;
  std::vector<std::uint8_t> rgb_;
};

/// Written files for one figure: vector, raster and the raw data that regenerates both.
struct FigureFiles {
  std::filesystem::path svg, png, csv;
};

/// Bar chart of per-bin accuracy with the perfect-calibration diagonal; writes <stem>.svg/.png/.csv.
FigureFiles plot_reliability(std::span<const ReliabilityRow> rows, const std::filesystem::path& stem,
                             const std::string& title);

struct TemperaturePanel {
  Image image;
  LabelMap prediction;
  TemperatureMap temperature;
};

/// One row per panel: input image, predicted classes, temperature heatmap (shared colour scale).
FigureFiles plot_temperature_maps(std::span<const TemperaturePanel> panels, int classes,
                                  const std::filesystem::path& stem);

/// Perceptually ordered colour for t in [0, 1].
std::array<std::uint8_t, 3> heat_colour(double t);
std::array<std::uint8_t, 3> class_colour(int label);

}  // namespace dacal
