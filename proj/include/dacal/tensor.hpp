#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace dacal {

using Rng = std::mt19937_64;

inline constexpr std::uint8_t kIgnoreLabel = 255;

/// Dense N x C x H x W array of doubles; the layout every network layer consumes.
struct Tensor {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int n, int c, int h, int w, double fill = 0.0);

  std::size_t size() const noexcept { return data.size(); }
  int plane() const noexcept { return h * w; }
  bool same_shape(const Tensor& other) const noexcept {
    return n == other.n && c == other.c && h == other.h && w == other.w;
  }

  double* sample(int i) noexcept { return data.data() + static_cast<std::size_t>(i) * c * h * w; }
  const double* sample(int i) const noexcept {
    return data.data() + static_cast<std::size_t>(i) * c * h * w;
  }
  double* channel(int i, int ch) noexcept { return sample(i) + static_cast<std::size_t>(ch) * h * w; }
  const double* channel(int i, int ch) const noexcept {
    return sample(i) + static_cast<std::size_t>(ch) * h * w;
  }
  double& at(int i, int ch, int y, int x) noexcept { return channel(i, ch)[y * w + x]; }
  double at(int i, int ch, int y, int x) const noexcept { return channel(i, ch)[y * w + x]; }
};

/// RGB image, channel-major 3 x H x W, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> values;

  Image() = default;
  Image(int height, int width, double fill = 0.0);

  static constexpr int kChannels = 3;
  int pixels() const noexcept { return height * width; }
  double& at(int ch, int y, int x) noexcept { return values[(ch * height + y) * width + x]; }
  double at(int ch, int y, int x) const noexcept { return values[(ch * height + y) * width + x]; }
};

/// Per-pixel class ids; kIgnoreLabel marks pixels excluded from every loss and metric.
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;

  LabelMap() = default;
  LabelMap(int height, int width, std::uint8_t fill = 0);

  int pixels() const noexcept { return height * width; }
  std::uint8_t& at(int y, int x) noexcept { return values[y * width + x]; }
  std::uint8_t at(int y, int x) const noexcept { return values[y * width + x]; }
};

/// Per-pixel class scores for one image, class-major C x H x W.
struct ClassMap {
  int classes = 0;
  int height = 0;
  int width = 0;
  std::vector<double> values;

  ClassMap() = default;
  ClassMap(int classes, int height, int width, double fill = 0.0);

  int pixels() const noexcept { return height * width; }
  double& at(int c, int pixel) noexcept { return values[static_cast<std::size_t>(c) * height * width + pixel]; }
  double at(int c, int pixel) const noexcept {
    return values[static_cast<std::size_t>(c) * height * width + pixel];
  }
};

/// Unnormalized network scores.
struct LogitsMap : ClassMap {
  using ClassMap::ClassMap;
};

/// Each pixel's class vector is a probability distribution.
struct ProbMap : ClassMap {
  using ClassMap::ClassMap;
};

/// Per-pixel positive temperature.
struct TemperatureMap {
  int height = 0;
  int width = 0;
  std::vector<double> values;

  TemperatureMap() = default;
  TemperatureMap(int height, int width, double fill = 1.0);

  int pixels() const noexcept { return height * width; }
};

Tensor stack_images(std::span<const Image> images);
Tensor stack_logits(std::span<const LogitsMap> logits);
Image image_at(const Tensor& batch, int index);
LogitsMap logits_at(const Tensor& batch, int index);
TemperatureMap temperatures_at(const Tensor& batch, int index);
Tensor concat_batch(const Tensor& a, const Tensor& b);

/// Lowest class index wins ties.
int argmax_at(const ClassMap& map, int pixel);
LabelMap argmax_labels(const ClassMap& map);

}  // namespace dacal
