#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "dacal/tensor.hpp"

namespace dacal {

using Rgb = std::array<double, 3>;

/// Appearance of one domain. Hue shift is a rotation about the grey axis in degrees;
/// `jitter` is the per-image, per-class colour perturbation amplitude.
struct DomainSpec {
  std::vector<Rgb> palette;
  double noise_sigma = 0.0;
  double hue_shift = 0.0;
  double brightness = 1.0;
  double blur_radius = 0.0;
  double jitter = 0.0;
};

void validate(const DomainSpec& spec, int classes);

enum class ShapeKind { Circle, Rectangle, Triangle, Stripe, Blob };
enum class Domain { Source, Target };

struct Shape {
  ShapeKind kind = ShapeKind::Circle;
  int label = 1;
  std::vector<double> params;  // kind-specific geometry in pixel units
};

/// Geometry plus the rasterized label map it induces.
struct Scene {
  int classes = 0;
  std::vector<Shape> shapes;  // painted in order; later shapes occlude earlier ones
  LabelMap labels;
};

enum class ScenePreset { Shapes, Blobs };

/// Background 0 plus one shape per foreground class; class k uses kind (k - 1) % 4. The Blobs preset
/// draws a single irregular foreground blob cluster and requires exactly two classes.
Scene generate_scene(int classes, int height, int width, Rng& rng, ScenePreset preset = ScenePreset::Shapes);

struct LabeledImage {
  Image image;
  LabelMap label;
  Domain domain = Domain::Source;
};

/// Palette fill, hue rotation, brightness, Gaussian blur, additive noise, clip to [0, 1].
LabeledImage render(const Scene& scene, const DomainSpec& spec, Domain domain, Rng& rng);

/// Only the oracle evaluation path may read withheld target labels.
class OracleAccess {
 public:
  explicit OracleAccess() = default;
};

struct LabeledSplit {
  std::vector<Image> images;
  std::vector<LabelMap> labels;
  std::size_t size() const noexcept { return images.size(); }
};

class UnlabeledSplit {
 public:
  UnlabeledSplit() = default;
  UnlabeledSplit(std::vector<Image> images, std::vector<LabelMap> withheld)
      : images(std::move(images)), withheld_(std::move(withheld)) {}

  std::vector<Image> images;
  std::size_t size() const noexcept { return images.size(); }
  const std::vector<LabelMap>& labels(OracleAccess) const { return withheld_; }

 private:
  std::vector<LabelMap> withheld_;
};

struct BenchmarkConfig {
  int classes = 4;
  int height = 64;
  int width = 64;
  int source_train = 200;
  int target_train = 200;
  int target_val = 100;
  std::uint64_t seed = 0;
  ScenePreset preset = ScenePreset::Shapes;
  DomainSpec source;
  DomainSpec target;
};

/// Default ShiftShapes domains for C classes (Shapes preset) or the two-class Blobs preset.
BenchmarkConfig default_benchmark_config(int classes = 4, ScenePreset preset = ScenePreset::Shapes);
void validate(const BenchmarkConfig& config);

struct Benchmark {
  BenchmarkConfig config;
  LabeledSplit source_train;
  UnlabeledSplit target_train;
  LabeledSplit target_val;
};

Benchmark make_benchmark(const BenchmarkConfig& config);

/// Hash over every stored image and label byte.
std::uint64_t fingerprint(const Benchmark& benchmark);

nlohmann::json to_json(const BenchmarkConfig& config);
BenchmarkConfig benchmark_config_from_json(const nlohmann::json& j);

/// manifest.json plus raw little-endian f64 images and u8 labels per split.
void save_benchmark(const Benchmark& benchmark, const std::filesystem::path& dir);
Benchmark load_benchmark(const std::filesystem::path& dir);

std::string to_string(ScenePreset preset);
ScenePreset parse_scene_preset(const std::string& text);

}  // namespace dacal
