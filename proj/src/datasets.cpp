#include "dacal/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dacal/errors.hpp"
#include "dacal/io.hpp"

namespace dacal {

namespace {

constexpr double kPi = std::numbers::pi;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

struct Point {
  double x, y;
};

// Sign of the cross product (b - a) x (p - a).
double edge(Point a, Point b, Point p) { return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x); }

bool inside(const Shape& s, double x, double y) {
  const auto& q = s.params;
  switch (s.kind) {
    case ShapeKind::Circle:
      return (x - q[0]) * (x - q[0]) + (y - q[1]) * (y - q[1]) <= q[2] * q[2];
    case ShapeKind::Rectangle: {
      // centre, half extents, rotation
      const double c = std::cos(q[4]), sn = std::sin(q[4]);
      const double dx = x - q[0], dy = y - q[1];
      return std::abs(c * dx + sn * dy) <= q[2] && std::abs(-sn * dx + c * dy) <= q[3];
    }
    case ShapeKind::Triangle: {
      const Point a{q[0], q[1]}, b{q[2], q[3]}, c{q[4], q[5]}, p{x, y};
      const double d1 = edge(a, b, p), d2 = edge(b, c, p), d3 = edge(c, a, p);
      const bool neg = d1 < 0 || d2 < 0 || d3 < 0;
      const bool pos = d1 > 0 || d2 > 0 || d3 > 0;
      return !(neg && pos);
    }
    case ShapeKind::Stripe: {
      // point on the centre line, direction angle, half thickness
      const double nx = -std::sin(q[2]), ny = std::cos(q[2]);
      return std::abs((x - q[0]) * nx + (y - q[1]) * ny) <= q[3];
    }
    case ShapeKind::Blob:
      for (std::size_t k = 0; k + 2 < q.size(); k += 3)
        if ((x - q[k]) * (x - q[k]) + (y - q[k + 1]) * (y - q[k + 1]) <= q[k + 2] * q[k + 2]) return true;
      return false;
  }
  return false;
}

Shape random_shape(ShapeKind kind, int label, int height, int width, Rng& rng) {
  const double size = std::min(height, width);
  Shape s{kind, label, {}};
  switch (kind) {
    case ShapeKind::Circle: {
      const double r = uniform(rng, 0.12, 0.22) * size;
      s.params = {uniform(rng, r, width - r), uniform(rng, r, height - r), r};
      break;
    }
    case ShapeKind::Rectangle: {
      const double hw = uniform(rng, 0.10, 0.22) * size, hh = uniform(rng, 0.10, 0.22) * size;
      const double m = std::max(hw, hh);
      s.params = {uniform(rng, m, width - m), uniform(rng, m, height - m), hw, hh, uniform(rng, 0.0, kPi / 2)};
      break;
    }
    case ShapeKind::Triangle: {
      const double r = uniform(rng, 0.16, 0.28) * size;
      const double cx = uniform(rng, r, width - r), cy = uniform(rng, r, height - r);
      const double rot = uniform(rng, 0.0, 2 * kPi);
      for (int k = 0; k < 3; ++k) {
        const double a = rot + k * 2 * kPi / 3 + uniform(rng, -0.25, 0.25);
        s.params.push_back(cx + r * std::cos(a));
        s.params.push_back(cy + r * std::sin(a));
      }
      break;
    }
    case ShapeKind::Stripe:
      s.params = {uniform(rng, 0.2, 0.8) * width, uniform(rng, 0.2, 0.8) * height, uniform(rng, 0.0, kPi),
                  uniform(rng, 0.04, 0.08) * size};
      break;
    case ShapeKind::Blob: {
      const double cx = uniform(rng, 0.3, 0.7) * width, cy = uniform(rng, 0.3, 0.7) * height;
      const int lobes = std::uniform_int_distribution<int>(3, 6)(rng);
      for (int k = 0; k < lobes; ++k) {
        const double r = uniform(rng, 0.08, 0.18) * size;
        const double a = uniform(rng, 0.0, 2 * kPi), d = uniform(rng, 0.0, 0.15) * size;
        s.params.insert(s.params.end(), {cx + d * std::cos(a), cy + d * std::sin(a), r});
      }
      break;
    }
  }
  return s;
}

// Rotation about the grey axis (1, 1, 1) by `degrees`.
std::array<double, 9> hue_matrix(double degrees) {
  const double a = degrees * kPi / 180.0, c = std::cos(a), s = std::sin(a);
  const double k = (1.0 - c) / 3.0, r = std::sqrt(1.0 / 3.0) * s;
  return {c + k, k - r, k + r, k + r, c + k, k - r, k - r, k + r, c + k};
}

void gaussian_blur(Image& img, double sigma) {
  if (sigma <= 0.0) return;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) total += kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& k : kernel) k /= total;
  const int h = img.height, w = img.width;
  std::vector<double> tmp(static_cast<std::size_t>(h) * w);
  for (int ch = 0; ch < Image::kChannels; ++ch) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * img.at(ch, y, std::clamp(x + i, 0, w - 1));
        tmp[y * w + x] = acc;
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * tmp[std::clamp(y + i, 0, h - 1) * w + x];
        img.at(ch, y, x) = acc;
      }
  }
}

Rgb hsv(double hue, double sat, double val) {
  const double h6 = std::fmod(hue, 1.0) * 6.0;
  const double f = h6 - std::floor(h6);
  const double p = val * (1 - sat), q = val * (1 - sat * f), t = val * (1 - sat * (1 - f));
  switch (static_cast<int>(h6) % 6) {
    case 0: return {val, t, p};
    case 1: return {q, val, p};
    case 2: return {p, val, t};
    case 3: return {p, q, val};
    case 4: return {t, p, val};
    default: return {val, p, q};
  }
}

LabeledSplit make_labeled(const BenchmarkConfig& config, const DomainSpec& spec, Domain domain, std::uint64_t stream,
                          int count) {
  LabeledSplit split;
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(config.seed, stream, static_cast<std::uint64_t>(i)));
    const Scene scene = generate_scene(config.classes, config.height, config.width, rng, config.preset);
    LabeledImage li = render(scene, spec, domain, rng);
    split.images.push_back(std::move(li.image));
    split.labels.push_back(std::move(li.label));
  }
  return split;
}

nlohmann::json spec_to_json(const DomainSpec& s) {
  return {{"palette", s.palette},         {"noise_sigma", s.noise_sigma}, {"hue_shift", s.hue_shift},
          {"brightness", s.brightness},   {"blur_radius", s.blur_radius}, {"jitter", s.jitter}};
}

DomainSpec spec_from_json(const nlohmann::json& j, const DomainSpec& fallback) {
  DomainSpec s = fallback;
  if (j.contains("palette")) s.palette = j.at("palette").get<std::vector<Rgb>>();
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.hue_shift = j.value("hue_shift", s.hue_shift);
  s.brightness = j.value("brightness", s.brightness);
  s.blur_radius = j.value("blur_radius", s.blur_radius);
  s.jitter = j.value("jitter", s.jitter);
  return s;
}

const char* const kSplitNames[] = {"source_train", "target_train", "target_val"};

}  // namespace

void validate(const DomainSpec& spec, int classes) {
  if (static_cast<int>(spec.palette.size()) < classes) throw ConfigError("domain palette has fewer colours than classes");
  if (!(spec.noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
  if (!(spec.brightness > 0.0)) throw ConfigError("brightness must be > 0");
  if (!(spec.blur_radius >= 0.0)) throw ConfigError("blur_radius must be >= 0");
  if (!(spec.jitter >= 0.0)) throw ConfigError("jitter must be >= 0");
}

Scene generate_scene(int classes, int height, int width, Rng& rng, ScenePreset preset) {
  if (classes < 2 || classes > 254) throw DomainError("generate_scene: need 2 <= C <= 254");
  if (height < 16 || width < 16) throw DomainError("generate_scene: image must be at least 16x16");
  Scene scene{classes, {}, LabelMap(height, width, 0)};
  if (preset == ScenePreset::Blobs) {
    if (classes != 2) throw DomainError("generate_scene: the blob preset has exactly two classes");
    scene.shapes.push_back(random_shape(ShapeKind::Blob, 1, height, width, rng));
  } else {
    for (int label = 1; label < classes; ++label)
      scene.shapes.push_back(random_shape(static_cast<ShapeKind>((label - 1) % 4), label, height, width, rng));
    std::shuffle(scene.shapes.begin(), scene.shapes.end(), rng);
  }
  for (const auto& s : scene.shapes)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        if (inside(s, x + 0.5, y + 0.5)) scene.labels.at(y, x) = static_cast<std::uint8_t>(s.label);
  return scene;
}

LabeledImage render(const Scene& scene, const DomainSpec& spec, Domain domain, Rng& rng) {
  validate(spec, scene.classes);
  const int h = scene.labels.height, w = scene.labels.width;
  std::vector<Rgb> colours(spec.palette.begin(), spec.palette.begin() + scene.classes);
  if (spec.jitter > 0.0)
    for (auto& c : colours)
      for (auto& v : c) v += uniform(rng, -spec.jitter, spec.jitter);
  const auto m = hue_matrix(spec.hue_shift);
  for (auto& c : colours) {
    const Rgb r = c;
    for (int i = 0; i < 3; ++i) c[i] = spec.brightness * (m[3 * i] * r[0] + m[3 * i + 1] * r[1] + m[3 * i + 2] * r[2]);
  }
  LabeledImage out{Image(h, w), scene.labels, domain};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch) out.image.at(ch, y, x) = colours[scene.labels.at(y, x)][ch];
  gaussian_blur(out.image, spec.blur_radius);
  if (spec.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    for (auto& v : out.image.values) v += noise(rng);
  }
  for (auto& v : out.image.values) v = std::clamp(v, 0.0, 1.0);
  return out;
}

BenchmarkConfig default_benchmark_config(int classes, ScenePreset preset) {
  BenchmarkConfig c;
  c.classes = classes;
  c.preset = preset;
  if (preset == ScenePreset::Blobs) {
    c.source.palette = {{0.30, 0.22, 0.35}, {0.80, 0.55, 0.70}};
    c.source.noise_sigma = 0.05;
    c.source.jitter = 0.06;
    c.target = c.source;
    c.target.hue_shift = 50.0;
    c.target.brightness = 0.75;
    c.target.noise_sigma = 0.14;
    c.target.blur_radius = 1.2;
    return c;
  }
  std::vector<Rgb> palette = {{0.25, 0.25, 0.30}, {0.90, 0.35, 0.30}, {0.35, 0.80, 0.40}, {0.35, 0.45, 0.90}};
  for (int k = static_cast<int>(palette.size()); k < classes; ++k) palette.push_back(hsv(k * 0.618034, 0.6, 0.85));
  palette.resize(std::max<std::size_t>(classes, 2));
  c.source.palette = palette;
  c.source.noise_sigma = 0.04;
  c.source.jitter = 0.08;
  c.target = c.source;
  c.target.brightness = 0.8;
  c.target.noise_sigma = 0.15;
  c.target.blur_radius = 1.0;
  return c;
}

void validate(const BenchmarkConfig& config) {
  if (config.classes < 2) throw ConfigError("dataset needs at least 2 classes");
  if (config.classes > 254) throw ConfigError("dataset supports at most 254 classes");
  if (config.height < 16 || config.width < 16) throw ConfigError("dataset images must be at least 16x16");
  if (config.height % 2 != 0 || config.width % 2 != 0) throw ConfigError("dataset image sides must be even");
  if (config.source_train < 1 || config.target_train < 1 || config.target_val < 1)
    throw ConfigError("dataset split sizes must be >= 1");
  if (config.preset == ScenePreset::Blobs && config.classes != 2)
    throw ConfigError("the blob preset has exactly two classes");
  validate(config.source, config.classes);
  validate(config.target, config.classes);
}

Benchmark make_benchmark(const BenchmarkConfig& config) {
  validate(config);
  Benchmark b;
  b.config = config;
  b.source_train = make_labeled(config, config.source, Domain::Source, 1, config.source_train);
  LabeledSplit target_train = make_labeled(config, config.target, Domain::Target, 2, config.target_train);
  b.target_train = UnlabeledSplit(std::move(target_train.images), std::move(target_train.labels));
  b.target_val = make_labeled(config, config.target, Domain::Target, 3, config.target_val);
  return b;
}

std::uint64_t fingerprint(const Benchmark& b) {
  std::uint64_t h = fnv1a64(std::string_view("shiftshapes"));
  auto add_split = [&](const std::vector<Image>& images, const std::vector<LabelMap>& labels) {
    for (const auto& img : images) h = fnv1a64(encode_f64(img.values), h);
    for (const auto& l : labels) h = fnv1a64(l.values, h);
  };
  add_split(b.source_train.images, b.source_train.labels);
  add_split(b.target_train.images, b.target_train.labels(OracleAccess{}));
  add_split(b.target_val.images, b.target_val.labels);
  return h;
}

nlohmann::json to_json(const BenchmarkConfig& c) {
  return {{"classes", c.classes},
          {"height", c.height},
          {"width", c.width},
          {"source_train", c.source_train},
          {"target_train", c.target_train},
          {"target_val", c.target_val},
          {"seed", c.seed},
          {"preset", to_string(c.preset)},
          {"source", spec_to_json(c.source)},
          {"target", spec_to_json(c.target)}};
}

BenchmarkConfig benchmark_config_from_json(const nlohmann::json& j) {
  try {
    const int classes = j.value("classes", 4);
    const ScenePreset preset = parse_scene_preset(j.value("preset", std::string(classes == 2 ? "blobs" : "shapes")));
    BenchmarkConfig c = default_benchmark_config(classes, preset);
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    c.source_train = j.value("source_train", c.source_train);
    c.target_train = j.value("target_train", c.target_train);
    c.target_val = j.value("target_val", c.target_val);
    c.seed = j.value("seed", c.seed);
    if (j.contains("source")) c.source = spec_from_json(j.at("source"), c.source);
    if (j.contains("target")) c.target = spec_from_json(j.at("target"), c.target);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("dataset config: ") + e.what());
  }
}

void save_benchmark(const Benchmark& b, const std::filesystem::path& dir) {
  const int h = b.config.height, w = b.config.width;
  nlohmann::json manifest = {{"format", "shiftshapes"}, {"version", 1}, {"config", to_json(b.config)}};
  auto write_split = [&](const char* name, const std::vector<Image>& images, const std::vector<LabelMap>& labels) {
    std::vector<double> pixels;
    std::vector<std::uint8_t> label_bytes;
    for (const auto& img : images) pixels.insert(pixels.end(), img.values.begin(), img.values.end());
    for (const auto& l : labels) label_bytes.insert(label_bytes.end(), l.values.begin(), l.values.end());
    const std::string stem = name;
    write_file(dir / (stem + ".images.f64"), encode_f64(pixels));
    write_file(dir / (stem + ".labels.u8"), label_bytes);
    manifest["splits"][stem] = {{"count", images.size()},
                                {"images", stem + ".images.f64"},
                                {"image_shape", {images.size(), Image::kChannels, h, w}},
                                {"labels", stem + ".labels.u8"},
                                {"label_shape", {labels.size(), h, w}}};
  };
  write_split(kSplitNames[0], b.source_train.images, b.source_train.labels);
  write_split(kSplitNames[1], b.target_train.images, b.target_train.labels(OracleAccess{}));
  write_split(kSplitNames[2], b.target_val.images, b.target_val.labels);
  manifest["fingerprint"] = hex64(fingerprint(b));
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

Benchmark load_benchmark(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed dataset manifest: " + std::string(e.what()));
  }
  Benchmark b;
  b.config = benchmark_config_from_json(manifest.at("config"));
  const int h = b.config.height, w = b.config.width;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  auto read_split = [&](const char* name, std::vector<Image>& images, std::vector<LabelMap>& labels) {
    const auto& entry = manifest.at("splits").at(name);
    const std::size_t count = entry.at("count").get<std::size_t>();
    const auto pixels = decode_f64(read_file(dir / entry.at("images").get<std::string>()));
    const auto label_bytes = read_file(dir / entry.at("labels").get<std::string>());
    if (pixels.size() != count * Image::kChannels * plane || label_bytes.size() != count * plane)
      throw IoError(std::string("dataset split ") + name + " has the wrong size");
    for (std::size_t i = 0; i < count; ++i) {
      Image img(h, w);
      std::copy_n(pixels.begin() + i * Image::kChannels * plane, Image::kChannels * plane, img.values.begin());
      images.push_back(std::move(img));
      LabelMap l(h, w);
      std::copy_n(label_bytes.begin() + i * plane, plane, l.values.begin());
      labels.push_back(std::move(l));
    }
  };
  read_split(kSplitNames[0], b.source_train.images, b.source_train.labels);
  std::vector<Image> tt_images;
  std::vector<LabelMap> tt_labels;
  read_split(kSplitNames[1], tt_images, tt_labels);
  b.target_train = UnlabeledSplit(std::move(tt_images), std::move(tt_labels));
  read_split(kSplitNames[2], b.target_val.images, b.target_val.labels);
  if (manifest.value("fingerprint", std::string()) != hex64(fingerprint(b)))
    throw IoError("dataset fingerprint does not match its manifest");
  return b;
}

std::string to_string(ScenePreset preset) { return preset == ScenePreset::Blobs ? "blobs" : "shapes"; }

ScenePreset parse_scene_preset(const std::string& text) {
  if (text == "shapes") return ScenePreset::Shapes;
  if (text == "blobs") return ScenePreset::Blobs;
  throw ConfigError("unknown scene preset '" + text + "'");
}

}  // namespace dacal
