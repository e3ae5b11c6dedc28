#include "dacal/mixing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dacal/errors.hpp"

namespace dacal {

MixMask::MixMask(int h, int w, bool fill)
    : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill ? 1 : 0) {}

std::size_t MixMask::count() const noexcept {
  return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::uint8_t{1}));
}

std::string to_string(MixKind kind) { return kind == MixKind::ClassMix ? "classmix" : "cutmix"; }

std::string to_string(MixStrategy strategy) {
  switch (strategy) {
    case MixStrategy::Complementary:
      return "complementary";
    case MixStrategy::Same:
      return "same";
    case MixStrategy::Random:
      return "random";
  }
  return "complementary";
}

MixKind parse_mix_kind(const std::string& name) {
  if (name == "classmix") return MixKind::ClassMix;
  if (name == "cutmix") return MixKind::CutMix;
  throw ConfigError("unknown mixing kind '" + name + "'");
}

MixStrategy parse_mix_strategy(const std::string& name) {
  if (name == "complementary") return MixStrategy::Complementary;
  if (name == "same") return MixStrategy::Same;
  if (name == "random") return MixStrategy::Random;
  throw ConfigError("unknown mixing strategy '" + name + "'");
}

std::vector<int> present_classes(const LabelMap& labels) {
  std::vector<bool> seen(256, false);
  for (auto v : labels.values)
    if (v != kIgnoreLabel) seen[v] = true;
  std::vector<int> out;
  for (int c = 0; c < 255; ++c)
    if (seen[c]) out.push_back(c);
  return out;
}

ComplementarySplit split_classes(const LabelMap& source_labels, Rng& rng) {
  std::vector<int> classes = present_classes(source_labels);
  if (classes.empty()) throw EmptySampleError("split_classes: no labelled pixels");
  std::shuffle(classes.begin(), classes.end(), rng);
  const std::size_t outer = (classes.size() + 1) / 2;
  ComplementarySplit split;
  split.outer_classes.assign(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>(outer));
  split.inner_classes.assign(classes.begin() + static_cast<std::ptrdiff_t>(outer), classes.end());
  std::sort(split.outer_classes.begin(), split.outer_classes.end());
  std::sort(split.inner_classes.begin(), split.inner_classes.end());
  split.rectangle_fallback = split.inner_classes.empty();
  return split;
}

MixMask classmix_mask(const LabelMap& source_labels, std::span<const int> classes) {
  MixMask mask(source_labels.height, source_labels.width);
  std::vector<bool> selected(256, false);
  for (int c : classes)
    if (c >= 0 && c < 255) selected[c] = true;
  for (std::size_t i = 0; i < mask.values.size(); ++i) {
    const auto y = source_labels.values[i];
    mask.values[i] = (y != kIgnoreLabel && selected[y]) ? 1 : 0;
  }
  return mask;
}

MixMask cutmix_mask(int height, int width, Rng& rng) {
  if (height < 2 || width < 2) throw DomainError("cutmix_mask: image must be at least 2x2");
  std::uniform_real_distribution<double> area_dist(0.25, 0.5);
  const double area = area_dist(rng);
  // Height fraction in [area, 1] keeps the width fraction area / hf inside [area, 1] too.
  std::uniform_real_distribution<double> hf_dist(area, 1.0);
  const double hf = hf_dist(rng);
  const int rh = std::clamp(static_cast<int>(std::lround(hf * height)), 1, height);
  const int rw = std::clamp(static_cast<int>(std::lround(area / hf * width)), 1, width);
  std::uniform_int_distribution<int> y_dist(0, height - rh);
  std::uniform_int_distribution<int> x_dist(0, width - rw);
  const int y0 = y_dist(rng);
  const int x0 = x_dist(rng);
  MixMask mask(height, width);
  for (int y = y0; y < y0 + rh; ++y)
    for (int x = x0; x < x0 + rw; ++x) mask.values[y * width + x] = 1;
  return mask;
}

MixMask complement(const MixMask& mask) {
  MixMask out = mask;
  for (auto& v : out.values) v = v ? 0 : 1;
  return out;
}

double overlap_ratio(const MixMask& a, const MixMask& b) {
  if (a.height != b.height || a.width != b.width) throw ShapeError("overlap_ratio: mask shapes differ");
  std::size_t both = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) both += (a.values[i] && b.values[i]) ? 1 : 0;
  const std::size_t smaller = std::min(a.count(), b.count());
  return smaller == 0 ? 0.0 : static_cast<double>(both) / static_cast<double>(smaller);
}

MixedSample mix(const Image& source_image, const Image& target_image, const LabelMap& source_labels,
                const LabelMap& target_pseudo_labels, const MixMask& mask) {
  const int h = mask.height, w = mask.width;
  const auto aligned = [&](int hh, int ww) { return hh == h && ww == w; };
  if (!aligned(source_image.height, source_image.width) || !aligned(target_image.height, target_image.width) ||
      !aligned(source_labels.height, source_labels.width) ||
      !aligned(target_pseudo_labels.height, target_pseudo_labels.width))
    throw ShapeError("mix: inputs are not aligned with the mask");
  MixedSample out{Image(h, w), LabelMap(h, w)};
  const int n = h * w;
  for (int p = 0; p < n; ++p) {
    const bool src = mask.values[p] != 0;
    out.labels.values[p] = src ? source_labels.values[p] : target_pseudo_labels.values[p];
    for (int ch = 0; ch < Image::kChannels; ++ch) {
      const std::size_t i = static_cast<std::size_t>(ch) * n + p;
      out.image.values[i] = src ? source_image.values[i] : target_image.values[i];
    }
  }
  return out;
}

std::vector<double> mix_weights(const MixMask& mask, double target_quality) {
  std::vector<double> w(mask.values.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = mask.values[i] ? 1.0 : target_quality;
  return w;
}

namespace {

constexpr double kMaxRectangleOverlap = 0.1;
constexpr int kRectangleAttempts = 200;

// A second rectangle overlapping `outer` by less than 10%; the complement of `outer` if none is found.
MixMask complementary_rectangle(const MixMask& outer, Rng& rng) {
  for (int attempt = 0; attempt < kRectangleAttempts; ++attempt) {
    MixMask candidate = cutmix_mask(outer.height, outer.width, rng);
    if (overlap_ratio(outer, candidate) < kMaxRectangleOverlap) return candidate;
  }
  return complement(outer);
}

MixMask inner_classmix(const LabelMap& labels, std::span<const int> classes, Rng& rng) {
  if (classes.empty()) return cutmix_mask(labels.height, labels.width, rng);
  return classmix_mask(labels, classes);
}

}  // namespace

MaskPair make_mask_pair(const LabelMap& source_labels, MixKind kind, MixStrategy strategy, Rng& rng) {
  MaskPair pair;
  if (kind == MixKind::CutMix) {
    pair.outer = cutmix_mask(source_labels.height, source_labels.width, rng);
    switch (strategy) {
      case MixStrategy::Complementary:
        pair.inner = complementary_rectangle(pair.outer, rng);
        break;
      case MixStrategy::Same:
        pair.inner = pair.outer;
        break;
      case MixStrategy::Random:
        pair.inner = cutmix_mask(source_labels.height, source_labels.width, rng);
        break;
    }
    return pair;
  }

  pair.split = split_classes(source_labels, rng);
  pair.outer = classmix_mask(source_labels, pair.split.outer_classes);
  switch (strategy) {
    case MixStrategy::Complementary:
      pair.inner = inner_classmix(source_labels, pair.split.inner_classes, rng);
      break;
    case MixStrategy::Same:
      pair.inner = pair.outer;
      break;
    case MixStrategy::Random: {
      const ComplementarySplit independent = split_classes(source_labels, rng);
      pair.inner = classmix_mask(source_labels, independent.outer_classes);
      break;
    }
  }
  return pair;
}

}  // namespace dacal
