#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dacal/tensor.hpp"

namespace dacal {

/// true (1) takes the pixel from the source side, false (0) from the target side.
struct MixMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;

  MixMask() = default;
  MixMask(int height, int width, bool fill = false);

  int pixels() const noexcept { return height * width; }
  std::size_t count() const noexcept;
};

struct ComplementarySplit {
  std::vector<int> outer_classes;
  std::vector<int> inner_classes;
  bool rectangle_fallback = false;  // inner set empty: the inner mask becomes a CutMix rectangle
};

enum class MixKind { ClassMix, CutMix };
enum class MixStrategy { Complementary, Same, Random };

std::string to_string(MixKind kind);
std::string to_string(MixStrategy strategy);
MixKind parse_mix_kind(const std::string& name);
MixStrategy parse_mix_strategy(const std::string& name);

std::vector<int> present_classes(const LabelMap& labels);

/// Random partition of the classes present in `source_labels`; the outer set gets ceil(n / 2).
ComplementarySplit split_classes(const LabelMap& source_labels, Rng& rng);

MixMask classmix_mask(const LabelMap& source_labels, std::span<const int> classes);

/// One axis-aligned rectangle covering 25-50% of the image (up to rounding), fully inside it.
MixMask cutmix_mask(int height, int width, Rng& rng);

MixMask complement(const MixMask& mask);

/// |a and b| / min(|a|, |b|); zero when either mask is empty.
double overlap_ratio(const MixMask& a, const MixMask& b);

struct MixedSample {
  Image image;
  LabelMap labels;
};

MixedSample mix(const Image& source_image, const Image& target_image, const LabelMap& source_labels,
                const LabelMap& target_pseudo_labels, const MixMask& mask);

/// Per-pixel loss weights for a mixed sample: 1 on source pixels, `target_quality` on target pixels.
std::vector<double> mix_weights(const MixMask& mask, double target_quality);

struct MaskPair {
  MixMask outer;
  MixMask inner;
  ComplementarySplit split;  // meaningful for ClassMix only
};

/// Masks for the outer (student) and inner (MTN meta) composites of one source/target pair.
MaskPair make_mask_pair(const LabelMap& source_labels, MixKind kind, MixStrategy strategy, Rng& rng);

}  // namespace dacal
