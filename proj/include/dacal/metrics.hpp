#pragma once

#include <cstddef>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "dacal/tensor.hpp"

namespace dacal {

inline constexpr int kDefaultBins = 15;
inline constexpr double kProbabilityFloor = 1e-12;

/// One sampled pixel. `pixel` indexes into the image the sample came from.
struct PixelSample {
  double confidence = 0.0;
  int predicted = 0;
  int truth = 0;
  int pixel = 0;
};

struct BinSample {
  double confidence = 0.0;
  bool correct = false;
};

/// Equal-width confidence bins over [0, 1].
struct ReliabilityBins {
  std::vector<double> edges;  // M + 1 entries
  std::vector<std::size_t> count;
  std::vector<double> conf_sum;
  std::vector<double> acc_sum;

  int bins() const noexcept { return static_cast<int>(count.size()); }
  std::size_t total() const noexcept;
};

struct ClassMetrics {
  double ece = 0.0;
  double nll = 0.0;
  double brier = 0.0;
  std::size_t n_pixels = 0;
};

struct CalibrationReport {
  std::vector<ClassMetrics> per_class;
  ClassMetrics macro;  // n_pixels holds the pooled sample count
  double miou = 0.0;
  ReliabilityBins pooled_bins;  // all samples, not class-balanced; feeds reliability diagrams
};

struct ReliabilityRow {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  std::optional<double> mean_confidence;
  std::optional<double> accuracy;
};

/// Draws min(n, #labelled pixels) pixels uniformly without replacement.
/// Throws ShapeError on size mismatch and EmptySampleError if every pixel is ignored.
std::vector<PixelSample> sample_pixels(const ProbMap& probs, const LabelMap& labels, std::size_t n, Rng& rng);

/// A confidence c lands in bin floor(c * M), with c == 1 clamped into the last bin.
ReliabilityBins bin_samples(std::span<const BinSample> samples, int bins);

double ece(const ReliabilityBins& bins);
double nll(const ProbMap& probs, const LabelMap& labels);
double brier(const ProbMap& probs, const LabelMap& labels);

/// Mean IoU over classes that occur in the ground truth.
double mean_iou(std::span<const ProbMap> probs, std::span<const LabelMap> labels, int classes);

/// Samples `n_per_image` pixels from every image (one shared sample for all three metrics),
/// groups them by true label and reports per-class and macro-averaged ECE, NLL and Brier.
CalibrationReport class_balanced_report(std::span<const ProbMap> probs, std::span<const LabelMap> labels,
                                        int classes, int bins, std::size_t n_per_image, Rng& rng);

std::vector<ReliabilityRow> reliability_diagram_export(const ReliabilityBins& bins);

void write_report_csv(const CalibrationReport& report, std::ostream& out);
void write_reliability_csv(std::span<const ReliabilityRow> rows, std::ostream& out);
std::vector<ReliabilityRow> read_reliability_csv(std::istream& in);

void check_same_shape(const ClassMap& probs, const LabelMap& labels);

}  // namespace dacal
