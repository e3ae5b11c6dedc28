#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dacal/calibrators.hpp"
#include "dacal/checkpoint.hpp"
#include "dacal/config.hpp"
#include "dacal/datasets.hpp"
#include "dacal/metrics.hpp"

namespace dacal {

enum class EvalMode { NoCalib, TempScalSrc, Ensemble, PseudoCal, DacalPH, DacalBI, Oracle };

std::string to_string(EvalMode mode);
EvalMode parse_eval_mode(const std::string& text);

/// Source images split into a training part and a labelled hold-out (TempScal-src and source-domain
/// evaluation). The split depends only on the split size and fraction.
struct SourceSplit {
  LabeledSplit train;
  LabeledSplit holdout;
};
SourceSplit split_source(const LabeledSplit& source, double holdout_fraction);

/// Eval-mode logits of a network, computed in small batches.
std::vector<LogitsMap> predict_logits(const SegNet& net, std::span<const Image> images);
std::vector<ProbMap> softmax_all(std::span<const LogitsMap> logits);
std::vector<ProbMap> apply_temperature_all(std::span<const LogitsMap> logits, double temperature);

/// Target-domain mIoU of the student's raw predictions (cheap; used during training).
double target_miou(const SegNet& net, const LabeledSplit& split, int classes);

struct EvalOutcome {
  EvalMode mode = EvalMode::NoCalib;
  CalibrationReport report;
  std::vector<ReliabilityRow> reliability;
  std::optional<TemperatureRecord> temperature;
  std::vector<ProbMap> probs;  // per target-validation image
};

/// Calibrated target-validation probabilities and class-balanced report for one mode. Ensemble mode
/// averages the members' logits; every other mode uses the first member. Pixel sampling is seeded from
/// the first member's config so different modes on one checkpoint share their samples.
EvalOutcome evaluate(std::span<const Checkpoint> members, const Benchmark& benchmark, EvalMode mode);

/// Report for arbitrary probability maps with the config's bin count and sampling budget.
CalibrationReport report_for(std::span<const ProbMap> probs, std::span<const LabelMap> labels,
                             const ExperimentConfig& config);

}  // namespace dacal
