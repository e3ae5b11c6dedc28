#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dacal/config.hpp"
#include "dacal/datasets.hpp"
#include "dacal/self_training.hpp"

namespace dacal {

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // no files are written without one
  bool resume = false;                          // continue from out_dir/last.ckpt
  std::function<void(const std::string&)> log;  // progress lines; may be empty
};

struct EvalPoint {
  long iteration = 0;
  double target_miou = 0.0;
};

struct TrainResult {
  TrainState state;
  std::vector<StepDiagnostics> history;  // steps run by this call
  std::vector<EvalPoint> evals;
  double best_miou = -1.0;
};

/// Runs the configured variant from scratch (or from a checkpoint) to config.iterations.
/// With an output directory it writes train.csv, eval.csv, last/best/final checkpoints and run.json.
TrainResult train(const ExperimentConfig& config, const Benchmark& benchmark, const TrainOptions& options = {});

/// One step of the configured variant on batches drawn from the state's RNG.
StepDiagnostics train_step(TrainState& state, const ExperimentConfig& config, const LabeledSplit& source,
                           const UnlabeledSplit& target);

void write_diagnostics_header(std::ostream& out);
void write_diagnostics_row(const StepDiagnostics& d, std::ostream& out);

/// The benchmark a config refers to: loaded from dataset_dir or generated in memory.
Benchmark resolve_benchmark(const ExperimentConfig& config);

}  // namespace dacal
