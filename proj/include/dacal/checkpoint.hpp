#pragma once

#include <filesystem>
#include <string>

#include "dacal/config.hpp"
#include "dacal/self_training.hpp"

namespace dacal {

/// Everything needed to resume a run bit-exactly or to evaluate it.
struct Checkpoint {
  ExperimentConfig config;
  TrainState state;
  double best_miou = -1.0;
};

/// Binary layout: magic "DACALCK1", u32 version, u64 header length, JSON header, then raw f64 blocks
/// (student state, teacher state, optional MTN and MTN EMA state, optimizer velocity) in header order.
void save_checkpoint(const std::filesystem::path& path, const ExperimentConfig& config, const TrainState& state,
                     double best_miou);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dacal
