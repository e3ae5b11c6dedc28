#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dacal/dacal_meta.hpp"
#include "dacal/datasets.hpp"
#include "dacal/models.hpp"
#include "dacal/self_training.hpp"

namespace dacal {

/// Which training loop a run uses. SourceOnly is the NoAdapt reference; None is plain self-training.
enum class Variant { SourceOnly, None, PH, BI };

std::string to_string(Variant v);
Variant parse_variant(const std::string& text);

/// Cross-product sweep for `ablate`: every key maps to the list of values it takes.
struct AblationSpec {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::map<std::string, std::vector<nlohmann::json>> grid;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  BenchmarkConfig dataset = default_benchmark_config();
  std::string dataset_dir;  // generated dataset to load; empty means build it in memory from `dataset`

  Variant variant = Variant::PH;
  long iterations = 500;
  int batch_size = 2;
  SelfTrainingConfig self_training;

  double alpha = 0.01;
  double beta = 0.01;
  double mtn_ema_gamma = 0.99;
  double warmup_fraction = 0.5;
  bool use_mtn_ema = true;
  bool use_warmup = true;

  SegNetConfig model;
  MtnConfig mtn;

  int bins = 15;
  int samples_per_image = 10000;
  long eval_every = 100;
  long checkpoint_every = 0;  // 0: only best and final
  double holdout_fraction = 0.2;

  AblationSpec ablation;

  DacalConfig dacal() const;
  long warmup_iterations() const;
};

/// Fills in dependent fields (class counts, forced CutMix for two classes) and checks ranges.
void finalize(ExperimentConfig& config);

nlohmann::json to_json(const ExperimentConfig& config);
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Hash of the canonical JSON form; recorded in every output.
std::string config_hash(const ExperimentConfig& config);

/// Applies a dotted-key override such as "mixing.strategy" or "use_mtn_ema".
void apply_override(ExperimentConfig& config, const std::string& key, const nlohmann::json& value);

}  // namespace dacal
