#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>

#include "dacal/tensor.hpp"

namespace dacal {

inline constexpr double kMinTemperature = 0.05;
inline constexpr double kMaxTemperature = 20.0;

class GlobalTemperature {
 public:
  explicit GlobalTemperature(double value);
  double value() const noexcept { return value_; }

 private:
  double value_;
};

ProbMap softmax(const LogitsMap& logits);
ProbMap apply_temperature(const LogitsMap& logits, double temperature);
ProbMap apply_temperature(const LogitsMap& logits, const TemperatureMap& temperature);

/// Mean NLL over labelled pixels of softmax(logits / T).
double temperature_nll(std::span<const LogitsMap> logits, std::span<const LabelMap> labels, double temperature);

/// Golden-section search over log T in [log 0.05, log 20] until the bracket is narrower than 1e-4 in T.
GlobalTemperature fit_global_temperature(std::span<const LogitsMap> logits, std::span<const LabelMap> labels);

/// Averages logits across members, then applies softmax.
ProbMap ensemble_probs(std::span<const LogitsMap> members);

using LogitsFn = std::function<LogitsMap(const Image&)>;

struct PseudoCalOptions {
  double beta_shape = 0.3;
  std::optional<double> fixed_lambda;  // bypasses the Beta draw
};

/// Pixel-level PseudoCal: mixes disjoint image pairs with lambda ~ Beta(a, a), labels each mix with the
/// model's argmax on its dominant image (weight >= 0.5) and fits one temperature to the mix logits.
GlobalTemperature pseudocal_fit(const LogitsFn& model, std::span<const Image> target_images, Rng& rng,
                                const PseudoCalOptions& options = {});

/// Persisted form of a fitted temperature.
struct TemperatureRecord {
  static constexpr int kVersion = 1;
  std::string method;
  double temperature = 1.0;
  std::string fingerprint;
  std::uint64_t seed = 0;
};

void save_temperature_record(const TemperatureRecord& record, const std::string& path);
TemperatureRecord load_temperature_record(const std::string& path);

}  // namespace dacal
