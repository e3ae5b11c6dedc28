#pragma once

#include <optional>
#include <span>
#include <vector>

#include "dacal/mixing.hpp"
#include "dacal/models.hpp"
#include "dacal/nn.hpp"
#include "dacal/tensor.hpp"

namespace dacal {

/// Scalar loss plus its gradient with respect to the logits it was computed from.
struct LossValue {
  double value = 0.0;
  Tensor grad;
};

/// Mean over labelled pixels of w_p * CE(logits_p, y_p). Empty `weights` means 1 everywhere.
/// Throws EmptySampleError when every pixel is ignored.
LossValue hard_cross_entropy(const Tensor& logits, std::span<const LabelMap> labels,
                             std::span<const double> weights = {});

/// Mean over pixels of -w_p * sum_c target_pc log softmax(logits_p)_c. Pixels whose entry in
/// `mask_labels` is kIgnoreLabel are skipped when `mask_labels` is given.
LossValue soft_cross_entropy(const Tensor& logits, const Tensor& targets, std::span<const double> weights = {},
                             std::span<const LabelMap> mask_labels = {});

Tensor softmax(const Tensor& logits);
/// softmax(logits / T) with T broadcast over classes from an (n, 1, h, w) tensor.
Tensor softmax(const Tensor& logits, const Tensor& temperatures);

struct PseudoLabelBundle {
  LabelMap hard;
  std::vector<double> confidence;
  double quality = 0.0;  // fraction of pixels with confidence >= tau
};

/// Teacher argmax, max-probability map and quality weight for each target image.
std::vector<PseudoLabelBundle> make_pseudo_labels(const SegNet& teacher, const Tensor& target_images, double tau);
std::vector<PseudoLabelBundle> pseudo_labels_from_logits(const Tensor& logits, double tau);

struct SourceBatch {
  std::vector<Image> images;
  std::vector<LabelMap> labels;
};

struct TargetBatch {
  std::vector<Image> images;
};

/// Eval-mode supervised cross-entropy of the student on a labelled batch.
double supervised_loss(const SegNet& student, const SourceBatch& batch);

/// q * CE against the bundle's hard labels (eval-mode forward).
double unsupervised_hard_loss(const SegNet& student, const Image& image, const PseudoLabelBundle& bundle);

struct SelfTrainingConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double tau = 0.968;
  double teacher_ema_gamma = 0.95;
  MixKind mix_kind = MixKind::ClassMix;
  MixStrategy mix_strategy = MixStrategy::Complementary;
};

/// Student, EMA teacher and (for the calibrated variants) the MTN with its EMA shadow.
struct TrainState {
  SegNet student;
  SegNet teacher;
  std::optional<Mtn> mtn;
  std::optional<Mtn> mtn_ema;
  nn::Sgd optimizer{0.01, 0.9};
  long iteration = 0;
  long total_iterations = 0;
  Rng rng;
};

TrainState make_train_state(const SegNetConfig& net, const std::optional<MtnConfig>& mtn, const SelfTrainingConfig& st,
                            long total_iterations, std::uint64_t seed);

struct StepDiagnostics {
  long iteration = 0;
  double l_s = 0.0;
  double l_u_hard = 0.0;
  double l_u_soft = 0.0;
  double l_mix = 0.0;
  double q_mean = 0.0;
  double lambda_soft = 0.0;
  double mean_t = 1.0;  // 1 for variants without a calibrator
};

/// Outer-mixed composites for a batch, built from one mask pair per source/target pair.
struct MixedBatch {
  std::vector<Image> images;
  std::vector<LabelMap> labels;
  std::vector<double> weights;  // flattened per pixel over the batch
};

MixedBatch build_mixed_batch(const SourceBatch& source, const TargetBatch& target,
                             std::span<const PseudoLabelBundle> bundles, std::span<const MixMask> masks);

/// Source-only supervised step (the NoAdapt model).
StepDiagnostics source_only_step(TrainState& state, const SourceBatch& source, const SelfTrainingConfig& config);

/// Plain self-training: L_s + q-weighted hard CE on the ClassMix composite, then teacher EMA.
StepDiagnostics baseline_step(TrainState& state, const SourceBatch& source, const TargetBatch& target,
                              const SelfTrainingConfig& config);

void check_finite(double value, const char* component, long iteration);
void check_finite(std::span<nn::Param* const> params, const char* component, long iteration);

}  // namespace dacal
