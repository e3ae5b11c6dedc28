#pragma once

#include <span>
#include <vector>

#include "dacal/models.hpp"
#include "dacal/self_training.hpp"
#include "dacal/tensor.hpp"

namespace dacal {

enum class CalibrationVariant { PostHoc, BuiltIn };

struct DacalConfig {
  double alpha = 0.01;  // inner-loop learning rate
  double beta = 0.01;   // MTN learning rate
  long warmup_iterations = 250;
  double mtn_ema_gamma = 0.99;
  CalibrationVariant variant = CalibrationVariant::PostHoc;
  bool use_mtn_ema = true;
  bool use_warmup = true;
};

void validate(const DacalConfig& config);

double warmup_lambda(long iteration, long warmup_iterations);

/// softmax(z / T) with z = teacher logits and T = MTN([x, z]); both network outputs are constants
/// except for the MTN's dependence on its parameters.
std::vector<ProbMap> calibrated_soft_targets(const SegNet& teacher, const Mtn& mtn, const Tensor& images);

struct HeadLoss {
  double value = 0.0;
  HeadParams grad;
};

/// Soft cross-entropy of a head over frozen features of both domains; the two domain means are
/// averaged with equal weight. Returns the loss and its gradient with respect to the head.
HeadLoss calibrated_soft_loss(const HeadParams& head, const Tensor& source_features, const Tensor& target_features,
                              const Tensor& source_targets, const Tensor& target_targets);

/// One gradient step on the head: head - alpha * grad.
HeadParams inner_step(const HeadParams& head, const HeadParams& grad, double alpha);

struct MetaBatch {
  Tensor source_images;
  Tensor target_images;
  Tensor mixed_images;  // inner-mixed composite
  std::vector<LabelMap> mixed_labels;
};

struct MetaOutcome {
  double l_cal = 0.0;
  double l_mix = 0.0;
  double mean_temperature = 0.0;
};

/// Computes L_mix(theta' - alpha * grad L_cal(theta', psi)) for a head-only inner step and accumulates
/// d L_mix / d psi into the MTN gradients. The student and teacher are read-only: the backbone and the
/// original head receive nothing. With `track_stats` the MTN folds this batch into its running statistics.
MetaOutcome accumulate_meta_gradient(const SegNet& student, const SegNet& teacher, Mtn& mtn, const MetaBatch& batch,
                                     double alpha, bool track_stats);

/// Zeroes the MTN gradients, accumulates the meta-gradient and takes psi <- psi - beta * grad.
MetaOutcome meta_update_mtn(const SegNet& student, const SegNet& teacher, Mtn& mtn, const MetaBatch& batch,
                            double alpha, double beta, long iteration, bool track_stats = true);

/// q-weighted hard CE plus lambda_soft times soft CE against calibrated targets (treated as constants).
LossValue outer_unsupervised_loss(const Tensor& logits, std::span<const LabelMap> hard_labels,
                                  std::span<const double> weights, const Tensor& soft_targets, double lambda_soft);

/// Mean over labelled pixels of -w log softmax(f * T)_y / T.
LossValue dacal_bi_loss(const Tensor& logits, std::span<const LabelMap> labels, const Tensor& temperatures,
                        std::span<const double> weights = {});

/// Calibrated probabilities softmax(f / T(psi_ema)); without an MTN this is the raw softmax.
std::vector<ProbMap> infer_ph(const SegNet& student, const Mtn* mtn_ema, const Tensor& images);

/// One full DA-Cal iteration: inner head update and MTN meta-step, MTN EMA, student update with the
/// variant's unsupervised loss, teacher EMA.
StepDiagnostics dacal_step(TrainState& state, const SourceBatch& source, const TargetBatch& target,
                           const SelfTrainingConfig& st, const DacalConfig& config);

}  // namespace dacal
