#include "dacal/dacal_meta.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "dacal/errors.hpp"

namespace dacal {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

void validate(const DacalConfig& config) {
  if (!(config.alpha >= 0.0) || !(config.beta >= 0.0)) throw ConfigError("alpha and beta must be non-negative");
  if (config.warmup_iterations < 1) throw ConfigError("warm-up length must be >= 1");
  if (!(config.mtn_ema_gamma >= 0.0 && config.mtn_ema_gamma <= 1.0))
    throw ConfigError("mtn_ema_gamma must lie in [0, 1]");
}

double warmup_lambda(long iteration, long warmup_iterations) {
  if (warmup_iterations < 1) throw DomainError("warmup_lambda: warm-up length must be >= 1");
  return std::min(1.0, static_cast<double>(std::max(iteration, 0L)) / static_cast<double>(warmup_iterations));
}

std::vector<ProbMap> calibrated_soft_targets(const SegNet& teacher, const Mtn& mtn, const Tensor& images) {
  const Tensor z = teacher.forward(images);
  const Tensor probs = softmax(z, mtn.forward(images, z, nullptr));
  std::vector<ProbMap> out;
  for (int i = 0; i < probs.n; ++i) {
    ProbMap p(probs.c, probs.h, probs.w);
    std::copy_n(probs.sample(i), p.values.size(), p.values.begin());
    out.push_back(std::move(p));
  }
  return out;
}

namespace {

HeadParams zero_head_like(const HeadParams& head) {
  return {head.features, head.classes, std::vector<double>(head.weight.size(), 0.0),
          std::vector<double>(head.bias.size(), 0.0)};
}

// Adds sum_p scale * (softmax(head f_p) - t_p) f_p^T into grad and returns sum_p scale * CE_p.
double accumulate_soft_head(const HeadParams& head, const Tensor& features, const Tensor& targets, double scale,
                            HeadParams& grad) {
  const Tensor logits = apply_head(head, features);
  const LossValue loss = soft_cross_entropy(logits, targets);
  // soft_cross_entropy averages over its own pixels; rescale to the requested per-pixel weight.
  const double pixels = static_cast<double>(logits.n) * logits.plane();
  MatMap gw(grad.weight.data(), head.classes, head.features);
  for (int i = 0; i < logits.n; ++i) {
    ConstMatMap d(loss.grad.sample(i), head.classes, logits.plane());
    gw.noalias() += (scale * pixels) * d * ConstMatMap(features.sample(i), head.features, logits.plane()).transpose();
    nn::add_row_sums(loss.grad.sample(i), head.classes, logits.plane(), scale * pixels, grad.bias.data());
  }
  return loss.value * scale * pixels;
}

}  // namespace

HeadLoss calibrated_soft_loss(const HeadParams& head, const Tensor& source_features, const Tensor& target_features,
                              const Tensor& source_targets, const Tensor& target_targets) {
  HeadLoss out{0.0, zero_head_like(head)};
  const double ws = 0.5 / (static_cast<double>(source_features.n) * source_features.plane());
  const double wt = 0.5 / (static_cast<double>(target_features.n) * target_features.plane());
  out.value += accumulate_soft_head(head, source_features, source_targets, ws, out.grad);
  out.value += accumulate_soft_head(head, target_features, target_targets, wt, out.grad);
  return out;
}

HeadParams inner_step(const HeadParams& head, const HeadParams& grad, double alpha) {
  if (grad.weight.size() != head.weight.size() || grad.bias.size() != head.bias.size())
    throw ShapeError("inner_step: gradient does not match head");
  HeadParams out = head;
  for (std::size_t i = 0; i < out.weight.size(); ++i) out.weight[i] -= alpha * grad.weight[i];
  for (std::size_t i = 0; i < out.bias.size(); ++i) out.bias[i] -= alpha * grad.bias[i];
  return out;
}

MetaOutcome accumulate_meta_gradient(const SegNet& student, const SegNet& teacher, Mtn& mtn, const MetaBatch& batch,
                                     double alpha, bool track_stats) {
  const Tensor images = concat_batch(batch.source_images, batch.target_images);
  const int n_source = batch.source_images.n;
  const Tensor z = teacher.forward(images);
  Mtn::Trace trace;
  const Tensor temps = track_stats ? mtn.forward_and_track(images, z, &trace) : mtn.forward(images, z, &trace);
  const Tensor targets = softmax(z, temps);

  // Step 1: one head-only gradient step on the calibrated soft loss.
  const Tensor features = student.features(images);
  const HeadParams head = student.clone_head();
  const int plane = features.plane();
  const int classes = head.classes;
  const int width = head.features;
  std::vector<double> pixel_weight(images.n);
  for (int i = 0; i < images.n; ++i)
    pixel_weight[i] = i < n_source ? 0.5 / (static_cast<double>(n_source) * plane)
                                   : 0.5 / (static_cast<double>(images.n - n_source) * plane);

  HeadParams cal_grad = zero_head_like(head);
  MetaOutcome outcome;
  {
    const Tensor logits = apply_head(head, features);
    const Tensor probs = softmax(logits);
    MatMap gw(cal_grad.weight.data(), classes, width);
    for (int i = 0; i < images.n; ++i) {
      const double w = pixel_weight[i];
      ConstMatMap s(probs.sample(i), classes, plane);
      ConstMatMap t(targets.sample(i), classes, plane);
      const RowMatrix diff = w * (s - t);
      gw.noalias() += diff * ConstMatMap(features.sample(i), width, plane).transpose();
      nn::add_row_sums(diff.data(), classes, plane, 1.0, cal_grad.bias.data());
      const double* zi = logits.sample(i);
      for (int p = 0; p < plane; ++p) {
        double mx = -INFINITY;
        for (int c = 0; c < classes; ++c) mx = std::max(mx, zi[c * plane + p]);
        double se = 0.0;
        for (int c = 0; c < classes; ++c) se += std::exp(zi[c * plane + p] - mx);
        const double lse = mx + std::log(se);
        for (int c = 0; c < classes; ++c) outcome.l_cal -= w * t(c, p) * (zi[c * plane + p] - lse);
      }
    }
  }
  const HeadParams adapted = inner_step(head, cal_grad, alpha);

  // Step 2: hard CE of the adapted head on the inner-mixed composite.
  const Tensor mixed_features = student.features(batch.mixed_images);
  const LossValue mix_loss = hard_cross_entropy(apply_head(adapted, mixed_features), batch.mixed_labels);
  outcome.l_mix = mix_loss.value;
  RowMatrix mix_gw = RowMatrix::Zero(classes, width);
  Eigen::VectorXd mix_gb = Eigen::VectorXd::Zero(classes);
  for (int i = 0; i < mixed_features.n; ++i) {
    ConstMatMap d(mix_loss.grad.sample(i), classes, mixed_features.plane());
    mix_gw.noalias() += d * ConstMatMap(mixed_features.sample(i), width, mixed_features.plane()).transpose();
    nn::add_row_sums(mix_loss.grad.sample(i), classes, mixed_features.plane(), 1.0, mix_gb.data());
  }

  // d adapted / d t_p = alpha * w_p * [f_p; 1], so dL/dt_p = alpha * w_p * (G_W f_p + G_b).
  Tensor grad_temps(temps.n, 1, temps.h, temps.w);
  for (int i = 0; i < images.n; ++i) {
    RowMatrix gt = mix_gw * ConstMatMap(features.sample(i), width, plane);
    gt.colwise() += mix_gb;
    gt *= alpha * pixel_weight[i];
    const double* zi = z.sample(i);
    const double* ti = targets.sample(i);
    const double* temp = temps.sample(i);
    double* out = grad_temps.sample(i);
    for (int p = 0; p < plane; ++p) {
      double tg = 0.0;
      for (int c = 0; c < classes; ++c) tg += ti[c * plane + p] * gt(c, p);
      // t = softmax(u), u = z / T: dL/du_c = t_c (g_c - <t, g>), du_c/dT = -z_c / T^2.
      double d_temp = 0.0;
      for (int c = 0; c < classes; ++c) d_temp -= ti[c * plane + p] * (gt(c, p) - tg) * zi[c * plane + p];
      out[p] = d_temp / (temp[p] * temp[p]);
    }
  }
  mtn.backward(trace, grad_temps);

  double tsum = 0.0;
  for (double t : temps.data) tsum += t;
  outcome.mean_temperature = tsum / static_cast<double>(temps.size());
  return outcome;
}

MetaOutcome meta_update_mtn(const SegNet& student, const SegNet& teacher, Mtn& mtn, const MetaBatch& batch,
                            double alpha, double beta, long iteration, bool track_stats) {
  mtn.zero_grad();
  MetaOutcome outcome;
  try {
    outcome = accumulate_meta_gradient(student, teacher, mtn, batch, alpha, track_stats);
  } catch (const DomainError&) {
    // A non-finite input or weight surfaces as an invalid temperature.
    throw TrainingFault("MTN temperature", iteration);
  }
  check_finite(outcome.l_mix, "L_mix", iteration);
  check_finite(outcome.l_cal, "L_cal", iteration);
  const auto params = mtn.parameters();
  check_finite(params, "MTN meta-gradient", iteration);
  for (auto* p : params)
    for (std::size_t i = 0; i < p->size(); ++i) p->value[i] -= beta * p->grad[i];
  return outcome;
}

LossValue outer_unsupervised_loss(const Tensor& logits, std::span<const LabelMap> hard_labels,
                                  std::span<const double> weights, const Tensor& soft_targets, double lambda_soft) {
  LossValue hard = hard_cross_entropy(logits, hard_labels, weights);
  if (lambda_soft == 0.0) return hard;
  const LossValue soft = soft_cross_entropy(logits, soft_targets, weights, hard_labels);
  for (std::size_t i = 0; i < hard.grad.size(); ++i) hard.grad.data[i] += lambda_soft * soft.grad.data[i];
  hard.value += lambda_soft * soft.value;
  return hard;
}

LossValue dacal_bi_loss(const Tensor& logits, std::span<const LabelMap> labels, const Tensor& temperatures,
                        std::span<const double> weights) {
  if (temperatures.n != logits.n || temperatures.c != 1 || temperatures.h != logits.h || temperatures.w != logits.w)
    throw ShapeError("dacal_bi_loss: temperature map does not match logits");
  Tensor scaled = logits;
  const int plane = logits.plane();
  for (int i = 0; i < logits.n; ++i)
    for (int c = 0; c < logits.c; ++c) {
      double* z = scaled.channel(i, c);
      const double* t = temperatures.sample(i);
      for (int p = 0; p < plane; ++p) z[p] *= t[p];
    }
  // Per pixel: loss_p = CE(f T, y) / T, and d loss_p / d f = (softmax(f T) - y), the T factors cancel.
  std::vector<double> w(static_cast<std::size_t>(logits.n) * plane);
  for (int i = 0; i < logits.n; ++i)
    for (int p = 0; p < plane; ++p) {
      const std::size_t k = static_cast<std::size_t>(i) * plane + p;
      w[k] = (weights.empty() ? 1.0 : weights[k]) / temperatures.sample(i)[p];
    }
  LossValue out = hard_cross_entropy(scaled, labels, w);
  for (int i = 0; i < logits.n; ++i)
    for (int c = 0; c < logits.c; ++c) {
      double* g = out.grad.channel(i, c);
      const double* t = temperatures.sample(i);
      for (int p = 0; p < plane; ++p) g[p] *= t[p];
    }
  return out;
}

std::vector<ProbMap> infer_ph(const SegNet& student, const Mtn* mtn_ema, const Tensor& images) {
  const Tensor z = student.forward(images);
  const Tensor probs = mtn_ema ? softmax(z, mtn_ema->forward(images, z, nullptr)) : softmax(z);
  std::vector<ProbMap> out;
  for (int i = 0; i < probs.n; ++i) {
    ProbMap p(probs.c, probs.h, probs.w);
    std::copy_n(probs.sample(i), p.values.size(), p.values.begin());
    out.push_back(std::move(p));
  }
  return out;
}

StepDiagnostics dacal_step(TrainState& state, const SourceBatch& source, const TargetBatch& target,
                           const SelfTrainingConfig& st, const DacalConfig& config) {
  if (!state.mtn || !state.mtn_ema) throw ConfigError("dacal_step: train state has no MTN");
  StepDiagnostics d;
  d.iteration = state.iteration;

  const Tensor source_images = stack_images(source.images);
  const Tensor target_images = stack_images(target.images);
  const auto bundles = make_pseudo_labels(state.teacher, target_images, st.tau);
  std::vector<MixMask> outer_masks, inner_masks;
  for (const auto& labels : source.labels) {
    MaskPair pair = make_mask_pair(labels, st.mix_kind, st.mix_strategy, state.rng);
    outer_masks.push_back(std::move(pair.outer));
    inner_masks.push_back(std::move(pair.inner));
  }

  // Steps 1-2: inner head update and MTN meta-update on the inner-mixed composite.
  const MixedBatch inner = build_mixed_batch(source, target, bundles, inner_masks);
  const MetaBatch meta{source_images, target_images, stack_images(inner.images), inner.labels};
  const MetaOutcome mo =
      meta_update_mtn(state.student, state.teacher, *state.mtn, meta, config.alpha, config.beta, state.iteration);
  if (config.use_mtn_ema)
    ema_update(*state.mtn_ema, *state.mtn, config.mtn_ema_gamma);
  else
    *state.mtn_ema = *state.mtn;
  const Mtn& calibrator = *state.mtn_ema;

  // Step 3: student update.
  const double lambda = config.use_warmup ? warmup_lambda(state.iteration, config.warmup_iterations) : 1.0;
  const bool built_in = config.variant == CalibrationVariant::BuiltIn;
  state.student.zero_grad();
  SegNet::Trace trace;
  Tensor logits = state.student.forward(source_images, nn::NormMode::Train, &trace);
  LossValue ls = built_in ? dacal_bi_loss(logits, source.labels, calibrator.forward(source_images, logits, nullptr))
                          : hard_cross_entropy(logits, source.labels);
  check_finite(ls.value, "L_s", state.iteration);
  state.student.backward(trace, ls.grad);

  const MixedBatch outer = build_mixed_batch(source, target, bundles, outer_masks);
  const Tensor outer_images = stack_images(outer.images);
  logits = state.student.forward(outer_images, nn::NormMode::Train, &trace);
  const Tensor temps = calibrator.forward(outer_images, logits, nullptr);
  LossValue lu;
  if (built_in) {
    lu = dacal_bi_loss(logits, outer.labels, temps, outer.weights);
    d.l_u_hard = lu.value;
  } else {
    const Tensor soft = softmax(logits, temps);
    d.l_u_hard = hard_cross_entropy(logits, outer.labels, outer.weights).value;
    d.l_u_soft = soft_cross_entropy(logits, soft, outer.weights, outer.labels).value;
    lu = outer_unsupervised_loss(logits, outer.labels, outer.weights, soft, lambda);
  }
  check_finite(lu.value, "L_u", state.iteration);
  state.student.backward(trace, lu.grad);

  const auto params = state.student.parameters();
  check_finite(params, "student gradient", state.iteration);
  state.optimizer.step(params);
  ema_update(state.teacher, state.student, st.teacher_ema_gamma);

  d.l_s = ls.value;
  d.l_mix = mo.l_mix;
  d.lambda_soft = built_in ? 0.0 : lambda;
  for (const auto& b : bundles) d.q_mean += b.quality / static_cast<double>(bundles.size());
  double tsum = 0.0;
  for (double t : temps.data) tsum += t;
  d.mean_t = tsum / static_cast<double>(temps.size());
  ++state.iteration;
  return d;
}

}  // namespace dacal
