#include "dacal/self_training.hpp"

#include <algorithm>
#include <cmath>

#include "dacal/errors.hpp"

namespace dacal {

namespace {

void check_labels(const Tensor& logits, std::span<const LabelMap> labels) {
  if (static_cast<int>(labels.size()) != logits.n) throw ShapeError("loss: label batch size mismatch");
  for (const auto& l : labels)
    if (l.height != logits.h || l.width != logits.w) throw ShapeError("loss: label map shape mismatch");
}

// log-sum-exp of one pixel's class scores (stride = plane between classes).
double log_sum_exp(const double* z, int classes, int stride) {
  double mx = -INFINITY;
  for (int c = 0; c < classes; ++c) mx = std::max(mx, z[c * stride]);
  double s = 0.0;
  for (int c = 0; c < classes; ++c) s += std::exp(z[c * stride] - mx);
  return mx + std::log(s);
}

}  // namespace

LossValue hard_cross_entropy(const Tensor& logits, std::span<const LabelMap> labels, std::span<const double> weights) {
  check_labels(logits, labels);
  const int plane = logits.plane();
  if (!weights.empty() && weights.size() != static_cast<std::size_t>(logits.n) * plane)
    throw ShapeError("hard_cross_entropy: weight count mismatch");
  std::size_t count = 0;
  for (const auto& l : labels)
    for (auto v : l.values) count += v != kIgnoreLabel ? 1 : 0;
  if (count == 0) throw EmptySampleError("hard_cross_entropy: every pixel is ignored");

  LossValue out{0.0, Tensor(logits.n, logits.c, logits.h, logits.w)};
  const double inv = 1.0 / static_cast<double>(count);
  for (int i = 0; i < logits.n; ++i) {
    const double* z = logits.sample(i);
    double* g = out.grad.sample(i);
    for (int p = 0; p < plane; ++p) {
      const auto y = labels[i].values[p];
      if (y == kIgnoreLabel) continue;
      if (y >= logits.c) throw ShapeError("hard_cross_entropy: label exceeds class count");
      const double w = weights.empty() ? 1.0 : weights[static_cast<std::size_t>(i) * plane + p];
      const double lse = log_sum_exp(z + p, logits.c, plane);
      out.value += w * (lse - z[y * plane + p]);
      for (int c = 0; c < logits.c; ++c) {
        const double prob = std::exp(z[c * plane + p] - lse);
        g[c * plane + p] = w * inv * (prob - (c == y ? 1.0 : 0.0));
      }
    }
  }
  out.value *= inv;
  return out;
}

LossValue soft_cross_entropy(const Tensor& logits, const Tensor& targets, std::span<const double> weights,
                             std::span<const LabelMap> mask_labels) {
  if (!logits.same_shape(targets)) throw ShapeError("soft_cross_entropy: target shape mismatch");
  if (!mask_labels.empty()) check_labels(logits, mask_labels);
  const int plane = logits.plane();
  if (!weights.empty() && weights.size() != static_cast<std::size_t>(logits.n) * plane)
    throw ShapeError("soft_cross_entropy: weight count mismatch");
  std::size_t count = 0;
  for (int i = 0; i < logits.n; ++i)
    for (int p = 0; p < plane; ++p)
      count += (mask_labels.empty() || mask_labels[i].values[p] != kIgnoreLabel) ? 1 : 0;
  if (count == 0) throw EmptySampleError("soft_cross_entropy: every pixel is ignored");

  LossValue out{0.0, Tensor(logits.n, logits.c, logits.h, logits.w)};
  const double inv = 1.0 / static_cast<double>(count);
  for (int i = 0; i < logits.n; ++i) {
    const double* z = logits.sample(i);
    const double* t = targets.sample(i);
    double* g = out.grad.sample(i);
    for (int p = 0; p < plane; ++p) {
      if (!mask_labels.empty() && mask_labels[i].values[p] == kIgnoreLabel) continue;
      const double w = weights.empty() ? 1.0 : weights[static_cast<std::size_t>(i) * plane + p];
      const double lse = log_sum_exp(z + p, logits.c, plane);
      double tsum = 0.0;
      for (int c = 0; c < logits.c; ++c) {
        const double tc = t[c * plane + p];
        out.value -= w * tc * (z[c * plane + p] - lse);
        tsum += tc;
      }
      for (int c = 0; c < logits.c; ++c) {
        const double prob = std::exp(z[c * plane + p] - lse);
        g[c * plane + p] = w * inv * (tsum * prob - t[c * plane + p]);
      }
    }
  }
  out.value *= inv;
  return out;
}

Tensor softmax(const Tensor& logits) {
  Tensor out(logits.n, logits.c, logits.h, logits.w);
  const int plane = logits.plane();
  for (int i = 0; i < logits.n; ++i) {
    const double* z = logits.sample(i);
    double* o = out.sample(i);
    for (int p = 0; p < plane; ++p) {
      const double lse = log_sum_exp(z + p, logits.c, plane);
      for (int c = 0; c < logits.c; ++c) o[c * plane + p] = std::exp(z[c * plane + p] - lse);
    }
  }
  return out;
}

Tensor softmax(const Tensor& logits, const Tensor& temperatures) {
  if (temperatures.n != logits.n || temperatures.c != 1 || temperatures.h != logits.h || temperatures.w != logits.w)
    throw ShapeError("softmax: temperature map does not match logits");
  Tensor scaled = logits;
  const int plane = logits.plane();
  for (int i = 0; i < logits.n; ++i) {
    const double* t = temperatures.sample(i);
    double* z = scaled.sample(i);
    for (int p = 0; p < plane; ++p) {
      if (!(t[p] > 0.0)) throw DomainError("softmax: temperature must be > 0");
      for (int c = 0; c < logits.c; ++c) z[c * plane + p] /= t[p];
    }
  }
  return softmax(scaled);
}

std::vector<PseudoLabelBundle> pseudo_labels_from_logits(const Tensor& logits, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw DomainError("pseudo labels: tau must lie in (0, 1)");
  const Tensor probs = softmax(logits);
  const int plane = logits.plane();
  std::vector<PseudoLabelBundle> out(logits.n);
  for (int i = 0; i < logits.n; ++i) {
    auto& b = out[i];
    b.hard = LabelMap(logits.h, logits.w);
    b.confidence.resize(plane);
    const double* pr = probs.sample(i);
    std::size_t confident = 0;
    for (int p = 0; p < plane; ++p) {
      int best = 0;
      for (int c = 1; c < logits.c; ++c)
        if (pr[c * plane + p] > pr[best * plane + p]) best = c;
      b.hard.values[p] = static_cast<std::uint8_t>(best);
      b.confidence[p] = pr[best * plane + p];
      confident += b.confidence[p] >= tau ? 1 : 0;
    }
    b.quality = static_cast<double>(confident) / plane;
  }
  return out;
}

std::vector<PseudoLabelBundle> make_pseudo_labels(const SegNet& teacher, const Tensor& target_images, double tau) {
  return pseudo_labels_from_logits(teacher.forward(target_images), tau);
}

double supervised_loss(const SegNet& student, const SourceBatch& batch) {
  return hard_cross_entropy(student.forward(stack_images(batch.images)), batch.labels).value;
}

double unsupervised_hard_loss(const SegNet& student, const Image& image, const PseudoLabelBundle& bundle) {
  const Image images[] = {image};
  const LabelMap labels[] = {bundle.hard};
  const Tensor logits = student.forward(stack_images(images));
  return bundle.quality * hard_cross_entropy(logits, labels).value;
}

TrainState make_train_state(const SegNetConfig& net, const std::optional<MtnConfig>& mtn, const SelfTrainingConfig& st,
                            long total_iterations, std::uint64_t seed) {
  Rng init(seed);
  TrainState state{SegNet(net, init), SegNet(), std::nullopt, std::nullopt, nn::Sgd(st.lr, st.momentum), 0,
                   total_iterations, Rng(seed ^ 0x9e3779b97f4a7c15ULL)};
  state.teacher = state.student;
  if (mtn) {
    state.mtn.emplace(*mtn, init);
    state.mtn_ema = state.mtn;
  }
  return state;
}

MixedBatch build_mixed_batch(const SourceBatch& source, const TargetBatch& target,
                             std::span<const PseudoLabelBundle> bundles, std::span<const MixMask> masks) {
  const std::size_t n = source.images.size();
  if (target.images.size() != n || bundles.size() != n || masks.size() != n)
    throw ShapeError("build_mixed_batch: batch sizes differ");
  MixedBatch out;
  for (std::size_t i = 0; i < n; ++i) {
    MixedSample m = mix(source.images[i], target.images[i], source.labels[i], bundles[i].hard, masks[i]);
    out.images.push_back(std::move(m.image));
    out.labels.push_back(std::move(m.labels));
    const auto w = mix_weights(masks[i], bundles[i].quality);
    out.weights.insert(out.weights.end(), w.begin(), w.end());
  }
  return out;
}

void check_finite(double value, const char* component, long iteration) {
  if (!std::isfinite(value)) throw TrainingFault(component, iteration);
}

void check_finite(std::span<nn::Param* const> params, const char* component, long iteration) {
  for (const auto* p : params)
    for (double g : p->grad)
      if (!std::isfinite(g)) throw TrainingFault(component, iteration);
}

StepDiagnostics source_only_step(TrainState& state, const SourceBatch& source, const SelfTrainingConfig& config) {
  StepDiagnostics d;
  d.iteration = state.iteration;
  state.student.zero_grad();
  SegNet::Trace trace;
  const Tensor logits = state.student.forward(stack_images(source.images), nn::NormMode::Train, &trace);
  LossValue ls = hard_cross_entropy(logits, source.labels);
  check_finite(ls.value, "L_s", state.iteration);
  state.student.backward(trace, ls.grad);
  const auto params = state.student.parameters();
  check_finite(params, "student gradient", state.iteration);
  state.optimizer.step(params);
  ema_update(state.teacher, state.student, config.teacher_ema_gamma);
  d.l_s = ls.value;
  ++state.iteration;
  return d;
}

StepDiagnostics baseline_step(TrainState& state, const SourceBatch& source, const TargetBatch& target,
                              const SelfTrainingConfig& config) {
  StepDiagnostics d;
  d.iteration = state.iteration;
  const auto bundles = make_pseudo_labels(state.teacher, stack_images(target.images), config.tau);
  std::vector<MixMask> outer;
  for (const auto& labels : source.labels)
    outer.push_back(make_mask_pair(labels, config.mix_kind, config.mix_strategy, state.rng).outer);
  const MixedBatch mixed = build_mixed_batch(source, target, bundles, outer);

  state.student.zero_grad();
  SegNet::Trace trace;
  Tensor logits = state.student.forward(stack_images(source.images), nn::NormMode::Train, &trace);
  const LossValue ls = hard_cross_entropy(logits, source.labels);
  check_finite(ls.value, "L_s", state.iteration);
  state.student.backward(trace, ls.grad);

  logits = state.student.forward(stack_images(mixed.images), nn::NormMode::Train, &trace);
  const LossValue lu = hard_cross_entropy(logits, mixed.labels, mixed.weights);
  check_finite(lu.value, "L_u", state.iteration);
  state.student.backward(trace, lu.grad);

  const auto params = state.student.parameters();
  check_finite(params, "student gradient", state.iteration);
  state.optimizer.step(params);
  ema_update(state.teacher, state.student, config.teacher_ema_gamma);

  d.l_s = ls.value;
  d.l_u_hard = lu.value;
  for (const auto& b : bundles) d.q_mean += b.quality / static_cast<double>(bundles.size());
  ++state.iteration;
  return d;
}

}  // namespace dacal
