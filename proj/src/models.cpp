#include "dacal/models.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "dacal/calibrators.hpp"
#include "dacal/errors.hpp"

namespace dacal {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Tensor apply_head(const HeadParams& head, const Tensor& features) {
  if (features.c != head.features) throw ShapeError("apply_head: feature width mismatch");
  Tensor out(features.n, head.classes, features.h, features.w);
  Eigen::Map<const RowMatrix> w(head.weight.data(), head.classes, head.features);
  Eigen::Map<const Eigen::VectorXd> b(head.bias.data(), head.classes);
  for (int i = 0; i < features.n; ++i) {
    Eigen::Map<RowMatrix> o(out.sample(i), head.classes, features.plane());
    o.noalias() = w * Eigen::Map<const RowMatrix>(features.sample(i), head.features, features.plane());
    o.colwise() += b;
  }
  return out;
}

SegNet::SegNet(const SegNetConfig& config, Rng& rng)
    : config_(config),
      conv1_(config.in_channels, config.widths[0], 3, 1, 1),
      conv2_(config.widths[0], config.widths[1], 3, 2, 1),
      conv3_(config.widths[1], config.widths[2], 3, 1, 1),
      head_(config.widths[2], config.classes, 1, 1, 0),
      bn1_(config.widths[0]),
      bn2_(config.widths[1]),
      bn3_(config.widths[2]) {
  if (config.classes < 2) throw ConfigError("SegNet: need at least two classes");
  conv1_.init_he(rng);
  conv2_.init_he(rng);
  conv3_.init_he(rng);
  std::normal_distribution<double> normal(0.0, 0.01);
  for (auto& v : head_.weight.value) v = normal(rng);
}

Tensor SegNet::forward(const Tensor& x, nn::NormMode mode, Trace* trace) {
  if (x.h % 2 != 0 || x.w % 2 != 0) throw ShapeError("SegNet: input size must be even");
  Trace local;
  Trace& t = trace ? *trace : local;
  t.input = x;
  t.r1 = nn::relu(bn1_.forward(conv1_.forward(x), mode, &t.bn1));
  t.r2 = nn::relu(bn2_.forward(conv2_.forward(t.r1), mode, &t.bn2));
  t.r3 = nn::relu(bn3_.forward(conv3_.forward(t.r2), mode, &t.bn3));
  t.features = nn::upsample2x(t.r3);
  return head_.forward(t.features);
}

Tensor SegNet::features(const Tensor& x) const {
  if (x.h % 2 != 0 || x.w % 2 != 0) throw ShapeError("SegNet: input size must be even");
  Tensor r = nn::relu(bn1_.forward_eval(conv1_.forward(x), nullptr));
  r = nn::relu(bn2_.forward_eval(conv2_.forward(r), nullptr));
  r = nn::relu(bn3_.forward_eval(conv3_.forward(r), nullptr));
  return nn::upsample2x(r);
}

Tensor SegNet::forward(const Tensor& x) const { return head_.forward(features(x)); }

void SegNet::backward(const Trace& t, const Tensor& grad_logits) {
  Tensor g = head_.backward(t.features, grad_logits, true);
  g = nn::upsample2x_backward(g);
  g = conv3_.backward(t.r2, bn3_.backward(t.bn3, nn::relu_backward(t.r3, g)), true);
  g = conv2_.backward(t.r1, bn2_.backward(t.bn2, nn::relu_backward(t.r2, g)), true);
  conv1_.backward(t.input, bn1_.backward(t.bn1, nn::relu_backward(t.r1, g)), false);
}

HeadParams SegNet::clone_head() const {
  return {head_.in_channels(), head_.out_channels(), head_.weight.value, head_.bias.value};
}

void SegNet::set_head(const HeadParams& head) {
  if (head.weight.size() != head_.weight.size() || head.bias.size() != head_.bias.size())
    throw ShapeError("SegNet::set_head: head shape mismatch");
  head_.weight.value = head.weight;
  head_.bias.value = head.bias;
}

std::vector<nn::Param*> SegNet::parameters() {
  return {&conv1_.weight, &conv1_.bias, &bn1_.gamma, &bn1_.beta, &conv2_.weight, &conv2_.bias, &bn2_.gamma,
          &bn2_.beta,     &conv3_.weight, &conv3_.bias, &bn3_.gamma, &bn3_.beta, &head_.weight, &head_.bias};
}

std::vector<const nn::Param*> SegNet::parameters() const {
  auto mutable_params = const_cast<SegNet*>(this)->parameters();
  return {mutable_params.begin(), mutable_params.end()};
}

std::vector<nn::Param*> SegNet::head_parameters() { return {&head_.weight, &head_.bias}; }

std::vector<std::span<double>> SegNet::state() {
  std::vector<std::span<double>> out;
  for (auto* p : parameters()) out.emplace_back(p->value);
  for (auto* bn : {&bn1_, &bn2_, &bn3_}) {
    out.emplace_back(bn->running_mean);
    out.emplace_back(bn->running_var);
  }
  return out;
}

std::vector<std::span<const double>> SegNet::state() const {
  auto spans = const_cast<SegNet*>(this)->state();
  return {spans.begin(), spans.end()};
}

void SegNet::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double temperature_from_raw(double raw) { return std::min(softplus(raw) + kMinTemperature, kMaxTemperature); }

double temperature_slope(double raw) {
  if (softplus(raw) + kMinTemperature >= kMaxTemperature) return 0.0;
  return 1.0 / (1.0 + std::exp(-raw));
}

Mtn::Mtn(const MtnConfig& config, Rng& rng) : config_(config) {
  if (config.depth < 1) throw ConfigError("Mtn: depth must be >= 1");
  if (config.kernel < 1 || config.kernel % 2 == 0) throw ConfigError("Mtn: kernel must be odd");
  if (!(config.initial_temperature > kMinTemperature && config.initial_temperature < kMaxTemperature))
    throw ConfigError("Mtn: initial temperature outside (0.05, 20)");
  const int pad = config.kernel / 2;
  int in = config.image_channels + config.classes;
  for (int l = 0; l < config.depth; ++l) {
    const bool last = l + 1 == config.depth;
    const int out = last ? 1 : config.width;
    convs_.emplace_back(in, out, config.kernel, 1, pad);
    if (!last) {
      convs_.back().init_he(rng);
      norms_.emplace_back(out);
    }
    in = out;
  }
  // Starts as a constant map at the requested temperature.
  auto& head = convs_.back();
  std::fill(head.weight.value.begin(), head.weight.value.end(), 0.0);
  head.bias.value[0] = std::log(std::expm1(config.initial_temperature - kMinTemperature));
}

Tensor Mtn::run(const Tensor& images, const Tensor& logits, Trace* trace, bool track) {
  if (images.n != logits.n || images.h != logits.h || images.w != logits.w)
    throw ShapeError("Mtn: image and logits are not spatially aligned");
  if (images.c != config_.image_channels || logits.c != config_.classes)
    throw ShapeError("Mtn: unexpected channel counts");
  Tensor x(images.n, images.c + logits.c, images.h, images.w);
  for (int i = 0; i < images.n; ++i) {
    std::copy_n(images.sample(i), static_cast<std::size_t>(images.c) * images.plane(), x.sample(i));
    std::copy_n(logits.sample(i), static_cast<std::size_t>(logits.c) * logits.plane(), x.channel(i, images.c));
  }
  if (trace) *trace = Trace{};
  for (std::size_t l = 0; l < convs_.size(); ++l) {
    if (trace) trace->conv_inputs.push_back(x);
    Tensor y = convs_[l].forward(x);
    if (l + 1 == convs_.size()) {
      x = std::move(y);
      break;
    }
    nn::BatchNorm2d::Cache cache;
    Tensor normed = norms_[l].forward_eval(y, trace ? &cache : nullptr);
    if (track) norms_[l].update_running(y);
    x = nn::relu(normed);
    if (trace) {
      trace->bn.push_back(std::move(cache));
      trace->activations.push_back(x);
    }
  }
  Tensor temps(x.n, 1, x.h, x.w);
  for (std::size_t i = 0; i < x.size(); ++i) temps.data[i] = temperature_from_raw(x.data[i]);
  if (trace) trace->raw = std::move(x);
  return temps;
}

Tensor Mtn::forward(const Tensor& images, const Tensor& logits, Trace* trace) const {
  return const_cast<Mtn*>(this)->run(images, logits, trace, false);
}

Tensor Mtn::forward_and_track(const Tensor& images, const Tensor& logits, Trace* trace) {
  return run(images, logits, trace, true);
}

void Mtn::backward(const Trace& trace, const Tensor& grad_temperature) {
  if (!trace.raw.same_shape(grad_temperature)) throw ShapeError("Mtn::backward: gradient shape mismatch");
  Tensor g = grad_temperature;
  for (std::size_t i = 0; i < g.size(); ++i) g.data[i] *= temperature_slope(trace.raw.data[i]);
  for (std::size_t l = convs_.size(); l-- > 0;) {
    const bool first = l == 0;
    g = convs_[l].backward(trace.conv_inputs[l], g, !first);
    if (first) break;
    g = norms_[l - 1].backward(trace.bn[l - 1], nn::relu_backward(trace.activations[l - 1], g));
  }
}

std::vector<nn::Param*> Mtn::parameters() {
  std::vector<nn::Param*> out;
  for (std::size_t l = 0; l < convs_.size(); ++l) {
    out.push_back(&convs_[l].weight);
    out.push_back(&convs_[l].bias);
    if (l < norms_.size()) {
      out.push_back(&norms_[l].gamma);
      out.push_back(&norms_[l].beta);
    }
  }
  return out;
}

std::vector<const nn::Param*> Mtn::parameters() const {
  auto mutable_params = const_cast<Mtn*>(this)->parameters();
  return {mutable_params.begin(), mutable_params.end()};
}

std::vector<std::span<double>> Mtn::state() {
  std::vector<std::span<double>> out;
  for (auto* p : parameters()) out.emplace_back(p->value);
  for (auto& bn : norms_) {
    out.emplace_back(bn.running_mean);
    out.emplace_back(bn.running_var);
  }
  return out;
}

std::vector<std::span<const double>> Mtn::state() const {
  auto spans = const_cast<Mtn*>(this)->state();
  return {spans.begin(), spans.end()};
}

void Mtn::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

std::size_t Mtn::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->size();
  return n;
}

TemperatureMap mtn_forward(const Mtn& mtn, const Image& image, const LogitsMap& logits) {
  if (image.height != logits.height || image.width != logits.width)
    throw ShapeError("mtn_forward: image and logits are not spatially aligned");
  const Image images[] = {image};
  const LogitsMap maps[] = {logits};
  return temperatures_at(mtn.forward(stack_images(images), stack_logits(maps), nullptr), 0);
}

void ema_update(std::span<const std::span<double>> target, std::span<const std::span<const double>> source,
                double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw DomainError("ema_update: gamma must lie in [0, 1]");
  if (target.size() != source.size()) throw ShapeError("ema_update: parameter structures differ");
  for (std::size_t k = 0; k < target.size(); ++k)
    if (target[k].size() != source[k].size()) throw ShapeError("ema_update: parameter structures differ");
  for (std::size_t k = 0; k < target.size(); ++k)
    for (std::size_t i = 0; i < target[k].size(); ++i)
      target[k][i] = gamma * target[k][i] + (1.0 - gamma) * source[k][i];
}

void ema_update(SegNet& target, const SegNet& source, double gamma) {
  ema_update(target.state(), source.state(), gamma);
}

void ema_update(Mtn& target, const Mtn& source, double gamma) { ema_update(target.state(), source.state(), gamma); }

}  // namespace dacal
