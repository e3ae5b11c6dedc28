#pragma once

#include <array>
#include <span>
#include <vector>

#include "dacal/nn.hpp"
#include "dacal/tensor.hpp"

namespace dacal {

struct SegNetConfig {
  int in_channels = 3;
  int classes = 4;
  std::array<int, 3> widths{16, 32, 32};
};

/// Detached copy of a segmentation head (1x1 convolution): weight is classes x features.
struct HeadParams {
  int features = 0;
  int classes = 0;
  std::vector<double> weight;
  std::vector<double> bias;

  std::size_t size() const noexcept { return weight.size() + bias.size(); }
};

/// Applies a head to backbone features: logits = W f + b at every pixel.
Tensor apply_head(const HeadParams& head, const Tensor& features);

/// Tiny encoder-decoder: conv-bn-relu (stride 1), conv-bn-relu (stride 2), conv-bn-relu (stride 1),
/// bilinear x2 upsampling back to input resolution, then a 1x1 classification head.
class SegNet {
 public:
  struct Trace {
    Tensor input, r1, r2, r3, features;
    nn::BatchNorm2d::Cache bn1, bn2, bn3;
  };

  SegNet() = default;
  SegNet(const SegNetConfig& config, Rng& rng);

  /// Train mode uses batch statistics and updates the running estimates.
  Tensor forward(const Tensor& x, nn::NormMode mode, Trace* trace);
  /// Evaluation-statistics forward; never mutates the network.
  Tensor forward(const Tensor& x) const;
  Tensor features(const Tensor& x) const;
  void backward(const Trace& trace, const Tensor& grad_logits);

  HeadParams clone_head() const;
  void set_head(const HeadParams& head);

  std::vector<nn::Param*> parameters();
  std::vector<const nn::Param*> parameters() const;
  std::vector<nn::Param*> head_parameters();
  /// Parameters followed by normalisation buffers; the layout used by EMA and checkpoints.
  std::vector<std::span<double>> state();
  std::vector<std::span<const double>> state() const;
  void zero_grad();

  const SegNetConfig& config() const noexcept { return config_; }
  int classes() const noexcept { return config_.classes; }

 private:
  SegNetConfig config_;
  nn::Conv2d conv1_, conv2_, conv3_, head_;
  nn::BatchNorm2d bn1_, bn2_, bn3_;
};

struct MtnConfig {
  int image_channels = 3;
  int classes = 4;
  int width = 32;
  int depth = 3;  // convolution layers; all but the last are followed by BatchNorm + ReLU
  int kernel = 3;
  double initial_temperature = 1.0;
};

/// Meta Temperature Network: maps [image, logits] to a per-pixel temperature
/// T = min(softplus(raw) + 0.05, 20). Normalisation always uses running statistics.
class Mtn {
 public:
  struct Trace {
    std::vector<Tensor> conv_inputs;
    std::vector<nn::BatchNorm2d::Cache> bn;
    std::vector<Tensor> activations;
    Tensor raw;
  };

  Mtn() = default;
  Mtn(const MtnConfig& config, Rng& rng);

  /// Returns an (n, 1, h, w) temperature tensor. Logits are inputs only; no gradient leaves through them.
  Tensor forward(const Tensor& images, const Tensor& logits, Trace* trace) const;
  /// Same output as forward(); afterwards folds this batch's statistics into the running estimates.
  Tensor forward_and_track(const Tensor& images, const Tensor& logits, Trace* trace);
  /// Accumulates parameter gradients given dL/dT.
  void backward(const Trace& trace, const Tensor& grad_temperature);

  std::vector<nn::Param*> parameters();
  std::vector<const nn::Param*> parameters() const;
  std::vector<std::span<double>> state();
  std::vector<std::span<const double>> state() const;
  void zero_grad();
  std::size_t parameter_count() const;

  nn::Conv2d& output_layer() noexcept { return convs_.back(); }
  const MtnConfig& config() const noexcept { return config_; }

 private:
  MtnConfig config_;
  std::vector<nn::Conv2d> convs_;
  std::vector<nn::BatchNorm2d> norms_;

  Tensor run(const Tensor& images, const Tensor& logits, Trace* trace, bool track);
};

double softplus(double x);
double temperature_from_raw(double raw);
/// d temperature / d raw; zero where the ceiling clamp is active.
double temperature_slope(double raw);

TemperatureMap mtn_forward(const Mtn& mtn, const Image& image, const LogitsMap& logits);

/// target <- gamma * target + (1 - gamma) * source, element-wise.
void ema_update(std::span<const std::span<double>> target, std::span<const std::span<const double>> source,
                double gamma);
void ema_update(SegNet& target, const SegNet& source, double gamma);
void ema_update(Mtn& target, const Mtn& source, double gamma);

}  // namespace dacal
