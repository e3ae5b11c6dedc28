#pragma once

#include <span>
#include <vector>

#include "dacal/tensor.hpp"

namespace dacal::nn {

struct Param {
  std::vector<double> value;
  std::vector<double> grad;

  Param() = default;
  explicit Param(std::size_t size, double fill = 0.0) : value(size, fill), grad(size, 0.0) {}
  std::size_t size() const noexcept { return value.size(); }
  void zero_grad();
};

enum class NormMode { Train, Eval };

/// 2-D convolution with square kernel, zero padding and bias.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding);

  void init_he(Rng& rng);
  Tensor forward(const Tensor& x) const;
  /// Accumulates weight/bias gradients; returns dL/dx when `need_input_grad`.
  Tensor backward(const Tensor& x, const Tensor& grad_out, bool need_input_grad);

  int in_channels() const noexcept { return in_; }
  int out_channels() const noexcept { return out_; }
  int kernel() const noexcept { return k_; }

  Param weight;  // out x in x k x k
  Param bias;

 private:
  int in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  int out_size(int size) const noexcept { return (size + 2 * pad_ - k_) / stride_ + 1; }
};

/// Batch normalisation over (N, H, W) per channel.
class BatchNorm2d {
 public:
  struct Cache {
    NormMode mode = NormMode::Eval;
    Tensor normalized;
    std::vector<double> inv_std;
  };

  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels, double momentum = 0.1, double eps = 1e-5);

  /// Train mode normalises with batch statistics and updates the running estimates.
  Tensor forward(const Tensor& x, NormMode mode, Cache* cache);
  /// Normalises with the running statistics.
  Tensor forward_eval(const Tensor& x, Cache* cache) const;
  /// Folds the batch statistics of `x` into the running estimates without producing output.
  void update_running(const Tensor& x);
  Tensor backward(const Cache& cache, const Tensor& grad_out);

  int channels() const noexcept { return static_cast<int>(gamma.size()); }

  Param gamma;
  Param beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;

 private:
  double momentum_ = 0.1;
  double eps_ = 1e-5;
};

/// out[r] += scale * sum of row r of a row-major rows x cols matrix, summed left to right. Used instead of
/// vectorized reductions, whose order depends on buffer alignment.
void add_row_sums(const double* matrix, int rows, int cols, double scale, double* out);

Tensor relu(const Tensor& x);
/// `output` is the forward result of relu.
Tensor relu_backward(const Tensor& output, const Tensor& grad_out);

/// Bilinear x2 upsampling with half-pixel centres.
Tensor upsample2x(const Tensor& x);
Tensor upsample2x_backward(const Tensor& grad_out);

/// SGD with classical momentum: v <- mu v + g, p <- p - lr v.
class Sgd {
 public:
  Sgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

  void step(std::span<Param* const> params);
  void set_lr(double lr) noexcept { lr_ = lr; }
  double lr() const noexcept { return lr_; }

  std::vector<std::vector<double>>& velocity() noexcept { return velocity_; }
  const std::vector<std::vector<double>>& velocity() const noexcept { return velocity_; }

 private:
  double lr_;
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

}  // namespace dacal::nn
