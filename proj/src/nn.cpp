#include "dacal/nn.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "dacal/errors.hpp"

namespace dacal::nn {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

void Param::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding)
    : weight(static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel),
      bias(static_cast<std::size_t>(out_channels)),
      in_(in_channels),
      out_(out_channels),
      k_(kernel),
      stride_(stride),
      pad_(padding) {}

void Conv2d::init_he(Rng& rng) {
  const double fan_in = static_cast<double>(in_) * k_ * k_;
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
  for (auto& v : weight.value) v = normal(rng);
  std::fill(bias.value.begin(), bias.value.end(), 0.0);
}

namespace {

// Column buffer rows are (channel, ky, kx); columns are output pixels.
void im2col(const double* x, int channels, int h, int w, int k, int stride, int pad, int oh, int ow, double* col) {
  const int cols = oh * ow;
  for (int c = 0; c < channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        double* row = col + static_cast<std::size_t>((c * k + ky) * k + kx) * cols;
        const double* plane = x + static_cast<std::size_t>(c) * h * w;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          double* dst = row + oy * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, 0.0);
            continue;
          }
          const double* src = plane + iy * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - pad;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
          }
        }
      }
}

void col2im(const double* col, int channels, int h, int w, int k, int stride, int pad, int oh, int ow, double* x) {
  const int cols = oh * ow;
  for (int c = 0; c < channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const double* row = col + static_cast<std::size_t>((c * k + ky) * k + kx) * cols;
        double* plane = x + static_cast<std::size_t>(c) * h * w;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          double* dst = plane + iy * w;
          const double* src = row + oy * ow;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace

Tensor Conv2d::forward(const Tensor& x) const {
  if (x.c != in_) throw ShapeError("Conv2d: input channel mismatch");
  const int oh = out_size(x.h), ow = out_size(x.w);
  Tensor y(x.n, out_, oh, ow);
  const int kk = in_ * k_ * k_;
  const int cols = oh * ow;
  ConstMatMap wmat(weight.value.data(), out_, kk);
  Eigen::Map<const Eigen::VectorXd> b(bias.value.data(), out_);
  const bool pointwise = k_ == 1 && stride_ == 1 && pad_ == 0;
  std::vector<double> col(pointwise ? 0 : static_cast<std::size_t>(kk) * cols);
  for (int i = 0; i < x.n; ++i) {
    const double* src = x.sample(i);
    if (!pointwise) {
      im2col(src, in_, x.h, x.w, k_, stride_, pad_, oh, ow, col.data());
      src = col.data();
    }
    MatMap out(y.sample(i), out_, cols);
    out.noalias() = wmat * ConstMatMap(src, kk, cols);
    out.colwise() += b;
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& x, const Tensor& grad_out, bool need_input_grad) {
  const int oh = out_size(x.h), ow = out_size(x.w);
  if (grad_out.c != out_ || grad_out.h != oh || grad_out.w != ow || grad_out.n != x.n)
    throw ShapeError("Conv2d::backward: gradient shape mismatch");
  const int kk = in_ * k_ * k_;
  const int cols = oh * ow;
  ConstMatMap wmat(weight.value.data(), out_, kk);
  MatMap wgrad(weight.grad.data(), out_, kk);
  const bool pointwise = k_ == 1 && stride_ == 1 && pad_ == 0;
  std::vector<double> col(pointwise ? 0 : static_cast<std::size_t>(kk) * cols);
  std::vector<double> dcol(static_cast<std::size_t>(kk) * cols);
  Tensor dx;
  if (need_input_grad) dx = Tensor(x.n, x.c, x.h, x.w);
  for (int i = 0; i < x.n; ++i) {
    const double* src = x.sample(i);
    if (!pointwise) {
      im2col(src, in_, x.h, x.w, k_, stride_, pad_, oh, ow, col.data());
      src = col.data();
    }
    ConstMatMap dy(grad_out.sample(i), out_, cols);
    wgrad.noalias() += dy * ConstMatMap(src, kk, cols).transpose();
    add_row_sums(grad_out.sample(i), out_, cols, 1.0, bias.grad.data());
    if (need_input_grad) {
      if (pointwise) {
        MatMap(dx.sample(i), kk, cols).noalias() = wmat.transpose() * dy;
      } else {
        MatMap(dcol.data(), kk, cols).noalias() = wmat.transpose() * dy;
        col2im(dcol.data(), in_, x.h, x.w, k_, stride_, pad_, oh, ow, dx.sample(i));
      }
    }
  }
  return dx;
}

BatchNorm2d::BatchNorm2d(int channels, double momentum, double eps)
    : gamma(static_cast<std::size_t>(channels), 1.0),
      beta(static_cast<std::size_t>(channels), 0.0),
      running_mean(static_cast<std::size_t>(channels), 0.0),
      running_var(static_cast<std::size_t>(channels), 1.0),
      momentum_(momentum),
      eps_(eps) {}

namespace {

void channel_moments(const Tensor& x, int ch, double& mean, double& var) {
  const std::size_t m = static_cast<std::size_t>(x.n) * x.plane();
  double s = 0.0;
  for (int i = 0; i < x.n; ++i) {
    const double* p = x.channel(i, ch);
    for (int j = 0; j < x.plane(); ++j) s += p[j];
  }
  mean = s / static_cast<double>(m);
  double v = 0.0;
  for (int i = 0; i < x.n; ++i) {
    const double* p = x.channel(i, ch);
    for (int j = 0; j < x.plane(); ++j) v += (p[j] - mean) * (p[j] - mean);
  }
  var = v / static_cast<double>(m);
}

}  // namespace

void BatchNorm2d::update_running(const Tensor& x) {
  const double m = static_cast<double>(x.n) * x.plane();
  for (int ch = 0; ch < x.c; ++ch) {
    double mean = 0.0, var = 0.0;
    channel_moments(x, ch, mean, var);
    const double unbiased = m > 1.0 ? var * m / (m - 1.0) : var;
    running_mean[ch] = (1.0 - momentum_) * running_mean[ch] + momentum_ * mean;
    running_var[ch] = (1.0 - momentum_) * running_var[ch] + momentum_ * unbiased;
  }
}

Tensor BatchNorm2d::forward(const Tensor& x, NormMode mode, Cache* cache) {
  if (mode == NormMode::Eval) return forward_eval(x, cache);
  if (x.c != channels()) throw ShapeError("BatchNorm2d: channel mismatch");
  Tensor y(x.n, x.c, x.h, x.w);
  Tensor xhat(x.n, x.c, x.h, x.w);
  std::vector<double> inv_std(x.c);
  const double m = static_cast<double>(x.n) * x.plane();
  for (int ch = 0; ch < x.c; ++ch) {
    double mean = 0.0, var = 0.0;
    channel_moments(x, ch, mean, var);
    inv_std[ch] = 1.0 / std::sqrt(var + eps_);
    for (int i = 0; i < x.n; ++i) {
      const double* src = x.channel(i, ch);
      double* nh = xhat.channel(i, ch);
      double* dst = y.channel(i, ch);
      for (int j = 0; j < x.plane(); ++j) {
        nh[j] = (src[j] - mean) * inv_std[ch];
        dst[j] = gamma.value[ch] * nh[j] + beta.value[ch];
      }
    }
    const double unbiased = m > 1.0 ? var * m / (m - 1.0) : var;
    running_mean[ch] = (1.0 - momentum_) * running_mean[ch] + momentum_ * mean;
    running_var[ch] = (1.0 - momentum_) * running_var[ch] + momentum_ * unbiased;
  }
  if (cache) {
    cache->mode = NormMode::Train;
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

Tensor BatchNorm2d::forward_eval(const Tensor& x, Cache* cache) const {
  if (x.c != channels()) throw ShapeError("BatchNorm2d: channel mismatch");
  Tensor y(x.n, x.c, x.h, x.w);
  std::vector<double> inv_std(x.c);
  for (int ch = 0; ch < x.c; ++ch) {
    inv_std[ch] = 1.0 / std::sqrt(running_var[ch] + eps_);
    const double scale = gamma.value[ch] * inv_std[ch];
    const double shift = beta.value[ch] - running_mean[ch] * scale;
    for (int i = 0; i < x.n; ++i) {
      const double* src = x.channel(i, ch);
      double* dst = y.channel(i, ch);
      for (int j = 0; j < x.plane(); ++j) dst[j] = src[j] * scale + shift;
    }
  }
  if (cache) {
    cache->mode = NormMode::Eval;
    Tensor xhat(x.n, x.c, x.h, x.w);
    for (int ch = 0; ch < x.c; ++ch)
      for (int i = 0; i < x.n; ++i) {
        const double* src = x.channel(i, ch);
        double* nh = xhat.channel(i, ch);
        for (int j = 0; j < x.plane(); ++j) nh[j] = (src[j] - running_mean[ch]) * inv_std[ch];
      }
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

Tensor BatchNorm2d::backward(const Cache& cache, const Tensor& grad_out) {
  const Tensor& xhat = cache.normalized;
  if (!xhat.same_shape(grad_out)) throw ShapeError("BatchNorm2d::backward: gradient shape mismatch");
  Tensor dx(grad_out.n, grad_out.c, grad_out.h, grad_out.w);
  const double m = static_cast<double>(grad_out.n) * grad_out.plane();
  for (int ch = 0; ch < grad_out.c; ++ch) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int i = 0; i < grad_out.n; ++i) {
      const double* dy = grad_out.channel(i, ch);
      const double* nh = xhat.channel(i, ch);
      for (int j = 0; j < grad_out.plane(); ++j) {
        sum_dy += dy[j];
        sum_dy_xhat += dy[j] * nh[j];
      }
    }
    gamma.grad[ch] += sum_dy_xhat;
    beta.grad[ch] += sum_dy;
    const double g = gamma.value[ch] * cache.inv_std[ch];
    for (int i = 0; i < grad_out.n; ++i) {
      const double* dy = grad_out.channel(i, ch);
      const double* nh = xhat.channel(i, ch);
      double* out = dx.channel(i, ch);
      if (cache.mode == NormMode::Eval) {
        for (int j = 0; j < grad_out.plane(); ++j) out[j] = g * dy[j];
      } else {
        for (int j = 0; j < grad_out.plane(); ++j)
          out[j] = g * (dy[j] - sum_dy / m - nh[j] * sum_dy_xhat / m);
      }
    }
  }
  return dx;
}

void add_row_sums(const double* matrix, int rows, int cols, double scale, double* out) {
  for (int r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int c = 0; c < cols; ++c) s += matrix[static_cast<std::size_t>(r) * cols + c];
    out[r] += scale * s;
  }
}

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.data) v = v < 0.0 ? 0.0 : v;  // NaN passes through
  return y;
}

Tensor relu_backward(const Tensor& output, const Tensor& grad_out) {
  Tensor dx = grad_out;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (!(output.data[i] > 0.0)) dx.data[i] = 0.0;
  return dx;
}

namespace {

struct Tap {
  int lo, hi;
  double frac;
};

// Source taps for one output coordinate of a x2 half-pixel upsample.
Tap upsample_tap(int out_index, int in_size) {
  double src = (out_index + 0.5) / 2.0 - 0.5;
  if (src < 0.0) src = 0.0;
  const int lo = std::min(static_cast<int>(src), in_size - 1);
  const int hi = std::min(lo + 1, in_size - 1);
  return {lo, hi, src - lo};
}

}  // namespace

Tensor upsample2x(const Tensor& x) {
  Tensor y(x.n, x.c, x.h * 2, x.w * 2);
  std::vector<Tap> ty(y.h), tx(y.w);
  for (int i = 0; i < y.h; ++i) ty[i] = upsample_tap(i, x.h);
  for (int i = 0; i < y.w; ++i) tx[i] = upsample_tap(i, x.w);
  for (int i = 0; i < x.n; ++i)
    for (int ch = 0; ch < x.c; ++ch) {
      const double* src = x.channel(i, ch);
      double* dst = y.channel(i, ch);
      for (int oy = 0; oy < y.h; ++oy) {
        const Tap& a = ty[oy];
        for (int ox = 0; ox < y.w; ++ox) {
          const Tap& b = tx[ox];
          const double top = src[a.lo * x.w + b.lo] * (1.0 - b.frac) + src[a.lo * x.w + b.hi] * b.frac;
          const double bot = src[a.hi * x.w + b.lo] * (1.0 - b.frac) + src[a.hi * x.w + b.hi] * b.frac;
          dst[oy * y.w + ox] = top * (1.0 - a.frac) + bot * a.frac;
        }
      }
    }
  return y;
}

Tensor upsample2x_backward(const Tensor& grad_out) {
  Tensor dx(grad_out.n, grad_out.c, grad_out.h / 2, grad_out.w / 2);
  std::vector<Tap> ty(grad_out.h), tx(grad_out.w);
  for (int i = 0; i < grad_out.h; ++i) ty[i] = upsample_tap(i, dx.h);
  for (int i = 0; i < grad_out.w; ++i) tx[i] = upsample_tap(i, dx.w);
  for (int i = 0; i < dx.n; ++i)
    for (int ch = 0; ch < dx.c; ++ch) {
      const double* g = grad_out.channel(i, ch);
      double* dst = dx.channel(i, ch);
      for (int oy = 0; oy < grad_out.h; ++oy) {
        const Tap& a = ty[oy];
        for (int ox = 0; ox < grad_out.w; ++ox) {
          const Tap& b = tx[ox];
          const double v = g[oy * grad_out.w + ox];
          dst[a.lo * dx.w + b.lo] += v * (1.0 - a.frac) * (1.0 - b.frac);
          dst[a.lo * dx.w + b.hi] += v * (1.0 - a.frac) * b.frac;
          dst[a.hi * dx.w + b.lo] += v * a.frac * (1.0 - b.frac);
          dst[a.hi * dx.w + b.hi] += v * a.frac * b.frac;
        }
      }
    }
  return dx;
}

void Sgd::step(std::span<Param* const> params) {
  if (velocity_.size() != params.size()) {
    velocity_.clear();
    for (const Param* p : params) velocity_.emplace_back(p->size(), 0.0);
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    Param& p = *params[k];
    auto& v = velocity_[k];
    if (v.size() != p.size()) throw ShapeError("Sgd: parameter layout changed");
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = momentum_ * v[i] + p.grad[i];
      p.value[i] -= lr_ * v[i];
    }
  }
}

}  // namespace dacal::nn
