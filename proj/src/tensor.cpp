#include "dacal/tensor.hpp"

#include <algorithm>

#include "dacal/errors.hpp"

namespace dacal {

Tensor::Tensor(int n_, int c_, int h_, int w_, double fill)
    : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

Image::Image(int h, int w, double fill)
    : height(h), width(w), values(static_cast<std::size_t>(kChannels) * h * w, fill) {}

LabelMap::LabelMap(int h, int w, std::uint8_t fill)
    : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

ClassMap::ClassMap(int c, int h, int w, double fill)
    : classes(c), height(h), width(w), values(static_cast<std::size_t>(c) * h * w, fill) {}

TemperatureMap::TemperatureMap(int h, int w, double fill)
    : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

Tensor stack_images(std::span<const Image> images) {
  if (images.empty()) return {};
  const Image& first = images.front();
  Tensor out(static_cast<int>(images.size()), Image::kChannels, first.height, first.width);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].height != first.height || images[i].width != first.width)
      throw ShapeError("stack_images: images differ in size");
    std::copy(images[i].values.begin(), images[i].values.end(), out.sample(static_cast<int>(i)));
  }
  return out;
}

Tensor stack_logits(std::span<const LogitsMap> logits) {
  if (logits.empty()) return {};
  const LogitsMap& first = logits.front();
  Tensor out(static_cast<int>(logits.size()), first.classes, first.height, first.width);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const auto& l = logits[i];
    if (l.classes != first.classes || l.height != first.height || l.width != first.width)
      throw ShapeError("stack_logits: maps differ in shape");
    std::copy(l.values.begin(), l.values.end(), out.sample(static_cast<int>(i)));
  }
  return out;
}

Image image_at(const Tensor& batch, int index) {
  if (batch.c != Image::kChannels) throw ShapeError("image_at: tensor is not 3-channel");
  Image img(batch.h, batch.w);
  std::copy_n(batch.sample(index), img.values.size(), img.values.begin());
  return img;
}

LogitsMap logits_at(const Tensor& batch, int index) {
  LogitsMap out(batch.c, batch.h, batch.w);
  std::copy_n(batch.sample(index), out.values.size(), out.values.begin());
  return out;
}

TemperatureMap temperatures_at(const Tensor& batch, int index) {
  if (batch.c != 1) throw ShapeError("temperatures_at: tensor is not 1-channel");
  TemperatureMap out(batch.h, batch.w);
  std::copy_n(batch.sample(index), out.values.size(), out.values.begin());
  return out;
}

Tensor concat_batch(const Tensor& a, const Tensor& b) {
  if (a.c != b.c || a.h != b.h || a.w != b.w) throw ShapeError("concat_batch: shapes differ");
  Tensor out(a.n + b.n, a.c, a.h, a.w);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

int argmax_at(const ClassMap& map, int pixel) {
  int best = 0;
  double best_value = map.at(0, pixel);
  for (int c = 1; c < map.classes; ++c) {
    const double v = map.at(c, pixel);
    if (v > best_value) {
      best_value = v;
      best = c;
    }
  }
  return best;
}

LabelMap argmax_labels(const ClassMap& map) {
  LabelMap out(map.height, map.width);
  for (int p = 0; p < map.pixels(); ++p) out.values[p] = static_cast<std::uint8_t>(argmax_at(map, p));
  return out;
}

}  // namespace dacal
