#include "dacal/calibrators.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <vector>

#include "dacal/errors.hpp"

namespace dacal {

GlobalTemperature::GlobalTemperature(double value) : value_(value) {
  if (!(value > 0.0) || !std::isfinite(value)) throw DomainError("temperature must be positive and finite");
}

namespace {

// Softmax of one pixel's logits divided by `temperature`, written into `out`.
void pixel_softmax(const ClassMap& logits, int pixel, double temperature, ClassMap& out) {
  double mx = -INFINITY;
  for (int c = 0; c < logits.classes; ++c) mx = std::max(mx, logits.at(c, pixel) / temperature);
  double sum = 0.0;
  for (int c = 0; c < logits.classes; ++c) {
    const double e = std::exp(logits.at(c, pixel) / temperature - mx);
    out.at(c, pixel) = e;
    sum += e;
  }
  for (int c = 0; c < logits.classes; ++c) out.at(c, pixel) /= sum;
}

}  // namespace

ProbMap softmax(const LogitsMap& logits) { return apply_temperature(logits, 1.0); }

ProbMap apply_temperature(const LogitsMap& logits, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("apply_temperature: temperature must be > 0");
  ProbMap out(logits.classes, logits.height, logits.width);
  for (int p = 0; p < logits.pixels(); ++p) pixel_softmax(logits, p, temperature, out);
  return out;
}

ProbMap apply_temperature(const LogitsMap& logits, const TemperatureMap& temperature) {
  if (temperature.height != logits.height || temperature.width != logits.width)
    throw ShapeError("apply_temperature: temperature map does not match logits");
  ProbMap out(logits.classes, logits.height, logits.width);
  for (int p = 0; p < logits.pixels(); ++p) {
    const double t = temperature.values[p];
    if (!(t > 0.0)) throw DomainError("apply_temperature: temperature must be > 0");
    pixel_softmax(logits, p, t, out);
  }
  return out;
}

namespace {

// Labelled pixels gathered into a dense row-per-pixel layout for repeated NLL evaluation.
struct FitSet {
  int classes = 0;
  std::vector<double> logits;
  std::vector<int> labels;
};

FitSet gather(std::span<const LogitsMap> logits, std::span<const LabelMap> labels) {
  if (logits.size() != labels.size()) throw ShapeError("temperature fit: batch sizes differ");
  FitSet set;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const auto& z = logits[i];
    const auto& y = labels[i];
    if (z.height != y.height || z.width != y.width) throw ShapeError("temperature fit: shape mismatch");
    if (set.classes == 0) set.classes = z.classes;
    if (z.classes != set.classes) throw ShapeError("temperature fit: class counts differ");
    for (int p = 0; p < z.pixels(); ++p) {
      if (y.values[p] == kIgnoreLabel) continue;
      if (y.values[p] >= z.classes) throw ShapeError("temperature fit: label exceeds class count");
      for (int c = 0; c < z.classes; ++c) set.logits.push_back(z.at(c, p));
      set.labels.push_back(y.values[p]);
    }
  }
  if (set.labels.empty()) throw EmptySampleError("temperature fit: no labelled pixels");
  return set;
}

double fit_set_nll(const FitSet& set, double temperature) {
  const int k = set.classes;
  double total = 0.0;
  for (std::size_t i = 0; i < set.labels.size(); ++i) {
    const double* z = set.logits.data() + i * k;
    double mx = -INFINITY;
    for (int c = 0; c < k; ++c) mx = std::max(mx, z[c] / temperature);
    double sum = 0.0;
    for (int c = 0; c < k; ++c) sum += std::exp(z[c] / temperature - mx);
    total += mx + std::log(sum) - z[set.labels[i]] / temperature;
  }
  return total / static_cast<double>(set.labels.size());
}

}  // namespace

double temperature_nll(std::span<const LogitsMap> logits, std::span<const LabelMap> labels, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("temperature_nll: temperature must be > 0");
  return fit_set_nll(gather(logits, labels), temperature);
}

GlobalTemperature fit_global_temperature(std::span<const LogitsMap> logits, std::span<const LabelMap> labels) {
  const FitSet set = gather(logits, labels);
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double lo = std::log(kMinTemperature);
  double hi = std::log(kMaxTemperature);
  double a = hi - inv_phi * (hi - lo);
  double b = lo + inv_phi * (hi - lo);
  double fa = fit_set_nll(set, std::exp(a));
  double fb = fit_set_nll(set, std::exp(b));
  while (std::exp(hi) - std::exp(lo) >= 1e-4) {
    if (fa <= fb) {
      hi = b;
      b = a;
      fb = fa;
      a = hi - inv_phi * (hi - lo);
      fa = fit_set_nll(set, std::exp(a));
    } else {
      lo = a;
      a = b;
      fa = fb;
      b = lo + inv_phi * (hi - lo);
      fb = fit_set_nll(set, std::exp(b));
    }
  }
  return GlobalTemperature(std::exp(0.5 * (lo + hi)));
}

ProbMap ensemble_probs(std::span<const LogitsMap> members) {
  if (members.empty()) throw InsufficientDataError("ensemble_probs: no members");
  const auto& first = members.front();
  LogitsMap mean(first.classes, first.height, first.width);
  for (const auto& m : members) {
    if (m.classes != first.classes || m.height != first.height || m.width != first.width)
      throw ShapeError("ensemble_probs: member shapes differ");
    for (std::size_t i = 0; i < mean.values.size(); ++i) mean.values[i] += m.values[i];
  }
  const double inv = 1.0 / static_cast<double>(members.size());
  for (auto& v : mean.values) v *= inv;
  return softmax(mean);
}

namespace {

double sample_beta(double shape, Rng& rng) {
  std::gamma_distribution<double> gamma(shape, 1.0);
  const double x = gamma(rng);
  const double y = gamma(rng);
  return (x + y) > 0.0 ? x / (x + y) : 0.5;
}

}  // namespace

GlobalTemperature pseudocal_fit(const LogitsFn& model, std::span<const Image> target_images, Rng& rng,
                                const PseudoCalOptions& options) {
  if (target_images.size() < 2) throw InsufficientDataError("pseudocal_fit: need at least two images");
  std::vector<std::size_t> order(target_images.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<LogitsMap> logits;
  std::vector<LabelMap> pseudo;
  for (std::size_t k = 0; k + 1 < order.size(); k += 2) {
    const Image& a = target_images[order[k]];
    const Image& b = target_images[order[k + 1]];
    if (a.height != b.height || a.width != b.width) throw ShapeError("pseudocal_fit: image sizes differ");
    double lambda = options.fixed_lambda ? *options.fixed_lambda : sample_beta(options.beta_shape, rng);
    const bool a_dominant = lambda >= 0.5;
    if (!a_dominant) lambda = 1.0 - lambda;
    const Image& major = a_dominant ? a : b;
    const Image& minor = a_dominant ? b : a;
    Image mixed(a.height, a.width);
    for (std::size_t i = 0; i < mixed.values.size(); ++i)
      mixed.values[i] = lambda * major.values[i] + (1.0 - lambda) * minor.values[i];
    pseudo.push_back(argmax_labels(model(major)));
    logits.push_back(model(mixed));
  }
  return fit_global_temperature(logits, pseudo);
}

void save_temperature_record(const TemperatureRecord& record, const std::string& path) {
  nlohmann::json j{{"version", TemperatureRecord::kVersion},
                   {"method", record.method},
                   {"temperature", record.temperature},
                   {"fingerprint", record.fingerprint},
                   {"seed", record.seed}};
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << '\n';
}

TemperatureRecord load_temperature_record(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.at("version").get<int>() != TemperatureRecord::kVersion)
      throw IoError("unsupported temperature record version in " + path);
    return {j.at("method").get<std::string>(), j.at("temperature").get<double>(),
            j.at("fingerprint").get<std::string>(), j.at("seed").get<std::uint64_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed temperature record " + path + ": " + e.what());
  }
}

}  // namespace dacal
