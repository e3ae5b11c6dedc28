#include "dacal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <numeric>
#include <sstream>
#include <string>

#include "dacal/errors.hpp"

namespace dacal {

std::size_t ReliabilityBins::total() const noexcept {
  return std::accumulate(count.begin(), count.end(), std::size_t{0});
}

void check_same_shape(const ClassMap& probs, const LabelMap& labels) {
  if (probs.height != labels.height || probs.width != labels.width)
    throw ShapeError("probability map and label map differ in spatial shape");
}

std::vector<PixelSample> sample_pixels(const ProbMap& probs, const LabelMap& labels, std::size_t n, Rng& rng) {
  check_same_shape(probs, labels);
  if (n == 0) throw DomainError("sample_pixels: n must be >= 1");

  std::vector<int> candidates;
  candidates.reserve(labels.values.size());
  for (int p = 0; p < labels.pixels(); ++p)
    if (labels.values[p] != kIgnoreLabel) candidates.push_back(p);
  if (candidates.empty()) throw EmptySampleError("sample_pixels: every pixel is ignored");

  // Partial Fisher-Yates: the first `take` slots end up a uniform sample without replacement.
  const std::size_t take = std::min(n, candidates.size());
  for (std::size_t i = 0; i < take; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, candidates.size() - 1);
    std::swap(candidates[i], candidates[pick(rng)]);
  }

  std::vector<PixelSample> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) {
    const int p = candidates[i];
    const int pred = argmax_at(probs, p);
    out.push_back({probs.at(pred, p), pred, labels.values[p], p});
  }
  return out;
}

ReliabilityBins bin_samples(std::span<const BinSample> samples, int bins) {
  if (bins < 1) throw DomainError("bin_samples: bin count must be >= 1");
  ReliabilityBins out;
  out.edges.resize(bins + 1);
  for (int m = 0; m <= bins; ++m) out.edges[m] = static_cast<double>(m) / bins;
  out.count.assign(bins, 0);
  out.conf_sum.assign(bins, 0.0);
  out.acc_sum.assign(bins, 0.0);
  for (const auto& s : samples) {
    if (!(s.confidence >= 0.0 && s.confidence <= 1.0))
      throw DomainError("bin_samples: confidence outside [0, 1]");
    const int m = std::min(static_cast<int>(std::floor(s.confidence * bins)), bins - 1);
    ++out.count[m];
    out.conf_sum[m] += s.confidence;
    out.acc_sum[m] += s.correct ? 1.0 : 0.0;
  }
  return out;
}

double ece(const ReliabilityBins& bins) {
  const std::size_t n = bins.total();
  if (n == 0) throw EmptySampleError("ece: no samples");
  double total = 0.0;
  for (int m = 0; m < bins.bins(); ++m) {
    if (bins.count[m] == 0) continue;
    const double cnt = static_cast<double>(bins.count[m]);
    total += (cnt / static_cast<double>(n)) * std::abs(bins.acc_sum[m] / cnt - bins.conf_sum[m] / cnt);
  }
  return total;
}

namespace {

double pixel_nll(const ClassMap& probs, int pixel, int truth) {
  return -std::log(std::max(probs.at(truth, pixel), kProbabilityFloor));
}

double pixel_brier(const ClassMap& probs, int pixel, int truth) {
  double s = 0.0;
  for (int c = 0; c < probs.classes; ++c) {
    const double d = probs.at(c, pixel) - (c == truth ? 1.0 : 0.0);
    s += d * d;
  }
  return s;
}

template <typename PixelFn>
double mean_over_labelled(const ProbMap& probs, const LabelMap& labels, PixelFn fn) {
  check_same_shape(probs, labels);
  double sum = 0.0;
  std::size_t n = 0;
  for (int p = 0; p < labels.pixels(); ++p) {
    const auto y = labels.values[p];
    if (y == kIgnoreLabel) continue;
    sum += fn(probs, p, static_cast<int>(y));
    ++n;
  }
  if (n == 0) throw EmptySampleError("every pixel is ignored");
  return sum / static_cast<double>(n);
}

}  // namespace

double nll(const ProbMap& probs, const LabelMap& labels) { return mean_over_labelled(probs, labels, pixel_nll); }

double brier(const ProbMap& probs, const LabelMap& labels) {
  return mean_over_labelled(probs, labels, pixel_brier);
}

double mean_iou(std::span<const ProbMap> probs, std::span<const LabelMap> labels, int classes) {
  if (probs.size() != labels.size()) throw ShapeError("mean_iou: batch sizes differ");
  std::vector<std::size_t> tp(classes, 0), fp(classes, 0), fn(classes, 0), present(classes, 0);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    check_same_shape(probs[i], labels[i]);
    for (int p = 0; p < labels[i].pixels(); ++p) {
      const auto y = labels[i].values[p];
      if (y == kIgnoreLabel) continue;
      const int pred = argmax_at(probs[i], p);
      ++present[y];
      if (pred == y) {
        ++tp[y];
      } else {
        ++fn[y];
        ++fp[pred];
      }
    }
  }
  double sum = 0.0;
  int n = 0;
  for (int c = 0; c < classes; ++c) {
    if (present[c] == 0) continue;
    sum += static_cast<double>(tp[c]) / static_cast<double>(tp[c] + fp[c] + fn[c]);
    ++n;
  }
  if (n == 0) throw EmptySampleError("mean_iou: no labelled pixels");
  return sum / n;
}

CalibrationReport class_balanced_report(std::span<const ProbMap> probs, std::span<const LabelMap> labels,
                                        int classes, int bins, std::size_t n_per_image, Rng& rng) {
  if (probs.empty()) throw EmptySampleError("class_balanced_report: empty batch");
  if (probs.size() != labels.size()) throw ShapeError("class_balanced_report: batch sizes differ");

  std::vector<std::vector<BinSample>> by_class(classes);
  std::vector<double> nll_sum(classes, 0.0), brier_sum(classes, 0.0);
  std::vector<BinSample> pooled;

  for (std::size_t i = 0; i < probs.size(); ++i) {
    std::vector<PixelSample> samples;
    try {
      samples = sample_pixels(probs[i], labels[i], n_per_image, rng);
    } catch (const EmptySampleError&) {
      continue;  // an all-ignored image contributes nothing
    }
    for (const auto& s : samples) {
      if (s.truth >= classes) throw ShapeError("class_balanced_report: label exceeds class count");
      const BinSample b{s.confidence, s.predicted == s.truth};
      by_class[s.truth].push_back(b);
      pooled.push_back(b);
      nll_sum[s.truth] += pixel_nll(probs[i], s.pixel, s.truth);
      brier_sum[s.truth] += pixel_brier(probs[i], s.pixel, s.truth);
    }
  }
  if (pooled.empty()) throw EmptySampleError("class_balanced_report: no labelled pixels in batch");

  CalibrationReport report;
  report.per_class.resize(classes);
  int present = 0;
  for (int c = 0; c < classes; ++c) {
    auto& m = report.per_class[c];
    m.n_pixels = by_class[c].size();
    if (m.n_pixels == 0) continue;
    const double n = static_cast<double>(m.n_pixels);
    m.ece = ece(bin_samples(by_class[c], bins));
    m.nll = nll_sum[c] / n;
    m.brier = brier_sum[c] / n;
    report.macro.ece += m.ece;
    report.macro.nll += m.nll;
    report.macro.brier += m.brier;
    ++present;
  }
  report.macro.ece /= present;
  report.macro.nll /= present;
  report.macro.brier /= present;
  report.macro.n_pixels = pooled.size();
  report.pooled_bins = bin_samples(pooled, bins);
  report.miou = mean_iou(probs, labels, classes);
  return report;
}

std::vector<ReliabilityRow> reliability_diagram_export(const ReliabilityBins& bins) {
  std::vector<ReliabilityRow> rows;
  rows.reserve(bins.bins());
  for (int m = 0; m < bins.bins(); ++m) {
    ReliabilityRow row{bins.edges[m], bins.edges[m + 1], bins.count[m], std::nullopt, std::nullopt};
    if (bins.count[m] > 0) {
      const double cnt = static_cast<double>(bins.count[m]);
      row.mean_confidence = bins.conf_sum[m] / cnt;
      row.accuracy = bins.acc_sum[m] / cnt;
    }
    rows.push_back(row);
  }
  return rows;
}

namespace {

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

}  // namespace

void write_report_csv(const CalibrationReport& report, std::ostream& out) {
  out << "class,n_pixels,ece,nll,brier\n";
  for (std::size_t c = 0; c < report.per_class.size(); ++c) {
    const auto& m = report.per_class[c];
    if (m.n_pixels == 0) {
      out << c << ",0,,,\n";
      continue;
    }
    out << c << ',' << m.n_pixels << ',' << fmt(m.ece) << ',' << fmt(m.nll) << ',' << fmt(m.brier) << '\n';
  }
  out << "macro," << report.macro.n_pixels << ',' << fmt(report.macro.ece) << ',' << fmt(report.macro.nll) << ','
      << fmt(report.macro.brier) << '\n';
  out << "miou,," << fmt(report.miou) << ",,\n";
}

void write_reliability_csv(std::span<const ReliabilityRow> rows, std::ostream& out) {
  out << "lower,upper,count,mean_confidence,accuracy\n";
  for (const auto& r : rows)
    out << fmt(r.lower) << ',' << fmt(r.upper) << ',' << r.count << ',' << fmt(r.mean_confidence) << ','
        << fmt(r.accuracy) << '\n';
}

std::vector<ReliabilityRow> read_reliability_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw IoError("reliability csv: missing header");
  std::vector<ReliabilityRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    while (cells.size() < 5) cells.emplace_back();
    try {
      ReliabilityRow r;
      r.lower = std::stod(cells[0]);
      r.upper = std::stod(cells[1]);
      r.count = std::stoul(cells[2]);
      if (!cells[3].empty()) r.mean_confidence = std::stod(cells[3]);
      if (!cells[4].empty()) r.accuracy = std::stod(cells[4]);
      rows.push_back(r);
    } catch (const std::exception&) {
      throw IoError("reliability csv: malformed row '" + line + "'");
    }
  }
  return rows;
}

}  // namespace dacal
