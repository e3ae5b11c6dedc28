#include "dacal/evaluation.hpp"

#include <algorithm>
#include <numeric>

#include "dacal/dacal_meta.hpp"
#include "dacal/errors.hpp"
#include "dacal/io.hpp"

namespace dacal {

namespace {

constexpr std::uint64_t kHoldoutStream = 0x686f6c646f7574ULL;
constexpr std::uint64_t kEvalStream = 0x6576616cULL;
constexpr std::uint64_t kPseudoCalStream = 0x70736575646fULL;
constexpr int kPredictBatch = 8;

Rng eval_rng(const ExperimentConfig& config, std::uint64_t stream) { return Rng(derive_seed(config.seed, stream, 0)); }

}  // namespace

std::string to_string(EvalMode mode) {
  switch (mode) {
    case EvalMode::NoCalib: return "nocalib";
    case EvalMode::TempScalSrc: return "tempscal_src";
    case EvalMode::Ensemble: return "ensemble";
    case EvalMode::PseudoCal: return "pseudocal";
    case EvalMode::DacalPH: return "dacal_ph";
    case EvalMode::DacalBI: return "dacal_bi";
    case EvalMode::Oracle: return "oracle";
  }
  return "?";
}

EvalMode parse_eval_mode(const std::string& text) {
  for (auto m : {EvalMode::NoCalib, EvalMode::TempScalSrc, EvalMode::Ensemble, EvalMode::PseudoCal, EvalMode::DacalPH,
                 EvalMode::DacalBI, EvalMode::Oracle})
    if (to_string(m) == text) return m;
  throw ConfigError("unknown evaluation mode '" + text + "'");
}

SourceSplit split_source(const LabeledSplit& source, double holdout_fraction) {
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) throw ConfigError("holdout fraction must lie in (0, 1)");
  const std::size_t n = source.size();
  const auto n_hold = static_cast<std::size_t>(std::lround(holdout_fraction * static_cast<double>(n)));
  if (n < 2 || n_hold == 0 || n_hold >= n) throw InsufficientDataError("source split too small for a hold-out");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(0, kHoldoutStream, n));
  std::shuffle(order.begin(), order.end(), rng);
  std::sort(order.begin(), order.begin() + n_hold);
  std::sort(order.begin() + n_hold, order.end());
  SourceSplit out;
  for (std::size_t k = 0; k < n; ++k) {
    auto& dst = k < n_hold ? out.holdout : out.train;
    dst.images.push_back(source.images[order[k]]);
    dst.labels.push_back(source.labels[order[k]]);
  }
  return out;
}

std::vector<LogitsMap> predict_logits(const SegNet& net, std::span<const Image> images) {
  std::vector<LogitsMap> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += kPredictBatch) {
    const auto chunk = images.subspan(start, std::min<std::size_t>(kPredictBatch, images.size() - start));
    const Tensor logits = net.forward(stack_images(chunk));
    for (int i = 0; i < logits.n; ++i) out.push_back(logits_at(logits, i));
  }
  return out;
}

std::vector<ProbMap> softmax_all(std::span<const LogitsMap> logits) {
  std::vector<ProbMap> out;
  for (const auto& l : logits) out.push_back(softmax(l));
  return out;
}

std::vector<ProbMap> apply_temperature_all(std::span<const LogitsMap> logits, double temperature) {
  std::vector<ProbMap> out;
  for (const auto& l : logits) out.push_back(apply_temperature(l, temperature));
  return out;
}

double target_miou(const SegNet& net, const LabeledSplit& split, int classes) {
  const auto probs = softmax_all(predict_logits(net, split.images));
  return mean_iou(probs, split.labels, classes);
}

CalibrationReport report_for(std::span<const ProbMap> probs, std::span<const LabelMap> labels,
                             const ExperimentConfig& config) {
  Rng rng = eval_rng(config, kEvalStream);
  return class_balanced_report(probs, labels, config.dataset.classes, config.bins,
                               static_cast<std::size_t>(config.samples_per_image), rng);
}

EvalOutcome evaluate(std::span<const Checkpoint> members, const Benchmark& benchmark, EvalMode mode) {
  if (members.empty()) throw ConfigError("evaluation needs at least one checkpoint");
  const ExperimentConfig& config = members.front().config;
  for (const auto& m : members)
    if (m.config.dataset.classes != benchmark.config.classes || m.config.dataset.height != benchmark.config.height ||
        m.config.dataset.width != benchmark.config.width)
      throw ConfigError("checkpoint does not match the dataset's classes or image size");
  if (mode != EvalMode::Ensemble && members.size() > 1)
    throw ConfigError("only ensemble mode takes more than one checkpoint");
  const SegNet& student = members.front().state.student;
  const auto& images = benchmark.target_val.images;
  const std::string fp = hex64(fingerprint(benchmark));

  EvalOutcome out;
  out.mode = mode;
  auto record = [&](const std::string& method, double t) {
    out.temperature = TemperatureRecord{method, t, fp, config.seed};
  };
  switch (mode) {
    case EvalMode::NoCalib:
    case EvalMode::DacalBI: {
      // Built-in calibration leaves inference untouched: the raw softmax is the calibrated output.
      if (mode == EvalMode::DacalBI && config.variant != Variant::BI)
        throw ConfigError("dacal_bi evaluation needs a checkpoint trained with variant bi");
      out.probs = softmax_all(predict_logits(student, images));
      break;
    }
    case EvalMode::TempScalSrc: {
      const SourceSplit split = split_source(benchmark.source_train, config.holdout_fraction);
      const auto hold_logits = predict_logits(student, split.holdout.images);
      const double t = fit_global_temperature(hold_logits, split.holdout.labels).value();
      record("tempscal_src", t);
      out.probs = apply_temperature_all(predict_logits(student, images), t);
      break;
    }
    case EvalMode::Ensemble: {
      std::vector<std::vector<LogitsMap>> per_member;
      for (const auto& m : members) per_member.push_back(predict_logits(m.state.student, images));
      for (std::size_t i = 0; i < images.size(); ++i) {
        std::vector<LogitsMap> stack;
        for (const auto& pm : per_member) stack.push_back(pm[i]);
        out.probs.push_back(ensemble_probs(stack));
      }
      break;
    }
    case EvalMode::PseudoCal: {
      Rng rng = eval_rng(config, kPseudoCalStream);
      const LogitsFn fn = [&](const Image& img) {
        const Image one[] = {img};
        return predict_logits(student, one).front();
      };
      const double t = pseudocal_fit(fn, benchmark.target_train.images, rng).value();
      record("pseudocal", t);
      out.probs = apply_temperature_all(predict_logits(student, images), t);
      break;
    }
    case EvalMode::DacalPH: {
      const auto& state = members.front().state;
      if (!state.mtn_ema) throw ConfigError("dacal_ph evaluation needs a checkpoint with an MTN");
      for (std::size_t start = 0; start < images.size(); start += kPredictBatch) {
        const auto chunk =
            std::span(images).subspan(start, std::min<std::size_t>(kPredictBatch, images.size() - start));
        auto probs = infer_ph(student, &*state.mtn_ema, stack_images(chunk));
        for (auto& p : probs) out.probs.push_back(std::move(p));
      }
      break;
    }
    case EvalMode::Oracle: {
      const auto val_logits = predict_logits(student, images);
      const double t = fit_global_temperature(val_logits, benchmark.target_val.labels).value();
      record("oracle", t);
      out.probs = apply_temperature_all(val_logits, t);
      break;
    }
  }
  out.report = report_for(out.probs, benchmark.target_val.labels, config);
  out.reliability = reliability_diagram_export(out.report.pooled_bins);
  return out;
}

}  // namespace dacal
