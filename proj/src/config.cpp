#include "dacal/config.hpp"

#include <cmath>

#include "dacal/errors.hpp"
#include "dacal/io.hpp"

namespace dacal {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::SourceOnly: return "source_only";
    case Variant::None: return "none";
    case Variant::PH: return "ph";
    case Variant::BI: return "bi";
  }
  return "?";
}

Variant parse_variant(const std::string& text) {
  if (text == "source_only") return Variant::SourceOnly;
  if (text == "none") return Variant::None;
  if (text == "ph" || text == "PH") return Variant::PH;
  if (text == "bi" || text == "BI") return Variant::BI;
  throw ConfigError("unknown variant '" + text + "'");
}

long ExperimentConfig::warmup_iterations() const {
  return std::max(1L, std::lround(warmup_fraction * static_cast<double>(iterations)));
}

DacalConfig ExperimentConfig::dacal() const {
  DacalConfig d;
  d.alpha = alpha;
  d.beta = beta;
  d.warmup_iterations = warmup_iterations();
  d.mtn_ema_gamma = mtn_ema_gamma;
  d.variant = variant == Variant::BI ? CalibrationVariant::BuiltIn : CalibrationVariant::PostHoc;
  d.use_mtn_ema = use_mtn_ema;
  d.use_warmup = use_warmup;
  return d;
}

void finalize(ExperimentConfig& c) {
  validate(c.dataset);
  c.model.classes = c.dataset.classes;
  c.mtn.classes = c.dataset.classes;
  c.mtn.image_channels = Image::kChannels;
  // With two classes the split leaves one class per side, usually just background; use rectangles.
  if (c.dataset.classes == 2) c.self_training.mix_kind = MixKind::CutMix;

  if (c.iterations < 1) throw ConfigError("iterations must be >= 1");
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(c.self_training.lr >= 0.0)) throw ConfigError("lr must be >= 0");
  if (!(c.self_training.momentum >= 0.0 && c.self_training.momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(c.self_training.tau > 0.0 && c.self_training.tau < 1.0)) throw ConfigError("tau must lie in (0, 1)");
  if (!(c.self_training.teacher_ema_gamma >= 0.0 && c.self_training.teacher_ema_gamma <= 1.0))
    throw ConfigError("teacher_ema_gamma must lie in [0, 1]");
  if (!(c.warmup_fraction > 0.0)) throw ConfigError("warmup_fraction must be > 0");
  validate(c.dacal());
  for (int w : c.model.widths)
    if (w < 1) throw ConfigError("model widths must be >= 1");
  if (c.mtn.width < 1 || c.mtn.depth < 1 || c.mtn.kernel < 1 || c.mtn.kernel % 2 == 0)
    throw ConfigError("MTN needs width, depth >= 1 and an odd kernel");
  if (!(c.mtn.initial_temperature > 0.05 && c.mtn.initial_temperature < 20.0))
    throw ConfigError("initial temperature must lie in (0.05, 20)");
  if (c.bins < 1) throw ConfigError("bins must be >= 1");
  if (c.samples_per_image < 1) throw ConfigError("samples_per_image must be >= 1");
  if (c.eval_every < 0 || c.checkpoint_every < 0) throw ConfigError("eval/checkpoint intervals must be >= 0");
  if (!(c.holdout_fraction > 0.0 && c.holdout_fraction < 1.0)) throw ConfigError("holdout_fraction must lie in (0, 1)");
  if (c.ablation.seeds.empty()) throw ConfigError("ablation needs at least one seed");
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json grid = nlohmann::json::object();
  for (const auto& [k, v] : c.ablation.grid) grid[k] = v;
  return {{"seed", c.seed},
          {"dataset", to_json(c.dataset)},
          {"dataset_dir", c.dataset_dir},
          {"variant", to_string(c.variant)},
          {"iterations", c.iterations},
          {"batch_size", c.batch_size},
          {"lr", c.self_training.lr},
          {"momentum", c.self_training.momentum},
          {"tau", c.self_training.tau},
          {"teacher_ema_gamma", c.self_training.teacher_ema_gamma},
          {"alpha", c.alpha},
          {"beta", c.beta},
          {"mtn_ema_gamma", c.mtn_ema_gamma},
          {"warmup_fraction", c.warmup_fraction},
          {"use_mtn_ema", c.use_mtn_ema},
          {"use_warmup", c.use_warmup},
          {"mixing",
           {{"kind", to_string(c.self_training.mix_kind)}, {"strategy", to_string(c.self_training.mix_strategy)}}},
          {"model", {{"widths", c.model.widths}}},
          {"mtn",
           {{"width", c.mtn.width},
            {"depth", c.mtn.depth},
            {"kernel", c.mtn.kernel},
            {"initial_temperature", c.mtn.initial_temperature}}},
          {"bins", c.bins},
          {"samples_per_image", c.samples_per_image},
          {"eval_every", c.eval_every},
          {"checkpoint_every", c.checkpoint_every},
          {"holdout_fraction", c.holdout_fraction},
          {"ablation", {{"seeds", c.ablation.seeds}, {"grid", grid}}}};
}

void apply_override(ExperimentConfig& c, const std::string& key, const nlohmann::json& v) {
  try {
    if (key == "seed") c.seed = v.get<std::uint64_t>();
    else if (key == "dataset") c.dataset = benchmark_config_from_json(v);
    else if (key == "dataset_dir") c.dataset_dir = v.get<std::string>();
    else if (key == "variant") c.variant = parse_variant(v.get<std::string>());
    else if (key == "iterations") c.iterations = v.get<long>();
    else if (key == "batch_size") c.batch_size = v.get<int>();
    else if (key == "lr") c.self_training.lr = v.get<double>();
    else if (key == "momentum") c.self_training.momentum = v.get<double>();
    else if (key == "tau") c.self_training.tau = v.get<double>();
    else if (key == "teacher_ema_gamma") c.self_training.teacher_ema_gamma = v.get<double>();
    else if (key == "alpha") c.alpha = v.get<double>();
    else if (key == "beta") c.beta = v.get<double>();
    else if (key == "mtn_ema_gamma") c.mtn_ema_gamma = v.get<double>();
    else if (key == "warmup_fraction") c.warmup_fraction = v.get<double>();
    else if (key == "use_mtn_ema") c.use_mtn_ema = v.get<bool>();
    else if (key == "use_warmup") c.use_warmup = v.get<bool>();
    else if (key == "mixing") {
      if (v.contains("kind")) c.self_training.mix_kind = parse_mix_kind(v.at("kind").get<std::string>());
      if (v.contains("strategy")) c.self_training.mix_strategy = parse_mix_strategy(v.at("strategy").get<std::string>());
    }
    else if (key == "mixing.kind") c.self_training.mix_kind = parse_mix_kind(v.get<std::string>());
    else if (key == "mixing.strategy") c.self_training.mix_strategy = parse_mix_strategy(v.get<std::string>());
    else if (key == "model") c.model.widths = v.at("widths").get<std::array<int, 3>>();
    else if (key == "mtn") {
      c.mtn.width = v.value("width", c.mtn.width);
      c.mtn.depth = v.value("depth", c.mtn.depth);
      c.mtn.kernel = v.value("kernel", c.mtn.kernel);
      c.mtn.initial_temperature = v.value("initial_temperature", c.mtn.initial_temperature);
    } else if (key == "bins") c.bins = v.get<int>();
    else if (key == "samples_per_image") c.samples_per_image = v.get<int>();
    else if (key == "eval_every") c.eval_every = v.get<long>();
    else if (key == "checkpoint_every") c.checkpoint_every = v.get<long>();
    else if (key == "holdout_fraction") c.holdout_fraction = v.get<double>();
    else if (key == "ablation") {
      if (v.contains("seeds")) c.ablation.seeds = v.at("seeds").get<std::vector<std::uint64_t>>();
      c.ablation.grid.clear();
      if (v.contains("grid"))
        for (const auto& [k, values] : v.at("grid").items()) {
          if (!values.is_array() || values.empty()) throw ConfigError("ablation grid entry '" + k + "' needs a non-empty list");
          c.ablation.grid[k] = values.get<std::vector<nlohmann::json>>();
        }
    } else if (key.starts_with("dataset.")) {
      nlohmann::json d = to_json(c.dataset);
      d[key.substr(8)] = v;
      if (key == "dataset.classes" || key == "dataset.preset") {
        // Palettes follow the class count unless given explicitly.
        const BenchmarkConfig fresh = benchmark_config_from_json({{"classes", d.at("classes")}, {"preset", d.at("preset")}});
        d["source"]["palette"] = to_json(fresh).at("source").at("palette");
        d["target"]["palette"] = to_json(fresh).at("target").at("palette");
      }
      c.dataset = benchmark_config_from_json(d);
    } else
      throw ConfigError("unknown config key '" + key + "'");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig c;
  // Dataset first so class-dependent defaults are in place before other keys.
  if (j.contains("dataset")) apply_override(c, "dataset", j.at("dataset"));
  for (const auto& [key, value] : j.items())
    if (key != "dataset") apply_override(c, key, value);
  finalize(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

std::string config_hash(const ExperimentConfig& config) { return hex64(fnv1a64(to_json(config).dump())); }

}  // namespace dacal
