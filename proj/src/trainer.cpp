#include "dacal/trainer.hpp"

#include <fstream>
#include <sstream>

#include "dacal/checkpoint.hpp"
#include "dacal/dacal_meta.hpp"
#include "dacal/errors.hpp"
#include "dacal/evaluation.hpp"
#include "dacal/io.hpp"

namespace dacal {

namespace {

constexpr const char* kDiagnosticsHeader = "iteration,L_s,L_u_hard,L_u_soft,L_mix,q_mean,lambda_soft,mean_T";

std::vector<std::size_t> draw_indices(std::size_t pool, int count, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, pool - 1);
  std::vector<std::size_t> out(count);
  for (auto& i : out) i = pick(rng);
  return out;
}

// Keeps the header and every row whose iteration is below `iteration`.
std::string truncate_rows(const std::filesystem::path& path, long iteration) {
  std::ostringstream kept;
  if (!std::filesystem::exists(path)) return kept.str();
  std::istringstream in(read_text(path));
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (!header && std::stol(line.substr(0, line.find(','))) >= iteration) break;
    kept << line << '\n';
    header = false;
  }
  return kept.str();
}

}  // namespace

void write_diagnostics_header(std::ostream& out) { out << kDiagnosticsHeader << '\n'; }

void write_diagnostics_row(const StepDiagnostics& d, std::ostream& out) {
  out << d.iteration << ',' << format_double(d.l_s) << ',' << format_double(d.l_u_hard) << ','
      << format_double(d.l_u_soft) << ',' << format_double(d.l_mix) << ',' << format_double(d.q_mean) << ','
      << format_double(d.lambda_soft) << ',' << format_double(d.mean_t) << '\n';
}

Benchmark resolve_benchmark(const ExperimentConfig& config) {
  if (config.dataset_dir.empty()) return make_benchmark(config.dataset);
  Benchmark b = load_benchmark(config.dataset_dir);
  if (b.config.classes != config.dataset.classes || b.config.height != config.dataset.height ||
      b.config.width != config.dataset.width)
    throw ConfigError("dataset at " + config.dataset_dir + " does not match the configured classes or size");
  return b;
}

StepDiagnostics train_step(TrainState& state, const ExperimentConfig& config, const LabeledSplit& source,
                           const UnlabeledSplit& target) {
  SourceBatch sb;
  for (auto i : draw_indices(source.size(), config.batch_size, state.rng)) {
    sb.images.push_back(source.images[i]);
    sb.labels.push_back(source.labels[i]);
  }
  if (config.variant == Variant::SourceOnly) return source_only_step(state, sb, config.self_training);
  TargetBatch tb;
  for (auto i : draw_indices(target.size(), config.batch_size, state.rng)) tb.images.push_back(target.images[i]);
  if (config.variant == Variant::None) return baseline_step(state, sb, tb, config.self_training);
  return dacal_step(state, sb, tb, config.self_training, config.dacal());
}

TrainResult train(const ExperimentConfig& config, const Benchmark& benchmark, const TrainOptions& options) {
  const SourceSplit split = split_source(benchmark.source_train, config.holdout_fraction);
  const bool calibrated = config.variant == Variant::PH || config.variant == Variant::BI;
  const auto& out_dir = options.out_dir;
  if (options.resume && !out_dir) throw ConfigError("resume needs an output directory");

  TrainResult result{make_train_state(config.model, calibrated ? std::optional(config.mtn) : std::nullopt,
                                      config.self_training, config.iterations, config.seed),
                     {}, {}, -1.0};
  if (options.resume) {
    Checkpoint ck = load_checkpoint(*out_dir / "last.ckpt");
    if (config_hash(ck.config) != config_hash(config))
      throw ConfigError("checkpoint in " + out_dir->string() + " was written by a different config");
    result.state = std::move(ck.state);
    result.best_miou = ck.best_miou;
  }
  TrainState& state = result.state;

  std::ofstream csv, eval_csv;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    const std::string kept = options.resume ? truncate_rows(*out_dir / "train.csv", state.iteration) : "";
    const std::string kept_eval = options.resume ? truncate_rows(*out_dir / "eval.csv", state.iteration + 1) : "";
    csv.open(*out_dir / "train.csv", std::ios::trunc);
    eval_csv.open(*out_dir / "eval.csv", std::ios::trunc);
    if (!csv || !eval_csv) throw IoError("cannot write logs in " + out_dir->string());
    if (kept.empty()) write_diagnostics_header(csv); else csv << kept;
    if (kept_eval.empty()) eval_csv << "iteration,target_miou\n"; else eval_csv << kept_eval;
    nlohmann::json manifest = {{"config", to_json(config)},
                               {"config_hash", config_hash(config)},
                               {"dataset_fingerprint", hex64(fingerprint(benchmark))},
                               {"seed", config.seed},
                               {"status", "running"}};
    write_text(*out_dir / "run.json", manifest.dump(2) + "\n");
  }

  auto save = [&](const char* name) {
    if (out_dir) save_checkpoint(*out_dir / name, config, state, result.best_miou);
  };
  while (state.iteration < config.iterations) {
    const StepDiagnostics d = train_step(state, config, split.train, benchmark.target_train);
    result.history.push_back(d);
    if (csv.is_open()) write_diagnostics_row(d, csv);
    const long done = state.iteration;
    const bool last = done == config.iterations;
    if ((config.eval_every > 0 && done % config.eval_every == 0) || last) {
      const double miou = target_miou(state.student, benchmark.target_val, config.dataset.classes);
      result.evals.push_back({done, miou});
      if (eval_csv.is_open()) eval_csv << done << ',' << format_double(miou) << '\n';
      if (options.log) options.log("iteration " + std::to_string(done) + " target mIoU " + format_double(miou));
      if (miou > result.best_miou) {
        result.best_miou = miou;
        save("best.ckpt");
      }
    }
    if (config.checkpoint_every > 0 && done % config.checkpoint_every == 0) {
      csv.flush();
      eval_csv.flush();
      save("last.ckpt");
    }
  }
  if (out_dir) {
    csv.close();
    eval_csv.close();
    save("last.ckpt");
    save("final.ckpt");
    nlohmann::json manifest = nlohmann::json::parse(read_text(*out_dir / "run.json"));
    manifest["status"] = "complete";
    manifest["best_target_miou"] = result.best_miou;
    manifest["checkpoints"] = {"best.ckpt", "last.ckpt", "final.ckpt"};
    manifest["results"] = {"train.csv", "eval.csv"};
    write_text(*out_dir / "run.json", manifest.dump(2) + "\n");
  }
  return result;
}

}  // namespace dacal
