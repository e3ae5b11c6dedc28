// Experiment driver: generate | train | eval | plot | ablate.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <future>
#include <iostream>
#include <sstream>

#include "dacal/checkpoint.hpp"
#include "dacal/config.hpp"
#include "dacal/dacal_meta.hpp"
#include "dacal/datasets.hpp"
#include "dacal/errors.hpp"
#include "dacal/evaluation.hpp"
#include "dacal/io.hpp"
#include "dacal/plot.hpp"
#include "dacal/trainer.hpp"

namespace fs = std::filesystem;
using namespace dacal;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kValidation = 2, kFault = 3, kIo = 4 };

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
};

fs::path out_root() {
  const char* env = std::getenv("DACAL_OUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

int worker_count() {
  const char* env = std::getenv("DACAL_THREADS");
  if (!env || !*env) return 1;
  try {
    return std::max(1, std::stoi(env));
  } catch (const std::exception&) {
    throw ConfigError("DACAL_THREADS must be a positive integer");
  }
}

ExperimentConfig read_config(const Globals& g) {
  ExperimentConfig c = g.config.empty() ? ExperimentConfig{} : load_config(g.config);
  if (g.seed) c.seed = *g.seed;
  finalize(c);
  return c;
}

fs::path resolve_out(const Globals& g, const fs::path& fallback) { return g.out.empty() ? out_root() / fallback : fs::path(g.out); }

// Refuses to write into a non-empty directory unless forced.
void prepare_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw IoError(dir.string() + " exists and is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw ConfigError(dir.string() + " is not empty; pass --force to overwrite");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

void write_eval_outputs(const EvalOutcome& r, const fs::path& dir, const ExperimentConfig& config,
                        const std::vector<std::string>& checkpoints, const Benchmark& bench) {
  const std::string mode = to_string(r.mode);
  std::ostringstream report, rel;
  write_report_csv(r.report, report);
  write_reliability_csv(r.reliability, rel);
  write_text(dir / ("report_" + mode + ".csv"), report.str());
  write_text(dir / ("reliability_" + mode + ".csv"), rel.str());
  nlohmann::json manifest = {{"mode", mode},
                             {"config_hash", config_hash(config)},
                             {"dataset_fingerprint", hex64(fingerprint(bench))},
                             {"seed", config.seed},
                             {"checkpoints", checkpoints},
                             {"results", {"report_" + mode + ".csv", "reliability_" + mode + ".csv"}},
                             {"status", "complete"}};
  if (r.temperature) {
    save_temperature_record(*r.temperature, (dir / ("temperature_" + mode + ".json")).string());
    manifest["results"].push_back("temperature_" + mode + ".json");
  }
  write_text(dir / ("eval_" + mode + ".json"), manifest.dump(2) + "\n");
}

int cmd_generate(const Globals& g) {
  ExperimentConfig c = read_config(g);
  if (g.seed) c.dataset.seed = *g.seed;
  const fs::path dir = resolve_out(g, "dataset");
  prepare_dir(dir, g.force);
  const Benchmark b = make_benchmark(c.dataset);
  save_benchmark(b, dir);
  std::cout << "wrote " << b.source_train.size() + b.target_train.size() + b.target_val.size() << " images to "
            << dir.string() << " (fingerprint " << hex64(fingerprint(b)) << ")\n";
  return kOk;
}

int cmd_train(const Globals& g, bool resume) {
  const ExperimentConfig c = read_config(g);
  const fs::path dir = resolve_out(g, to_string(c.variant) + "_seed" + std::to_string(c.seed));
  if (!resume) prepare_dir(dir, g.force);
  const Benchmark b = resolve_benchmark(c);
  TrainOptions options{dir, resume, [](const std::string& line) { std::cout << line << '\n'; }};
  const TrainResult r = train(c, b, options);
  std::cout << "finished " << r.state.iteration << " iterations; best target mIoU " << format_double(r.best_miou)
            << " (config " << config_hash(c) << ")\n";
  return kOk;
}

int cmd_eval(const Globals& g, const std::vector<std::string>& checkpoints, const std::string& mode_name,
             const std::string& dataset_dir) {
  if (checkpoints.empty()) throw ConfigError("eval needs --checkpoint");
  const EvalMode mode = parse_eval_mode(mode_name);
  std::vector<Checkpoint> members;
  for (const auto& p : checkpoints) members.push_back(load_checkpoint(p));
  ExperimentConfig config = members.front().config;
  if (!dataset_dir.empty()) config.dataset_dir = dataset_dir;
  const Benchmark bench = resolve_benchmark(config);
  const fs::path dir = g.out.empty() ? fs::path(checkpoints.front()).parent_path() : fs::path(g.out);
  fs::create_directories(dir);
  const EvalOutcome r = evaluate(members, bench, mode);
  write_eval_outputs(r, dir, config, checkpoints, bench);
  std::cout << mode_name << ": mIoU " << format_double(r.report.miou) << " ECE " << format_double(r.report.macro.ece)
            << " NLL " << format_double(r.report.macro.nll) << " Brier " << format_double(r.report.macro.brier)
            << '\n';
  return kOk;
}

int cmd_plot(const Globals& g, const std::vector<std::string>& reliability, const std::string& checkpoint,
             const std::string& dataset_dir, int images) {
  const fs::path dir = resolve_out(g, "figures");
  fs::create_directories(dir);
  if (reliability.empty() && checkpoint.empty()) throw ConfigError("plot needs --reliability or --checkpoint");
  for (const auto& path : reliability) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    const auto rows = read_reliability_csv(in);
    const auto files = plot_reliability(rows, dir / fs::path(path).stem(), fs::path(path).stem().string());
    std::cout << "wrote " << files.svg.string() << " and " << files.png.string() << '\n';
  }
  if (!checkpoint.empty()) {
    Checkpoint ck = load_checkpoint(checkpoint);
    if (!ck.state.mtn_ema) throw ConfigError("temperature maps need a checkpoint with an MTN");
    if (!dataset_dir.empty()) ck.config.dataset_dir = dataset_dir;
    const Benchmark bench = resolve_benchmark(ck.config);
    const int n = std::clamp(images, 1, static_cast<int>(bench.target_val.size()));
    std::vector<TemperaturePanel> panels;
    for (int i = 0; i < n; ++i) {
      const Image one[] = {bench.target_val.images[i]};
      const Tensor x = stack_images(one);
      const Tensor z = ck.state.student.forward(x);
      const LogitsMap logits = logits_at(z, 0);
      panels.push_back({one[0], argmax_labels(logits), temperatures_at(ck.state.mtn_ema->forward(x, z, nullptr), 0)});
    }
    const auto files = plot_temperature_maps(panels, ck.config.dataset.classes, dir / "temperature_maps");
    std::cout << "wrote " << files.svg.string() << " and " << files.png.string() << '\n';
  }
  return kOk;
}

EvalMode default_mode(Variant v) {
  if (v == Variant::PH) return EvalMode::DacalPH;
  if (v == Variant::BI) return EvalMode::DacalBI;
  return EvalMode::NoCalib;
}

int cmd_ablate(const Globals& g) {
  const ExperimentConfig base = read_config(g);
  const fs::path dir = resolve_out(g, "ablation");
  prepare_dir(dir, g.force);
  const Benchmark bench = resolve_benchmark(base);

  // Cross product of the grid, in key order.
  std::vector<std::string> keys;
  for (const auto& [k, _] : base.ablation.grid) keys.push_back(k);
  std::vector<std::vector<nlohmann::json>> cells{{}};
  for (const auto& k : keys) {
    std::vector<std::vector<nlohmann::json>> next;
    for (const auto& cell : cells)
      for (const auto& v : base.ablation.grid.at(k)) {
        next.push_back(cell);
        next.back().push_back(v);
      }
    cells = std::move(next);
  }
  struct Job {
    std::size_t cell;
    std::uint64_t seed;
    ExperimentConfig config;
  };
  std::vector<Job> jobs;
  for (std::size_t ci = 0; ci < cells.size(); ++ci)
    for (auto seed : base.ablation.seeds) {
      ExperimentConfig c = base;
      for (std::size_t k = 0; k < keys.size(); ++k) apply_override(c, keys[k], cells[ci][k]);
      c.seed = seed;
      finalize(c);
      jobs.push_back({ci, seed, std::move(c)});
    }

  struct Score {
    double miou = 0.0, ece = 0.0;
  };
  std::vector<Score> scores(jobs.size());
  auto run = [&](std::size_t j) {
    const auto& job = jobs[j];
    const fs::path run_dir = dir / ("cell" + std::to_string(job.cell) + "_seed" + std::to_string(job.seed));
    TrainOptions options{run_dir, false, {}};
    TrainResult r = train(job.config, bench, options);
    const Checkpoint ck{job.config, std::move(r.state), r.best_miou};
    const EvalOutcome e = evaluate(std::span(&ck, 1), bench, default_mode(job.config.variant));
    write_eval_outputs(e, run_dir, job.config, {(run_dir / "final.ckpt").string()}, bench);
    scores[j] = {e.report.miou, e.report.macro.ece};
  };
  const std::size_t workers = static_cast<std::size_t>(worker_count());
  for (std::size_t start = 0; start < jobs.size(); start += workers) {
    std::vector<std::future<void>> batch;
    for (std::size_t j = start; j < std::min(jobs.size(), start + workers); ++j)
      batch.push_back(std::async(std::launch::async, run, j));
    for (auto& f : batch) f.get();
  }

  std::ostringstream table;
  table << "cell";
  for (const auto& k : keys) table << ',' << k;
  for (auto s : base.ablation.seeds) table << ",miou_seed" << s;
  for (auto s : base.ablation.seeds) table << ",ece_seed" << s;
  table << ",miou_mean,ece_mean\n";
  const std::size_t n_seeds = base.ablation.seeds.size();
  for (std::size_t ci = 0; ci < cells.size(); ++ci) {
    table << ci;
    for (const auto& v : cells[ci]) table << ',' << (v.is_string() ? v.get<std::string>() : v.dump());
    double miou = 0.0, ece = 0.0;
    for (std::size_t s = 0; s < n_seeds; ++s) table << ',' << format_double(scores[ci * n_seeds + s].miou);
    for (std::size_t s = 0; s < n_seeds; ++s) table << ',' << format_double(scores[ci * n_seeds + s].ece);
    for (std::size_t s = 0; s < n_seeds; ++s) {
      miou += scores[ci * n_seeds + s].miou / n_seeds;
      ece += scores[ci * n_seeds + s].ece / n_seeds;
    }
    table << ',' << format_double(miou) << ',' << format_double(ece) << '\n';
  }
  write_text(dir / "ablation.csv", table.str());
  write_text(dir / "ablation.json", nlohmann::json({{"config", to_json(base)},
                                                    {"config_hash", config_hash(base)},
                                                    {"results", {"ablation.csv"}},
                                                    {"status", "complete"}})
                                        .dump(2) +
                                        "\n");
  std::cout << table.str();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-domain calibration experiments on the ShiftShapes benchmark"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config, "JSON experiment config");
  auto* seed_opt = app.add_option("--seed", seed, "Override the config seed");
  app.add_option("--out", g.out, "Output directory (default under $DACAL_OUT_ROOT or ./runs)");
  app.add_flag("--force", g.force, "Overwrite a non-empty output directory");

  auto* generate = app.add_subcommand("generate", "Materialize the benchmark dataset");
  auto* train_cmd = app.add_subcommand("train", "Train one model");
  bool resume = false;
  train_cmd->add_flag("--resume", resume, "Continue from <out>/last.ckpt");
  auto* eval = app.add_subcommand("eval", "Evaluate checkpoints on the target validation split");
  std::vector<std::string> checkpoints;
  std::string mode = "nocalib", dataset_dir;
  eval->add_option("--checkpoint", checkpoints, "Checkpoint file (repeat for ensemble)")->required();
  eval->add_option("--mode", mode, "nocalib|tempscal_src|ensemble|pseudocal|dacal_ph|dacal_bi|oracle");
  eval->add_option("--dataset", dataset_dir, "Generated dataset directory");
  auto* plot = app.add_subcommand("plot", "Reliability diagrams and temperature maps");
  std::vector<std::string> reliability;
  std::string plot_checkpoint;
  int images = 4;
  plot->add_option("--reliability", reliability, "Reliability CSV (repeatable)");
  plot->add_option("--checkpoint", plot_checkpoint, "Checkpoint with an MTN for temperature maps");
  plot->add_option("--dataset", dataset_dir, "Generated dataset directory");
  plot->add_option("--images", images, "Number of target images in the temperature figure");
  auto* ablate = app.add_subcommand("ablate", "Run the config's ablation grid over its seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }
  if (seed_opt->count() > 0) g.seed = seed;

  try {
    if (*generate) return cmd_generate(g);
    if (*train_cmd) return cmd_train(g, resume);
    if (*eval) return cmd_eval(g, checkpoints, mode, dataset_dir);
    if (*plot) return cmd_plot(g, reliability, plot_checkpoint, dataset_dir, images);
    if (*ablate) return cmd_ablate(g);
  } catch (const TrainingFault& e) {
    std::cerr << "training fault: " << e.what() << " (component " << e.component() << ")\n";
    return kFault;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return kValidation;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "unexpected failure: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}
