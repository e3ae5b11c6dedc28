#include <gtest/gtest.h>

#include <filesystem>

#include "dacal/checkpoint.hpp"
#include "dacal/config.hpp"
#include "dacal/errors.hpp"
#include "dacal/evaluation.hpp"
#include "dacal/io.hpp"
#include "dacal/trainer.hpp"

using namespace dacal;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config(Variant variant) {
  ExperimentConfig c;
  c.dataset.height = c.dataset.width = 16;
  c.dataset.source_train = 6;
  c.dataset.target_train = 4;
  c.dataset.target_val = 2;
  c.variant = variant;
  c.iterations = 6;
  c.eval_every = 3;
  c.model.widths = {4, 6, 6};
  c.mtn.width = 4;
  c.alpha = c.beta = 0.5;
  c.warmup_fraction = 0.5;
  c.samples_per_image = 200;
  finalize(c);
  return c;
}

std::vector<double> flatten(std::vector<std::span<const double>> blocks) {
  std::vector<double> out;
  for (auto b : blocks) out.insert(out.end(), b.begin(), b.end());
  return out;
}

void expect_same_state(const TrainState& a, const TrainState& b) {
  EXPECT_EQ(flatten(a.student.state()), flatten(b.student.state()));
  EXPECT_EQ(flatten(a.teacher.state()), flatten(b.teacher.state()));
  ASSERT_EQ(a.mtn.has_value(), b.mtn.has_value());
  if (a.mtn) {
    EXPECT_EQ(flatten(a.mtn->state()), flatten(b.mtn->state()));
    EXPECT_EQ(flatten(a.mtn_ema->state()), flatten(b.mtn_ema->state()));
  }
  EXPECT_EQ(a.optimizer.velocity(), b.optimizer.velocity());
  EXPECT_EQ(a.iteration, b.iteration);
  EXPECT_EQ(a.total_iterations, b.total_iterations);
  EXPECT_TRUE(a.rng == b.rng);
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST(Config, DefaultsAndJsonRoundTrip) {
  ExperimentConfig c;
  finalize(c);
  EXPECT_EQ(c.alpha, 0.01);
  EXPECT_EQ(c.beta, 0.01);
  EXPECT_EQ(c.self_training.tau, 0.968);
  EXPECT_EQ(c.bins, 15);
  const ExperimentConfig back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  ExperimentConfig other = c;
  other.beta = 0.02;
  EXPECT_NE(config_hash(other), config_hash(c));
}

TEST(Config, Overrides) {
  ExperimentConfig c;
  apply_override(c, "mixing.strategy", "same");
  apply_override(c, "use_mtn_ema", false);
  apply_override(c, "dataset.classes", 6);
  apply_override(c, "variant", "bi");
  finalize(c);
  EXPECT_EQ(c.self_training.mix_strategy, MixStrategy::Same);
  EXPECT_FALSE(c.use_mtn_ema);
  EXPECT_EQ(c.dataset.classes, 6);
  EXPECT_EQ(c.model.classes, 6);
  EXPECT_EQ(c.mtn.classes, 6);
  EXPECT_EQ(c.variant, Variant::BI);
  EXPECT_THROW(apply_override(c, "no_such_key", 1), ConfigError);
  EXPECT_THROW(apply_override(c, "alpha", "large"), ConfigError);
  EXPECT_THROW(parse_variant("pseudo"), ConfigError);
}

TEST(Config, Validation) {
  ExperimentConfig c;
  c.dataset.classes = 1;
  EXPECT_THROW(finalize(c), ConfigError);
  c = ExperimentConfig{};
  c.self_training.tau = 1.0;
  EXPECT_THROW(finalize(c), ConfigError);
  c = ExperimentConfig{};
  c.mtn.kernel = 2;
  EXPECT_THROW(finalize(c), ConfigError);
  const ExperimentConfig two = config_from_json(nlohmann::json{{"dataset", to_json(default_benchmark_config(2))}});
  EXPECT_EQ(two.self_training.mix_kind, MixKind::CutMix);
  EXPECT_EQ(two.model.classes, 2);
}

TEST(Config, LoadFromFile) {
  const fs::path dir = fresh_dir("dacal_config_file");
  fs::create_directories(dir);
  write_text(dir / "ok.json", R"({"variant": "none", "iterations": 7, "mixing": {"kind": "cutmix"}})");
  const ExperimentConfig c = load_config(dir / "ok.json");
  EXPECT_EQ(c.variant, Variant::None);
  EXPECT_EQ(c.iterations, 7);
  EXPECT_EQ(c.self_training.mix_kind, MixKind::CutMix);
  write_text(dir / "bad.json", "{\"variant\": ");
  EXPECT_THROW(load_config(dir / "bad.json"), ConfigError);
  EXPECT_THROW(load_config(dir / "missing.json"), IoError);
  fs::remove_all(dir);
}

TEST(Checkpoint, BitExactRoundTrip) {
  for (auto variant : {Variant::None, Variant::PH}) {
    const ExperimentConfig c = tiny_config(variant);
    const Benchmark b = make_benchmark(c.dataset);
    const SourceSplit split = split_source(b.source_train, c.holdout_fraction);
    const bool with_mtn = variant == Variant::PH;
    TrainState state = make_train_state(c.model, with_mtn ? std::optional(c.mtn) : std::nullopt, c.self_training,
                                        c.iterations, c.seed);
    for (int k = 0; k < 2; ++k) train_step(state, c, split.train, b.target_train);

    const fs::path dir = fresh_dir("dacal_ckpt_roundtrip");
    fs::create_directories(dir);
    save_checkpoint(dir / "a.ckpt", c, state, 0.25);
    const Checkpoint back = load_checkpoint(dir / "a.ckpt");
    EXPECT_EQ(to_json(back.config), to_json(c));
    EXPECT_EQ(back.best_miou, 0.25);
    expect_same_state(back.state, state);

    // Both continue identically.
    TrainState original = state, restored = back.state;
    const auto d1 = train_step(original, c, split.train, b.target_train);
    const auto d2 = train_step(restored, c, split.train, b.target_train);
    EXPECT_EQ(d1.l_s, d2.l_s);
    EXPECT_EQ(d1.l_u_hard, d2.l_u_hard);
    expect_same_state(original, restored);

    auto bytes = read_file(dir / "a.ckpt");
    bytes[0] = 'X';
    write_file(dir / "b.ckpt", bytes);
    EXPECT_THROW(load_checkpoint(dir / "b.ckpt"), IoError);
    bytes = read_file(dir / "a.ckpt");
    bytes.resize(bytes.size() - 8);
    write_file(dir / "c.ckpt", bytes);
    EXPECT_THROW(load_checkpoint(dir / "c.ckpt"), IoError);
    EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
    fs::remove_all(dir);
  }
}

TEST(Trainer, WritesOutputsAndIsDeterministic) {
  const ExperimentConfig c = tiny_config(Variant::PH);
  const Benchmark b = make_benchmark(c.dataset);
  const fs::path dir = fresh_dir("dacal_train_outputs");
  const TrainResult r = train(c, b, TrainOptions{dir, false, {}});
  EXPECT_EQ(r.history.size(), 6u);
  EXPECT_EQ(r.evals.size(), 2u);
  for (const char* f : {"train.csv", "eval.csv", "run.json", "best.ckpt", "last.ckpt", "final.ckpt"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  const auto manifest = nlohmann::json::parse(read_text(dir / "run.json"));
  EXPECT_EQ(manifest.at("status"), "complete");
  EXPECT_EQ(manifest.at("config_hash"), config_hash(c));
  EXPECT_EQ(manifest.at("dataset_fingerprint"), hex64(fingerprint(b)));

  const TrainResult again = train(c, b);
  expect_same_state(again.state, r.state);
  fs::remove_all(dir);
}

TEST(Trainer, ResumeMatchesUninterruptedRun) {
  const ExperimentConfig c = tiny_config(Variant::PH);
  const Benchmark b = make_benchmark(c.dataset);
  const fs::path full = fresh_dir("dacal_resume_full"), part = fresh_dir("dacal_resume_part");
  const TrainResult reference = train(c, b, TrainOptions{full, false, {}});
  train(c, b, TrainOptions{part, false, {}});

  // Replace the final checkpoint with the state after three steps, as if the run had stopped there.
  const SourceSplit split = split_source(b.source_train, c.holdout_fraction);
  TrainState state = make_train_state(c.model, c.mtn, c.self_training, c.iterations, c.seed);
  for (int k = 0; k < 3; ++k) train_step(state, c, split.train, b.target_train);
  save_checkpoint(part / "last.ckpt", c, state, reference.evals.front().target_miou);

  const TrainResult resumed = train(c, b, TrainOptions{part, true, {}});
  EXPECT_EQ(resumed.history.size(), 3u);
  expect_same_state(resumed.state, reference.state);
  EXPECT_EQ(read_text(part / "train.csv"), read_text(full / "train.csv"));
  EXPECT_EQ(read_text(part / "eval.csv"), read_text(full / "eval.csv"));

  ExperimentConfig other = c;
  other.beta = 0.1;
  EXPECT_THROW(train(other, b, TrainOptions{part, true, {}}), ConfigError);
  EXPECT_THROW(train(c, b, TrainOptions{std::nullopt, true, {}}), ConfigError);
  fs::remove_all(full);
  fs::remove_all(part);
}
