#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "dacal/dacal_meta.hpp"
#include "dacal/datasets.hpp"
#include "dacal/errors.hpp"
#include "oracles.hpp"

using namespace dacal;

namespace {

Tensor random_tensor(int n, int c, int h, int w, Rng& rng, double sd = 1.0) {
  Tensor t(n, c, h, w);
  std::normal_distribution<double> nd(0.0, sd);
  for (auto& v : t.data) v = nd(rng);
  return t;
}

Tensor random_images(int n, int h, int w, Rng& rng) {
  Tensor t(n, 3, h, w);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& v : t.data) v = u(rng);
  return t;
}

std::vector<double> flatten(std::vector<std::span<const double>> blocks) {
  std::vector<double> out;
  for (auto b : blocks) out.insert(out.end(), b.begin(), b.end());
  return out;
}

std::vector<double> params_of(const Mtn& m) {
  std::vector<double> out;
  for (const auto* p : m.parameters()) out.insert(out.end(), p->value.begin(), p->value.end());
  return out;
}

void set_constant_temperature(Mtn& mtn, double t) {
  for (auto& w : mtn.output_layer().weight.value) w = 0.0;
  for (auto& b : mtn.output_layer().bias.value) b = t >= 20.0 ? 1e3 : std::log(std::expm1(t - 0.05));
}

struct Toy {
  SourceBatch source;
  TargetBatch target;
};

Toy toy_batches(int classes = 4) {
  BenchmarkConfig c = default_benchmark_config(classes);
  c.height = c.width = 16;
  c.source_train = 2;
  c.target_train = 2;
  c.target_val = 1;
  const Benchmark b = make_benchmark(c);
  return {{b.source_train.images, b.source_train.labels}, {b.target_train.images}};
}

TrainState small_state(std::uint64_t seed) {
  return make_train_state(SegNetConfig{3, 4, {4, 6, 6}}, MtnConfig{3, 4, 4, 3, 3, 1.0}, SelfTrainingConfig{}, 100,
                          seed);
}

// The 157-parameter meta-gradient fixture: MTN of width 2 over two classes on 8x8 inputs. Teacher and
// student heads are made confident so the calibrated targets depend visibly on the temperature.
struct MetaFixture {
  SegNet student, teacher;
  Mtn mtn;
  MetaBatch batch;

  explicit MetaFixture(std::uint64_t seed) {
    Rng rng(seed);
    const int C = 2, H = 8, W = 8;
    student = SegNet(SegNetConfig{3, C, {4, 4, 4}}, rng);
    teacher = SegNet(SegNetConfig{3, C, {4, 4, 4}}, rng);
    mtn = Mtn(MtnConfig{3, C, 2, 3, 3, 1.0}, rng);
    std::normal_distribution<double> nd(0.0, 0.5);
    for (auto* p : mtn.parameters())
      for (auto& v : p->value) v = nd(rng);
    HeadParams h = teacher.clone_head();
    for (auto& v : h.weight) v = 4.0 * nd(rng);
    for (auto& v : h.bias) v = nd(rng);
    teacher.set_head(h);
    h = student.clone_head();
    for (auto& v : h.weight) v = 4.0 * nd(rng);
    student.set_head(h);
    batch = MetaBatch{random_images(2, H, W, rng), random_images(2, H, W, rng), random_images(2, H, W, rng), {}};
    for (int i = 0; i < 2; ++i) {
      LabelMap l(H, W);
      for (auto& v : l.values) v = static_cast<std::uint8_t>(rng() % C);
      batch.mixed_labels.push_back(l);
    }
  }
};

}  // namespace

TEST(WarmupLambda, ScheduleAndClamp) {
  EXPECT_DOUBLE_EQ(warmup_lambda(0, 250), 0.0);
  EXPECT_DOUBLE_EQ(warmup_lambda(250, 250), 1.0);
  EXPECT_DOUBLE_EQ(warmup_lambda(500, 250), 1.0);
  EXPECT_DOUBLE_EQ(warmup_lambda(125, 250), 0.5);
  double prev = 0.0;
  for (long t = 0; t <= 600; ++t) {
    const double l = warmup_lambda(t, 250);
    EXPECT_GE(l, prev);
    EXPECT_LE(l, 1.0);
    prev = l;
  }
  EXPECT_THROW(warmup_lambda(3, 0), DomainError);
}

TEST(DacalConfig, Validation) {
  DacalConfig c;
  EXPECT_NO_THROW(validate(c));
  c.warmup_iterations = 0;
  EXPECT_THROW(validate(c), ConfigError);
  c = DacalConfig{};
  c.alpha = -1.0;
  EXPECT_THROW(validate(c), ConfigError);
  c = DacalConfig{};
  c.mtn_ema_gamma = 1.5;
  EXPECT_THROW(validate(c), ConfigError);
}

TEST(CalibratedSoftTargets, UnitTemperatureIsTeacherSoftmax) {
  Rng rng(1);
  const SegNet teacher(SegNetConfig{3, 3, {4, 4, 4}}, rng);
  Mtn mtn(MtnConfig{3, 3, 4, 3, 3, 1.0}, rng);
  set_constant_temperature(mtn, 1.0);
  const Tensor x = random_images(2, 8, 8, rng);
  const auto targets = calibrated_soft_targets(teacher, mtn, x);
  const Tensor p = softmax(teacher.forward(x));
  for (int i = 0; i < 2; ++i)
    for (int c = 0; c < 3; ++c)
      for (int q = 0; q < 64; ++q) EXPECT_NEAR(targets[i].at(c, q), p.channel(i, c)[q], 1e-12);
}

TEST(CalibratedSoftTargets, CeilingTemperatureIsNearlyUniform) {
  Rng rng(2);
  SegNet teacher(SegNetConfig{3, 3, {4, 4, 4}}, rng);
  Mtn mtn(MtnConfig{3, 3, 4, 3, 3, 1.0}, rng);
  set_constant_temperature(mtn, 20.0);
  const Tensor x = random_images(2, 8, 8, rng);
  const Tensor z = teacher.forward(x);
  for (double v : z.data) ASSERT_LE(std::abs(v), 3.0);
  for (const auto& t : calibrated_soft_targets(teacher, mtn, x))
    for (double v : t.values) EXPECT_NEAR(v, 1.0 / 3.0, 1e-2);
}

TEST(CalibratedSoftTargets, PreserveTeacherArgmax) {
  Rng rng(3);
  const SegNet teacher(SegNetConfig{3, 4, {4, 6, 6}}, rng);
  Mtn mtn(MtnConfig{3, 4, 4, 3, 3, 1.0}, rng);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto* p : mtn.parameters())
    for (auto& v : p->value) v = nd(rng);
  const Tensor x = random_images(3, 16, 16, rng);
  const auto targets = calibrated_soft_targets(teacher, mtn, x);
  const Tensor z = teacher.forward(x);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(argmax_labels(targets[i]).values, argmax_labels(logits_at(z, i)).values);
}

TEST(CalibratedSoftLoss, IdentitiesAndGradient) {
  Rng rng(4);
  HeadParams head{5, 4, {}, {}};
  std::normal_distribution<double> nd(0.0, 0.7);
  for (int k = 0; k < 20; ++k) head.weight.push_back(nd(rng));
  for (int k = 0; k < 4; ++k) head.bias.push_back(nd(rng));
  const Tensor fs = random_tensor(2, 5, 4, 4, rng), ft = random_tensor(1, 5, 4, 4, rng);
  const Tensor ps = softmax(apply_head(head, fs)), pt = softmax(apply_head(head, ft));

  // Targets equal to the head's own softmax: the loss is the (domain-averaged) entropy.
  auto mean_entropy = [](const Tensor& p) {
    double h = 0.0;
    for (double v : p.data) h -= v * std::log(v);
    return h / (p.n * p.plane());
  };
  EXPECT_NEAR(calibrated_soft_loss(head, fs, ft, ps, pt).value, 0.5 * mean_entropy(ps) + 0.5 * mean_entropy(pt),
              1e-12);

  // Uniform targets: ln C + KL(uniform || softmax) >= ln C.
  const Tensor us(2, 4, 4, 4, 0.25), ut(1, 4, 4, 4, 0.25);
  EXPECT_GE(calibrated_soft_loss(head, fs, ft, us, ut).value, std::log(4.0));

  // One-hot targets reduce to hard CE.
  Tensor hs(2, 4, 4, 4, 0.0), ht(1, 4, 4, 4, 0.0);
  std::vector<LabelMap> ls(2, LabelMap(4, 4)), lt(1, LabelMap(4, 4));
  for (int i = 0; i < 2; ++i)
    for (int q = 0; q < 16; ++q) {
      ls[i].values[q] = static_cast<std::uint8_t>(rng() % 4);
      hs.channel(i, ls[i].values[q])[q] = 1.0;
    }
  for (int q = 0; q < 16; ++q) {
    lt[0].values[q] = static_cast<std::uint8_t>(rng() % 4);
    ht.channel(0, lt[0].values[q])[q] = 1.0;
  }
  const double hard = 0.5 * hard_cross_entropy(apply_head(head, fs), ls).value +
                      0.5 * hard_cross_entropy(apply_head(head, ft), lt).value;
  const HeadLoss l = calibrated_soft_loss(head, fs, ft, hs, ht);
  EXPECT_NEAR(l.value, hard, 1e-12);

  // Head gradient against central differences.
  auto loss_at = [&](const HeadParams& h) { return calibrated_soft_loss(h, fs, ft, hs, ht).value; };
  for (std::size_t k = 0; k < head.weight.size(); ++k) {
    HeadParams up = head, down = head;
    up.weight[k] += 1e-5;
    down.weight[k] -= 1e-5;
    EXPECT_NEAR((loss_at(up) - loss_at(down)) / 2e-5, l.grad.weight[k], 1e-8);
  }
  for (std::size_t k = 0; k < head.bias.size(); ++k) {
    HeadParams up = head, down = head;
    up.bias[k] += 1e-5;
    down.bias[k] -= 1e-5;
    EXPECT_NEAR((loss_at(up) - loss_at(down)) / 2e-5, l.grad.bias[k], 1e-8);
  }
}

TEST(InnerStep, ZeroRateAndQuadraticToy) {
  HeadParams theta{1, 2, {0.3, -1.2}, {0.5, 2.0}};
  HeadParams grad{1, 2, {4.0, 5.0}, {-1.0, 1.0}};
  const HeadParams same = inner_step(theta, grad, 0.0);
  EXPECT_EQ(same.weight, theta.weight);
  EXPECT_EQ(same.bias, theta.bias);
  // L = sum (theta - c)^2 has gradient 2 (theta - c).
  const std::vector<double> c{1.0, 1.0, -1.0, 0.0};
  HeadParams g{1, 2, {2 * (0.3 - c[0]), 2 * (-1.2 - c[1])}, {2 * (0.5 - c[2]), 2 * (2.0 - c[3])}};
  const HeadParams next = inner_step(theta, g, 0.1);
  EXPECT_NEAR(next.weight[0], 0.3 - 0.2 * (0.3 - c[0]), 1e-15);
  EXPECT_NEAR(next.bias[1], 2.0 - 0.2 * (2.0 - c[3]), 1e-15);
  EXPECT_THROW(inner_step(theta, HeadParams{1, 1, {1.0}, {1.0}}, 0.1), ShapeError);
}

TEST(MetaGradient, MatchesLoopOracleFiniteDifferences) {
  MetaFixture f(7);
  ASSERT_EQ(f.mtn.parameter_count(), 157u);
  const double alpha = 1.0;
  f.mtn.zero_grad();
  const MetaOutcome o = accumulate_meta_gradient(f.student, f.teacher, f.mtn, f.batch, alpha, false);
  EXPECT_NEAR(o.l_mix, oracle::meta_loss(f.student, f.teacher, f.mtn, f.batch, alpha), 1e-12);
  double worst = 0.0;
  for (auto* p : f.mtn.parameters())
    for (std::size_t k = 0; k < p->size(); ++k) {
      const double old = p->value[k], h = 1e-4;
      p->value[k] = old + h;
      const double up = oracle::meta_loss(f.student, f.teacher, f.mtn, f.batch, alpha);
      p->value[k] = old - h;
      const double down = oracle::meta_loss(f.student, f.teacher, f.mtn, f.batch, alpha);
      p->value[k] = old;
      const double fd = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(fd - p->grad[k]) / std::max({std::abs(fd), std::abs(p->grad[k]), 1e-12}));
    }
  EXPECT_LT(worst, 1e-3);
}

TEST(MetaGradient, ZeroAlphaGivesZeroGradient) {
  MetaFixture f(8);
  f.mtn.zero_grad();
  accumulate_meta_gradient(f.student, f.teacher, f.mtn, f.batch, 0.0, false);
  for (const auto* p : std::as_const(f.mtn).parameters())
    for (double g : p->grad) EXPECT_EQ(g, 0.0);
}

TEST(MetaGradient, BackboneAndTeacherUntouched) {
  MetaFixture f(9);
  const auto student = flatten(std::as_const(f.student).state());
  const auto teacher = flatten(std::as_const(f.teacher).state());
  f.mtn.zero_grad();
  accumulate_meta_gradient(f.student, f.teacher, f.mtn, f.batch, 1.0, true);
  EXPECT_EQ(flatten(std::as_const(f.student).state()), student);
  EXPECT_EQ(flatten(std::as_const(f.teacher).state()), teacher);
  for (const auto* p : std::as_const(f.student).parameters())
    for (double g : p->grad) EXPECT_EQ(g, 0.0);
  for (const auto* p : std::as_const(f.teacher).parameters())
    for (double g : p->grad) EXPECT_EQ(g, 0.0);
}

TEST(MetaUpdate, ZeroRatesLeavePsi) {
  for (auto [alpha, beta] : {std::pair{1.0, 0.0}, std::pair{0.0, 1.0}}) {
    MetaFixture f(10);
    const auto before = params_of(f.mtn);
    meta_update_mtn(f.student, f.teacher, f.mtn, f.batch, alpha, beta, 0);
    EXPECT_EQ(params_of(f.mtn), before) << "alpha=" << alpha << " beta=" << beta;
  }
  MetaFixture f(11);
  const auto before = params_of(f.mtn);
  meta_update_mtn(f.student, f.teacher, f.mtn, f.batch, 1.0, 1.0, 0);
  EXPECT_NE(params_of(f.mtn), before);
}

TEST(MetaUpdate, DescendsTheMetaObjective) {
  MetaFixture f(12);
  const double alpha = 1.0;
  const double before = oracle::meta_loss(f.student, f.teacher, f.mtn, f.batch, alpha);
  meta_update_mtn(f.student, f.teacher, f.mtn, f.batch, alpha, 1e-3, 0, false);
  EXPECT_LT(oracle::meta_loss(f.student, f.teacher, f.mtn, f.batch, alpha), before);
}

TEST(OuterLoss, KnownValues) {
  Rng rng(13);
  const Tensor z = random_tensor(1, 3, 4, 4, rng);
  std::vector<LabelMap> hard{LabelMap(4, 4)};
  for (auto& v : hard[0].values) v = static_cast<std::uint8_t>(rng() % 3);
  const std::vector<double> w(16, 1.0);
  Tensor onehot(1, 3, 4, 4, 0.0);
  for (int q = 0; q < 16; ++q) onehot.channel(0, hard[0].values[q])[q] = 1.0;
  const Tensor soft = softmax(random_tensor(1, 3, 4, 4, rng));
  const double ce = hard_cross_entropy(z, hard, w).value;
  EXPECT_EQ(outer_unsupervised_loss(z, hard, w, soft, 0.0).value, ce);
  EXPECT_NEAR(outer_unsupervised_loss(z, hard, w, onehot, 1.0).value, 2.0 * ce, 1e-12);
  const std::vector<double> q0(16, 0.0);
  EXPECT_EQ(outer_unsupervised_loss(z, hard, q0, soft, 1.0).value, 0.0);
}

TEST(BiLoss, KnownValuesAndGradient) {
  Tensor z(1, 2, 1, 1, 0.0);
  z.data[0] = 2.0;
  const std::vector<LabelMap> y{LabelMap(1, 1, 0)};
  Tensor t(1, 1, 1, 1, 2.0);
  EXPECT_NEAR(dacal_bi_loss(z, y, t).value, -std::log(oracle::softmax({4.0, 0.0})[0]) / 2.0, 1e-12);
  EXPECT_NEAR(dacal_bi_loss(z, y, t).value, 0.00907, 1e-5);

  Rng rng(14);
  Tensor logits = random_tensor(2, 3, 4, 4, rng);
  std::vector<LabelMap> labels(2, LabelMap(4, 4));
  for (auto& l : labels)
    for (auto& v : l.values) v = static_cast<std::uint8_t>(rng() % 3);
  EXPECT_NEAR(dacal_bi_loss(logits, labels, Tensor(2, 1, 4, 4, 1.0)).value, hard_cross_entropy(logits, labels).value,
              1e-14);

  Tensor temps(2, 1, 4, 4);
  std::uniform_real_distribution<double> u(0.2, 3.0);
  for (auto& v : temps.data) v = u(rng);
  std::vector<double> w(32);
  for (auto& v : w) v = u(rng);
  const LossValue l = dacal_bi_loss(logits, labels, temps, w);
  for (std::size_t k = 0; k < logits.size(); ++k) {
    const double old = logits.data[k];
    logits.data[k] = old + 1e-5;
    const double up = dacal_bi_loss(logits, labels, temps, w).value;
    logits.data[k] = old - 1e-5;
    const double down = dacal_bi_loss(logits, labels, temps, w).value;
    logits.data[k] = old;
    EXPECT_NEAR((up - down) / 2e-5, l.grad.data[k], 1e-8);
  }
  EXPECT_THROW(dacal_bi_loss(logits, labels, Tensor(2, 1, 4, 3, 1.0)), ShapeError);
}

TEST(ArgmaxInvariance, PhBiAndSoftTargets) {
  Rng rng(15);
  const int n = 4, side = 50;  // 10^4 pixels
  const Tensor z = random_tensor(n, 5, side, side, rng, 3.0);
  Tensor temps(n, 1, side, side);
  std::uniform_real_distribution<double> lt(std::log(0.05), std::log(20.0));
  for (auto& v : temps.data) v = std::exp(lt(rng));
  const Tensor calibrated = softmax(z, temps);
  Tensor scaled = z;
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 5; ++c)
      for (int q = 0; q < side * side; ++q) scaled.channel(i, c)[q] *= temps.sample(i)[q];
  for (int i = 0; i < n; ++i) {
    const auto raw = argmax_labels(logits_at(z, i)).values;
    EXPECT_EQ(argmax_labels(logits_at(calibrated, i)).values, raw);
    EXPECT_EQ(argmax_labels(logits_at(scaled, i)).values, raw);
  }
}

TEST(InferPh, ArgmaxPreservedAndConfidenceChanges) {
  Rng rng(16);
  SegNet student(SegNetConfig{3, 4, {4, 6, 6}}, rng);
  Mtn mtn(MtnConfig{3, 4, 4, 3, 3, 1.0}, rng);
  std::normal_distribution<double> nd(0.0, 1.0);
  HeadParams head = student.clone_head();
  for (auto& v : head.weight) v = 2.0 * nd(rng);
  student.set_head(head);
  for (auto* p : mtn.parameters())
    for (auto& v : p->value) v = nd(rng);
  const Tensor x = random_images(2, 16, 16, rng);
  const auto ph = infer_ph(student, &mtn, x);
  const auto raw = infer_ph(student, nullptr, x);
  const Tensor z = student.forward(x);
  const Tensor plain = softmax(z);
  const Tensor temps = mtn.forward(x, z, nullptr);
  for (int i = 0; i < 2; ++i) {
    EXPECT_EQ(argmax_labels(ph[i]).values, argmax_labels(raw[i]).values);
    EXPECT_EQ(raw[i].values, logits_at(plain, i).values);
    for (int q = 0; q < 256; ++q)
      if (std::abs(temps.sample(i)[q] - 1.0) > 1e-3) {
        const int k = argmax_at(raw[i], q);
        EXPECT_NE(ph[i].at(k, q), raw[i].at(k, q));
      }
  }
}

TEST(DacalStep, ZeroRatesMatchBaselineDuringWarmup) {
  const Toy toy = toy_batches();
  TrainState a = small_state(1), b = small_state(1);
  const auto psi = params_of(*a.mtn);
  DacalConfig cfg;
  cfg.alpha = cfg.beta = 0.0;
  const auto da = dacal_step(a, toy.source, toy.target, SelfTrainingConfig{}, cfg);
  const auto db = baseline_step(b, toy.source, toy.target, SelfTrainingConfig{});
  EXPECT_EQ(da.lambda_soft, 0.0);
  EXPECT_EQ(da.l_s, db.l_s);
  EXPECT_EQ(da.l_u_hard, db.l_u_hard);
  EXPECT_EQ(flatten(std::as_const(a.student).state()), flatten(std::as_const(b.student).state()));
  EXPECT_EQ(flatten(std::as_const(a.teacher).state()), flatten(std::as_const(b.teacher).state()));
  EXPECT_EQ(params_of(*a.mtn), psi);
}

TEST(DacalStep, ZeroRatesAddOnlyTheSoftTermWithFrozenPsi) {
  const Toy toy = toy_batches();
  TrainState state = small_state(2);
  DacalConfig cfg;
  cfg.alpha = cfg.beta = 0.0;
  cfg.use_warmup = false;
  const SelfTrainingConfig st;
  const auto psi = params_of(*state.mtn);
  for (int step = 0; step < 3; ++step) {
    TrainState ref = state;
    dacal_step(state, toy.source, toy.target, st, cfg);
    EXPECT_EQ(params_of(*state.mtn), psi);
    for (const auto& [a, b] : {std::pair{params_of(*state.mtn_ema), psi}})
      for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-14 * (1 + std::abs(b[k])));

    // Reference: the baseline step with q-weighted soft CE (lambda 1) against the frozen calibrator.
    const auto bundles = make_pseudo_labels(ref.teacher, stack_images(toy.target.images), st.tau);
    std::vector<MixMask> outer;
    for (const auto& l : toy.source.labels) outer.push_back(make_mask_pair(l, st.mix_kind, st.mix_strategy, ref.rng).outer);
    const MixedBatch mixed = build_mixed_batch(toy.source, toy.target, bundles, outer);
    ref.student.zero_grad();
    SegNet::Trace trace;
    Tensor logits = ref.student.forward(stack_images(toy.source.images), nn::NormMode::Train, &trace);
    ref.student.backward(trace, hard_cross_entropy(logits, toy.source.labels).grad);
    const Tensor images = stack_images(mixed.images);
    logits = ref.student.forward(images, nn::NormMode::Train, &trace);
    const Tensor soft = softmax(logits, state.mtn_ema->forward(images, logits, nullptr));
    LossValue hard = hard_cross_entropy(logits, mixed.labels, mixed.weights);
    const LossValue sce = soft_cross_entropy(logits, soft, mixed.weights, mixed.labels);
    for (std::size_t k = 0; k < hard.grad.size(); ++k) hard.grad.data[k] += sce.grad.data[k];
    ref.student.backward(trace, hard.grad);
    ref.optimizer.step(ref.student.parameters());
    ema_update(ref.teacher, ref.student, st.teacher_ema_gamma);

    const auto got = flatten(std::as_const(state.student).state());
    const auto want = flatten(std::as_const(ref.student).state());
    for (std::size_t k = 0; k < got.size(); ++k) ASSERT_NEAR(got[k], want[k], 1e-12 * (1 + std::abs(want[k])));
  }
}

TEST(DacalStep, MtnEmaWithGammaZeroTracksLivePsi) {
  const Toy toy = toy_batches();
  TrainState state = small_state(3);
  DacalConfig cfg;
  cfg.alpha = 1.0;
  cfg.beta = 1.0;
  cfg.mtn_ema_gamma = 0.0;
  for (int step = 0; step < 3; ++step) {
    dacal_step(state, toy.source, toy.target, SelfTrainingConfig{}, cfg);
    EXPECT_EQ(flatten(std::as_const(*state.mtn_ema).state()), flatten(std::as_const(*state.mtn).state()));
  }
}

TEST(DacalStep, MtnEmaFollowsRecurrence) {
  const Toy toy = toy_batches();
  TrainState state = small_state(4);
  DacalConfig cfg;
  cfg.alpha = 1.0;
  cfg.beta = 1.0;
  cfg.mtn_ema_gamma = 0.7;
  for (int step = 0; step < 3; ++step) {
    const auto ema_before = flatten(std::as_const(*state.mtn_ema).state());
    dacal_step(state, toy.source, toy.target, SelfTrainingConfig{}, cfg);
    const auto live = flatten(std::as_const(*state.mtn).state());
    const auto ema = flatten(std::as_const(*state.mtn_ema).state());
    for (std::size_t k = 0; k < ema.size(); ++k) EXPECT_NEAR(ema[k], 0.7 * ema_before[k] + 0.3 * live[k], 1e-14);
  }
}

TEST(DacalStep, TeacherOnlyMovesByEma) {
  const Toy toy = toy_batches();
  for (auto variant : {CalibrationVariant::PostHoc, CalibrationVariant::BuiltIn}) {
    TrainState state = small_state(5);
    DacalConfig cfg;
    cfg.variant = variant;
    cfg.alpha = cfg.beta = 1.0;
    const auto phi0 = flatten(std::as_const(state.teacher).state());
    const auto d = dacal_step(state, toy.source, toy.target, SelfTrainingConfig{}, cfg);
    const auto theta1 = flatten(std::as_const(state.student).state());
    const auto phi1 = flatten(std::as_const(state.teacher).state());
    for (std::size_t k = 0; k < phi1.size(); ++k) EXPECT_NEAR(phi1[k], 0.95 * phi0[k] + 0.05 * theta1[k], 1e-14);
    for (const auto* p : std::as_const(state.teacher).parameters())
      for (double g : p->grad) EXPECT_EQ(g, 0.0);
    EXPECT_TRUE(std::isfinite(d.l_mix));
    EXPECT_GT(d.mean_t, 0.0);
  }
}

TEST(DacalStep, DeterministicTrajectory) {
  const Toy toy = toy_batches();
  DacalConfig cfg;
  cfg.alpha = cfg.beta = 0.5;
  cfg.warmup_iterations = 2;
  TrainState a = small_state(6), b = small_state(6);
  for (int step = 0; step < 5; ++step) {
    const auto da = dacal_step(a, toy.source, toy.target, SelfTrainingConfig{}, cfg);
    const auto db = dacal_step(b, toy.source, toy.target, SelfTrainingConfig{}, cfg);
    ASSERT_EQ(da.l_mix, db.l_mix);
    ASSERT_EQ(da.l_u_soft, db.l_u_soft);
    ASSERT_EQ(da.mean_t, db.mean_t);
  }
  EXPECT_EQ(params_of(*a.mtn), params_of(*b.mtn));
}

TEST(DacalStep, FaultsAndMissingMtn) {
  Toy toy = toy_batches();
  TrainState plain = make_train_state(SegNetConfig{3, 4, {4, 6, 6}}, std::nullopt, SelfTrainingConfig{}, 10, 1);
  EXPECT_THROW(dacal_step(plain, toy.source, toy.target, SelfTrainingConfig{}, DacalConfig{}), ConfigError);

  TrainState state = small_state(7);
  state.iteration = 42;
  toy.target.images[1].values[7] = std::numeric_limits<double>::infinity();
  try {
    dacal_step(state, toy.source, toy.target, SelfTrainingConfig{}, DacalConfig{});
    FAIL() << "expected a training fault";
  } catch (const TrainingFault& f) {
    EXPECT_EQ(f.iteration(), 42);
    EXPECT_FALSE(f.component().empty());
  }
}
