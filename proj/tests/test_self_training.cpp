#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "dacal/datasets.hpp"
#include "dacal/errors.hpp"
#include "dacal/self_training.hpp"
#include "oracles.hpp"

using namespace dacal;

namespace {

Tensor random_tensor(int n, int c, int h, int w, Rng& rng, double sd = 1.0) {
  Tensor t(n, c, h, w);
  std::normal_distribution<double> nd(0.0, sd);
  for (auto& v : t.data) v = nd(rng);
  return t;
}

std::vector<LabelMap> random_labels(int n, int classes, int h, int w, Rng& rng) {
  std::vector<LabelMap> out;
  for (int i = 0; i < n; ++i) {
    LabelMap l(h, w);
    for (auto& v : l.values) v = rng() % 7 == 0 ? kIgnoreLabel : static_cast<std::uint8_t>(rng() % classes);
    out.push_back(l);
  }
  return out;
}

std::vector<double> flat_state(const SegNet& net) {
  std::vector<double> out;
  for (auto s : net.state()) out.insert(out.end(), s.begin(), s.end());
  return out;
}

std::vector<double> flat_params(const SegNet& net) {
  std::vector<double> out;
  for (const auto* p : net.parameters()) out.insert(out.end(), p->value.begin(), p->value.end());
  return out;
}

struct Toy {
  Benchmark bench;
  SourceBatch source;
  TargetBatch target;
};

Toy toy_batches() {
  BenchmarkConfig c = default_benchmark_config();
  c.height = c.width = 16;
  c.source_train = 2;
  c.target_train = 2;
  c.target_val = 1;
  Toy t{make_benchmark(c), {}, {}};
  t.source.images = t.bench.source_train.images;
  t.source.labels = t.bench.source_train.labels;
  t.target.images = t.bench.target_train.images;
  return t;
}

TrainState small_state(std::uint64_t seed) {
  return make_train_state(SegNetConfig{3, 4, {4, 6, 6}}, std::nullopt, SelfTrainingConfig{}, 100, seed);
}

}  // namespace

TEST(HardCrossEntropy, KnownValues) {
  const Tensor uniform(1, 4, 3, 3, 0.0);
  Rng rng(1);
  const auto labels = random_labels(1, 4, 3, 3, rng);
  EXPECT_NEAR(hard_cross_entropy(uniform, labels).value, std::log(4.0), 1e-12);

  Tensor confident(1, 4, 3, 3, 0.0);
  for (int p = 0; p < 9; ++p)
    if (labels[0].values[p] != kIgnoreLabel) confident.channel(0, labels[0].values[p])[p] = 50.0;
  EXPECT_LT(hard_cross_entropy(confident, labels).value, 1e-20);

  const std::vector<LabelMap> ignored{LabelMap(3, 3, kIgnoreLabel)};
  EXPECT_THROW(hard_cross_entropy(uniform, ignored), EmptySampleError);
}

TEST(HardCrossEntropy, PermutationInvariantAndWeighted) {
  Rng rng(2);
  const Tensor z = random_tensor(1, 3, 1, 6, rng);
  const auto y = random_labels(1, 3, 1, 6, rng);
  Tensor zp = z;
  LabelMap yp = y[0];
  const int perm[6] = {3, 5, 0, 1, 4, 2};
  for (int p = 0; p < 6; ++p) {
    yp.values[p] = y[0].values[perm[p]];
    for (int c = 0; c < 3; ++c) zp.channel(0, c)[p] = z.channel(0, c)[perm[p]];
  }
  EXPECT_NEAR(hard_cross_entropy(z, y).value, hard_cross_entropy(zp, std::vector{yp}).value, 1e-14);
  const std::vector<double> half(6, 0.5);
  EXPECT_NEAR(hard_cross_entropy(z, y, half).value, 0.5 * hard_cross_entropy(z, y).value, 1e-14);
}

TEST(HardCrossEntropy, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  Tensor z = random_tensor(2, 3, 4, 4, rng);
  const auto y = random_labels(2, 3, 4, 4, rng);
  std::vector<double> w(32);
  for (auto& v : w) v = (rng() % 100) / 100.0;
  const LossValue l = hard_cross_entropy(z, y, w);
  for (std::size_t k = 0; k < z.size(); ++k) {
    const double old = z.data[k];
    z.data[k] = old + 1e-5;
    const double up = hard_cross_entropy(z, y, w).value;
    z.data[k] = old - 1e-5;
    const double down = hard_cross_entropy(z, y, w).value;
    z.data[k] = old;
    EXPECT_NEAR((up - down) / 2e-5, l.grad.data[k], 1e-8);
  }
}

TEST(SoftCrossEntropy, GradientAndEntropyIdentity) {
  Rng rng(4);
  Tensor z = random_tensor(1, 3, 3, 3, rng);
  const Tensor t = softmax(random_tensor(1, 3, 3, 3, rng));
  const LossValue l = soft_cross_entropy(z, t);
  for (std::size_t k = 0; k < z.size(); ++k) {
    const double old = z.data[k];
    z.data[k] = old + 1e-5;
    const double up = soft_cross_entropy(z, t).value;
    z.data[k] = old - 1e-5;
    const double down = soft_cross_entropy(z, t).value;
    z.data[k] = old;
    EXPECT_NEAR((up - down) / 2e-5, l.grad.data[k], 1e-8);
  }
  // CE(p, p) = H(p).
  Tensor logp = t;
  for (auto& v : logp.data) v = std::log(v);
  double entropy = 0.0;
  for (double v : t.data) entropy -= v * std::log(v);
  EXPECT_NEAR(soft_cross_entropy(logp, t).value, entropy / 9.0, 1e-12);
}

TEST(Softmax, TemperatureBroadcast) {
  Tensor z(1, 2, 1, 2, 0.0);
  z.channel(0, 0)[0] = 2.0;
  z.channel(0, 0)[1] = 2.0;
  Tensor t(1, 1, 1, 2);
  t.data = {1.0, 2.0};
  const Tensor p = softmax(z, t);
  EXPECT_NEAR(p.channel(0, 0)[0], 0.8808, 1e-4);
  EXPECT_NEAR(p.channel(0, 0)[1], 0.7311, 1e-4);
}

TEST(PseudoLabels, QualityCounts) {
  // 64 x 64 logits: the left half is confident (p ~ 1), the right half is uniform.
  Tensor z(1, 3, 64, 64, 0.0);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 32; ++x) z.at(0, 2, y, x) = 20.0;
  auto b = pseudo_labels_from_logits(z, 0.968);
  ASSERT_EQ(b.size(), 1u);
  EXPECT_DOUBLE_EQ(b[0].quality, 0.5);
  EXPECT_EQ(b[0].hard.values[0], 2);
  EXPECT_EQ(b[0].hard.values[63], 0);  // tie broken toward class 0
  EXPECT_NEAR(b[0].confidence[63], 1.0 / 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(pseudo_labels_from_logits(z, 0.2)[0].quality, 1.0);
  EXPECT_DOUBLE_EQ(pseudo_labels_from_logits(Tensor(1, 3, 8, 8, 0.0), 0.5)[0].quality, 0.0);
}

TEST(PseudoLabels, TeacherBundleMatchesLogits) {
  Rng rng(5);
  const SegNet teacher(SegNetConfig{3, 4, {4, 6, 6}}, rng);
  const Tensor x = random_tensor(2, 3, 8, 8, rng);
  const auto a = make_pseudo_labels(teacher, x, 0.6);
  const auto b = pseudo_labels_from_logits(teacher.forward(x), 0.6);
  for (int i = 0; i < 2; ++i) {
    EXPECT_EQ(a[i].hard.values, b[i].hard.values);
    EXPECT_EQ(a[i].quality, b[i].quality);
  }
}

TEST(SupervisedLosses, KnownValues) {
  Rng rng(6);
  const SegNet net(SegNetConfig{3, 4, {4, 6, 6}}, rng);
  Image im(8, 8, 0.3);
  PseudoLabelBundle bundle{LabelMap(8, 8, 1), std::vector<double>(64, 0.9), 0.0};
  EXPECT_DOUBLE_EQ(unsupervised_hard_loss(net, im, bundle), 0.0);
  bundle.quality = 1.0;
  const double ce = unsupervised_hard_loss(net, im, bundle);
  const SourceBatch batch{{im}, {bundle.hard}};
  EXPECT_NEAR(ce, supervised_loss(net, batch), 1e-14);
  bundle.quality = 0.5;
  EXPECT_NEAR(unsupervised_hard_loss(net, im, bundle), 0.5 * ce, 1e-14);
}

TEST(TeacherEma, ClosedFormOnToyParameters) {
  const double gamma = 0.9;
  std::vector<double> teacher{1.0, -2.0};
  const std::vector<double> phi0 = teacher;
  std::vector<std::vector<double>> students;
  Rng rng(7);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int t = 1; t <= 40; ++t) {
    std::vector<double> theta{nd(rng), nd(rng)};
    students.push_back(theta);
    std::vector<std::span<double>> tgt{teacher};
    std::vector<std::span<const double>> src{theta};
    ema_update(tgt, src, gamma);
    for (int i = 0; i < 2; ++i) {
      double expected = std::pow(gamma, t) * phi0[i];
      for (int k = 0; k < t; ++k) expected += (1 - gamma) * std::pow(gamma, t - 1 - k) * students[k][i];
      EXPECT_NEAR(teacher[i], expected, 1e-10);
    }
  }
}

TEST(BaselineStep, TeacherFollowsClosedFormEma) {
  Toy toy = toy_batches();
  TrainState state = small_state(1);
  SelfTrainingConfig cfg;
  cfg.teacher_ema_gamma = 0.8;
  const auto phi0 = flat_state(state.teacher);
  std::vector<std::vector<double>> thetas;
  for (int t = 1; t <= 6; ++t) {
    baseline_step(state, toy.source, toy.target, cfg);
    thetas.push_back(flat_state(state.student));
    const auto phi = flat_state(state.teacher);
    for (std::size_t i = 0; i < phi.size(); ++i) {
      double expected = std::pow(cfg.teacher_ema_gamma, t) * phi0[i];
      for (int k = 0; k < t; ++k) expected += (1 - cfg.teacher_ema_gamma) * std::pow(cfg.teacher_ema_gamma, t - 1 - k) * thetas[k][i];
      ASSERT_NEAR(phi[i], expected, 1e-10);
    }
  }
  EXPECT_EQ(state.iteration, 6);
}

TEST(BaselineStep, ZeroLearningRateKeepsStudent) {
  Toy toy = toy_batches();
  TrainState state = small_state(2);
  state.optimizer.set_lr(0.0);
  const auto theta = flat_params(state.student);
  const auto d = baseline_step(state, toy.source, toy.target, SelfTrainingConfig{});
  EXPECT_EQ(flat_params(state.student), theta);
  EXPECT_EQ(flat_params(state.teacher), theta);
  EXPECT_TRUE(std::isfinite(d.l_s));
  EXPECT_GE(d.q_mean, 0.0);
}

TEST(BaselineStep, UpdatesStudentAndMovesTeacher) {
  Toy toy = toy_batches();
  TrainState state = small_state(3);
  const auto phi0 = flat_params(state.teacher);
  baseline_step(state, toy.source, toy.target, SelfTrainingConfig{});
  const auto theta1 = flat_params(state.student);
  const auto phi1 = flat_params(state.teacher);
  EXPECT_NE(theta1, phi0);
  for (std::size_t i = 0; i < phi1.size(); ++i) EXPECT_NEAR(phi1[i], 0.95 * phi0[i] + 0.05 * theta1[i], 1e-14);
  // The teacher never carries gradients.
  for (const auto* p : std::as_const(state.teacher).parameters())
    for (double g : p->grad) EXPECT_EQ(g, 0.0);
}

TEST(BaselineStep, DeterministicTrajectory) {
  Toy toy = toy_batches();
  TrainState a = small_state(4), b = small_state(4);
  for (int t = 0; t < 10; ++t) {
    const auto da = baseline_step(a, toy.source, toy.target, SelfTrainingConfig{});
    const auto db = baseline_step(b, toy.source, toy.target, SelfTrainingConfig{});
    ASSERT_EQ(da.l_s, db.l_s);
    ASSERT_EQ(da.l_u_hard, db.l_u_hard);
  }
  EXPECT_EQ(flat_state(a.student), flat_state(b.student));
}

TEST(BaselineStep, NonFiniteLossIsTrainingFault) {
  Toy toy = toy_batches();
  TrainState state = small_state(5);
  state.iteration = 17;
  toy.source.images[0].values[5] = std::numeric_limits<double>::quiet_NaN();
  try {
    baseline_step(state, toy.source, toy.target, SelfTrainingConfig{});
    FAIL() << "expected a training fault";
  } catch (const TrainingFault& f) {
    EXPECT_EQ(f.iteration(), 17);
    EXPECT_EQ(f.component(), "L_s");
  }
}

TEST(SourceOnlyStep, IgnoresTargetAndReducesLoss) {
  Toy toy = toy_batches();
  TrainState state = small_state(6);
  SelfTrainingConfig cfg;
  cfg.lr = 0.05;
  state.optimizer.set_lr(cfg.lr);
  const double before = supervised_loss(state.student, toy.source);
  for (int t = 0; t < 30; ++t) source_only_step(state, toy.source, cfg);
  EXPECT_LT(supervised_loss(state.student, toy.source), before);
}
