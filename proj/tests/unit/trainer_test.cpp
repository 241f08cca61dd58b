#include <gtest/gtest.h>

#include <cmath>

#include "oracle.hpp"
#include "tfm/errors.hpp"
#include "tfm/loss.hpp"
#include "tfm/trainer.hpp"

using namespace tfm;

namespace {

MaskedNetwork fresh_net(std::uint64_t seed = 1) {
  MaskedNetwork net(fixtures::mlp(6, {{8, 8}}), NetworkOptions{}, RngSeed{seed});
  const std::size_t a[] = {8};
  net.grow(1, a);
  net.begin_task(1, 3);
  return net;
}

}  // namespace

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  const std::vector<float> z(7, 0.3f);
  EXPECT_NEAR(cross_entropy(z, 2).loss, std::log(7.0), 1e-6);
}

TEST(CrossEntropy, LargeLogitIsStable) {
  const std::vector<float> z{1000.0f, 0.0f};
  const auto ce = cross_entropy(z, 0);
  EXPECT_NEAR(ce.loss, 0.0, 1e-12);
  EXPECT_TRUE(ce.grad_logits.all_finite());
  EXPECT_NEAR(cross_entropy(z, 1).loss, 1000.0, 1e-3);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  const Tensor t = fixtures::random_tensor({5}, 4, -2, 2);
  std::vector<double> z(t.data().begin(), t.data().end());
  auto loss = [](const std::vector<double>& v, std::size_t label) {
    double mx = v[0], s = 0.0;
    for (double x : v) mx = std::max(mx, x);
    for (double x : v) s += std::exp(x - mx);
    return std::log(s) + mx - v[label];
  };
  const std::vector<float> zf(t.data().begin(), t.data().end());
  const auto ce = cross_entropy(zf, 3);
  for (std::size_t i = 0; i < 5; ++i) {
    auto up = z, down = z;
    up[i] += 1e-5;
    down[i] -= 1e-5;
    EXPECT_NEAR(ce.grad_logits[i], (loss(up, 3) - loss(down, 3)) / 2e-5, 1e-4);
  }
  EXPECT_THROW(cross_entropy(zf, 5), DimensionError);
}

TEST(TrainerConfig, PaperDefaults) {
  const TrainerConfig c;
  EXPECT_EQ(c.batch_size, 64u);
  EXPECT_EQ(c.lr_init, 0.05);
  EXPECT_EQ(c.lr_decay_factor, 3.0);
  EXPECT_EQ(c.patience_epochs, 5u);
  EXPECT_EQ(c.lr_floor, 1e-4);
  EXPECT_EQ(c.max_epochs, 200u);
  EXPECT_EQ(c.dropout_p, 0.5);
  EXPECT_NO_THROW(c.validate());
  TrainerConfig bad;
  bad.lr_decay_factor = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = TrainerConfig{};
  bad.dropout_p = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(PlateauSchedule, StalledLossDecaysEveryPatiencePlusOneEpochs) {
  PlateauSchedule s{TrainerConfig{}};
  std::vector<double> lrs;
  std::size_t epoch = 0;
  bool stop = false;
  while (!stop) {
    ++epoch;
    lrs.push_back(s.lr());
    stop = s.observe(1.0).stop;
  }
  EXPECT_EQ(s.decays(), 6u);
  EXPECT_EQ(epoch, 31u);
  EXPECT_EQ(lrs.front(), 0.05);
  EXPECT_NEAR(s.lr(), 0.05 / 729, 1e-15);
}

TEST(PlateauSchedule, ImprovementNeedsMoreThanTolerance) {
  TrainerConfig c;
  c.patience_epochs = 1;
  PlateauSchedule s(c);
  EXPECT_TRUE(s.observe(1.0).improved);
  EXPECT_FALSE(s.observe(1.0 - 5e-6).improved);
  EXPECT_EQ(s.decays(), 1u);
  EXPECT_TRUE(s.observe(0.9).improved);
}

TEST(FitTask, OneEpochCap) {
  MaskedNetwork net = fresh_net();
  const Split tr = fixtures::blobs(3, 10, 6, 1, 1), va = fixtures::blobs(3, 3, 6, 1, 1);
  const auto rec = fit_task(net, 1, tr, va, fixtures::quick_trainer(1));
  EXPECT_EQ(rec.epochs.size(), 1u);
  EXPECT_EQ(rec.stop_reason, "epoch-cap");
}

TEST(FitTask, ImprovingLossKeepsInitialRate) {
  MaskedNetwork net = fresh_net();
  const Split tr = fixtures::blobs(3, 10, 6, 1, 1), va = fixtures::blobs(3, 3, 6, 1, 1);
  FitHooks hooks;
  hooks.val_loss = [](std::size_t epoch, double) { return 10.0 - double(epoch); };
  const auto rec = fit_task(net, 1, tr, va, fixtures::quick_trainer(8), hooks);
  for (double lr : rec.lr_trace()) EXPECT_EQ(lr, 0.05);
  EXPECT_EQ(rec.best_epoch, 8u);
}

TEST(FitTask, StalledLossFollowsDecaySchedule) {
  MaskedNetwork net = fresh_net();
  const Split tr = fixtures::blobs(3, 4, 6, 1, 1), va = fixtures::blobs(3, 2, 6, 1, 1);
  FitHooks hooks;
  hooks.val_loss = [](std::size_t, double) { return 2.0; };
  TrainerConfig c = fixtures::quick_trainer(200);
  const auto rec = fit_task(net, 1, tr, va, c, hooks);
  EXPECT_EQ(rec.stop_reason, "lr-floor");
  const auto trace = rec.lr_trace();
  ASSERT_EQ(trace.size(), 31u);
  for (std::size_t e = 0; e < trace.size(); ++e) {
    const double expected = 0.05 / std::pow(3.0, double(e == 0 ? 0 : (e - 1) / 5));
    EXPECT_NEAR(trace[e], expected, 1e-15) << e;
  }
  for (std::size_t e = 1; e < trace.size(); ++e) EXPECT_LE(trace[e], trace[e - 1]);
}

TEST(FitTask, RestoresBestEpoch) {
  MaskedNetwork net = fresh_net(2);
  const Split tr = fixtures::blobs(3, 20, 6, 5, 1), va = fixtures::blobs(3, 6, 6, 5, 1);
  const auto rec = fit_task(net, 1, tr, va, fixtures::quick_trainer(12));
  EXPECT_NEAR(evaluate(net, va, 1).loss, rec.best_val_loss, 1e-9);
}

TEST(FitTask, DeterministicUnderSeed) {
  const Split tr = fixtures::blobs(3, 20, 6, 5, 1), va = fixtures::blobs(3, 6, 6, 5, 1);
  MaskedNetwork a = fresh_net(3), b = fresh_net(3);
  const auto ra = fit_task(a, 1, tr, va, fixtures::quick_trainer(6, 9));
  const auto rb = fit_task(b, 1, tr, va, fixtures::quick_trainer(6, 9));
  EXPECT_EQ(ra.to_json(), rb.to_json());
  EXPECT_EQ(a.snapshot(), b.snapshot());
}

TEST(FitTask, EmptySplitIsDataError) {
  MaskedNetwork net = fresh_net();
  const Split tr = fixtures::blobs(3, 4, 6, 1, 1);
  EXPECT_THROW(fit_task(net, 1, tr, Split{Tensor({0, 6}), {}, {}}, fixtures::quick_trainer(1)), DataError);
  EXPECT_THROW(fit_task(net, 1, Split{Tensor({0, 6}), {}, {}}, tr, fixtures::quick_trainer(1)), DataError);
}

TEST(FitTask, FrozenParameterAudit) {
  MaskedNetwork net(fixtures::mlp(6, {{4, 8}, {4, 8}}), NetworkOptions{}, RngSeed{4});
  const std::size_t a1[] = {4, 4}, a2[] = {2, 2};
  net.grow(1, a1);
  net.begin_task(1, 3);
  fit_task(net, 1, fixtures::blobs(3, 10, 6, 1, 1), fixtures::blobs(3, 3, 6, 1, 1), fixtures::quick_trainer(3));
  net.end_task(1);
  const MaskedNetwork before = net;
  net.grow(2, a2);
  net.begin_task(2, 3);
  fit_task(net, 2, fixtures::blobs(3, 10, 6, 2, 2), fixtures::blobs(3, 3, 6, 2, 2), fixtures::quick_trainer(3));
  for (std::size_t l = 0; l < 2; ++l) {
    const auto& old = std::get<MaskedDense>(before.stages()[l].layer);
    const auto& now = std::get<MaskedDense>(net.stages()[l].layer);
    EXPECT_TRUE(bit_equal(block(now.weight, old.width(), old.in_width()), old.weight));
    for (std::size_t i = 0; i < old.width(); ++i) EXPECT_EQ(now.bias[i], old.bias[i]);
    EXPECT_TRUE(bit_equal(now.fn.at(1).gamma, old.fn.at(1).gamma));
  }
  EXPECT_TRUE(bit_equal(net.heads().at(1).weight, before.heads().at(1).weight));
}

TEST(Evaluate, AccuracyAndLossOnKnownHead) {
  MaskedNetwork net = fresh_net();
  Split s = fixtures::blobs(3, 4, 6, 1, 1);
  const auto r = evaluate(net, s, 1);
  EXPECT_EQ(r.count, 12u);
  EXPECT_GE(r.accuracy, 0.0);
  EXPECT_LE(r.accuracy, 1.0);
  const Tensor logits = net.predict(s.inputs, 1);
  double loss = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto row = std::span(logits.data()).subspan(i * 3, 3);
    loss += cross_entropy(row, s.labels[i]).loss;
    hits += std::size_t(std::max_element(row.begin(), row.end()) - row.begin()) == s.labels[i];
  }
  EXPECT_NEAR(r.loss, loss / 12, 1e-9);
  EXPECT_EQ(r.accuracy, double(hits) / 12);
}

TEST(SplitOps, SubsetAndConcat) {
  const Split a = fixtures::blobs(2, 3, 4, 1, 1), b = fixtures::blobs(2, 2, 4, 2, 2);
  const std::size_t idx[] = {4, 0};
  const Split s = subset(a, idx);
  EXPECT_EQ(s.labels, (std::vector<std::uint32_t>{a.labels[4], a.labels[0]}));
  EXPECT_EQ(s.inputs(0, 2), a.inputs(4, 2));
  const Split parts[] = {a, b};
  const Split c = concat(parts);
  EXPECT_EQ(c.size(), 10u);
  EXPECT_EQ(c.tasks.back(), 2u);
  const Split bad[] = {a, Split{Tensor({1, 5}), {0}, {1}}};
  EXPECT_THROW(concat(bad), DimensionError);
}
