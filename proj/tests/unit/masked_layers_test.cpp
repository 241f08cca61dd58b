#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracle.hpp"
#include "tfm/errors.hpp"
#include "tfm/masked_layers.hpp"

using namespace tfm;

namespace {

MaskedDense dense(std::size_t p, std::size_t q, std::uint64_t seed, bool fn = true) {
  MaskedDense d;
  d.weight = fixtures::random_tensor({p, q}, seed);
  d.bias = fixtures::random_tensor({p}, seed + 1000);
  d.fn_enabled = fn;
  d.dropout = false;
  return d;
}

MaskedConv conv(std::size_t co, std::size_t ci, std::size_t k, std::uint64_t seed) {
  MaskedConv c;
  c.kernels = fixtures::random_tensor({co, ci, k, k}, seed);
  c.bias = fixtures::random_tensor({co}, seed + 1000);
  c.pad = k / 2;
  return c;
}

double weighted_sum(const Tensor& y, const Tensor& g) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += double(y[i]) * g[i];
  return s;
}

}  // namespace

TEST(ForwardDense, IdentityNormalizationIsPlainLayer) {
  MaskedDense d = dense(3, 4, 1);
  add_fn_params(d, 1);
  const Tensor x = fixtures::random_tensor({2, 4}, 2);
  const Tensor y = forward_dense(d, x, 1, ones(4), ones(3), {});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 3; ++i) {
      float acc = d.bias[i];
      for (std::size_t j = 0; j < 4; ++j) acc += d.weight(i, j) * x(b, j);
      EXPECT_NEAR(y(b, i), std::max(acc, 0.0f), 1e-6);
    }
}

TEST(ForwardDense, ZeroMaskGivesExactZero) {
  MaskedDense d = dense(3, 4, 3);
  add_fn_params(d, 1);
  d.fn.at(1).beta = Tensor({3}, 7.0f);
  const Tensor y = forward_dense(d, fixtures::random_tensor({5, 4}, 4), 1, ones(4), zeros(3), {});
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(ForwardDense, HandEvaluatedComposition) {
  MaskedDense d;
  d.weight = Tensor::matrix({{1, 1}, {1, 1}});
  d.bias = Tensor({2});
  d.dropout = false;
  add_fn_params(d, 1);
  d.fn.at(1).gamma = Tensor::vector({2, 1});
  d.fn.at(1).beta = Tensor::vector({0, 5});
  const Tensor y = forward_dense(d, Tensor::matrix({{1, 2}}), 1, ones(2), Mask{1, 0}, {});
  EXPECT_EQ(y(0, 0), 6.0f);
  EXPECT_EQ(y(0, 1), 0.0f);
}

TEST(ForwardDense, MissingFnParamsIsLookupError) {
  MaskedDense d = dense(2, 2, 5);
  EXPECT_THROW(forward_dense(d, Tensor({1, 2}), 1, ones(2), ones(2), {}), LookupError);
  d.fn_enabled = false;
  EXPECT_NO_THROW(forward_dense(d, Tensor({1, 2}), 1, ones(2), ones(2), {}));
}

TEST(ForwardDense, ReadsOnlyTheMaskedBlock) {
  MaskedDense d = dense(5, 6, 6, false);
  const Tensor x = fixtures::random_tensor({3, 4}, 7);
  const Tensor before = forward_dense(d, x, 1, ones(4), ones(3), {});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 6; ++j)
      if (i >= 3 || j >= 4) d.weight(i, j) = 1e6f;
  d.bias[3] = d.bias[4] = -1e6f;
  EXPECT_TRUE(bit_equal(before, forward_dense(d, x, 1, ones(4), ones(3), {})));
}

TEST(ForwardDense, EvaluationIsDeterministicAndDropoutFree) {
  MaskedDense d = dense(8, 4, 8, false);
  d.dropout = true;
  const Tensor x = fixtures::random_tensor({4, 4}, 9);
  ForwardMode eval{false, 0.5, nullptr};
  EXPECT_TRUE(bit_equal(forward_dense(d, x, 1, ones(4), ones(8), eval), forward_dense(d, x, 1, ones(4), ones(8), eval)));
}

TEST(ForwardDense, InvertedDropoutOverVisibleFeatures) {
  MaskedDense d = dense(200, 3, 10, false);
  d.dropout = true;
  d.bias = Tensor({200}, 1.0f);
  d.weight = Tensor({200, 3});
  Rng rng(RngSeed{3});
  ForwardMode train{true, 0.5, &rng};
  Mask n_out = ones(200);
  for (std::size_t i = 100; i < 200; ++i) n_out[i] = 0;
  LayerCache cache;
  const Tensor y = forward_dense(d, Tensor({50, 3}), 1, ones(3), n_out, train, &cache);
  std::size_t kept = 0;
  for (std::size_t b = 0; b < 50; ++b)
    for (std::size_t i = 0; i < 200; ++i) {
      if (i >= 100) {
        EXPECT_EQ(y(b, i), 0.0f);
        continue;
      }
      EXPECT_TRUE(y(b, i) == 0.0f || y(b, i) == 2.0f);
      kept += y(b, i) == 2.0f;
    }
  EXPECT_NEAR(double(kept) / 5000.0, 0.5, 0.03);
  EXPECT_TRUE(cache.valid);
}

TEST(BackwardDense, RequiresTrainingCache) {
  MaskedDense d = dense(2, 2, 11, false);
  LayerCache cache;
  (void)forward_dense(d, Tensor({1, 2}), 1, ones(2), ones(2), {}, &cache);
  EXPECT_FALSE(cache.valid);
  EXPECT_THROW(backward_dense(d, Tensor({1, 2}), 1, ones(2), ones(2), ones(2), ones(2), cache), ContractError);
}

TEST(BackwardDense, FirstTaskMatchesUnmaskedFiniteDifferences) {
  MaskedDense d = dense(3, 4, 12);
  add_fn_params(d, 1);
  d.fn.at(1).gamma = fixtures::random_tensor({3}, 13, 0.5, 1.5);
  d.fn.at(1).beta = fixtures::random_tensor({3}, 14, -0.2, 0.2);
  const Tensor x = fixtures::random_tensor({5, 4}, 15);
  const Tensor g = fixtures::random_tensor({5, 3}, 16);
  ForwardMode train{true, 0.0, nullptr};
  LayerCache cache;
  const Tensor y = forward_dense(d, x, 1, ones(4), ones(3), train, &cache);
  const auto r = backward_dense(d, g, 1, ones(3), ones(4), ones(3), ones(4), cache);
  auto f = [&](const MaskedDense& l, const Tensor& in) { return weighted_sum(forward_dense(l, in, 1, ones(4), ones(3), {}), g); };
  const float h = 1e-3f;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      MaskedDense up = d, down = d;
      up.weight(i, j) += h;
      down.weight(i, j) -= h;
      EXPECT_NEAR(r.grads.weight(i, j), (f(up, x) - f(down, x)) / (2 * h), 2e-3);
    }
  for (std::size_t i = 0; i < 3; ++i) {
    MaskedDense up = d, down = d;
    up.fn.at(1).gamma[i] += h;
    down.fn.at(1).gamma[i] -= h;
    EXPECT_NEAR(r.grads.fn->gamma[i], (f(up, x) - f(down, x)) / (2 * h), 2e-3);
    up = d;
    down = d;
    up.bias[i] += h;
    down.bias[i] -= h;
    EXPECT_NEAR(r.grads.bias[i], (f(up, x) - f(down, x)) / (2 * h), 2e-3);
  }
  for (std::size_t j = 0; j < 4; ++j) {
    Tensor up = x, down = x;
    up(0, j) += h;
    down(0, j) -= h;
    EXPECT_NEAR(r.grad_x(0, j), (f(d, up) - f(d, down)) / (2 * h), 2e-3);
  }
  EXPECT_EQ(y.shape(), (Shape{5, 3}));
}

TEST(BackwardDense, OrRuleZeroesOldOldEntriesExactly) {
  // Task 2 owns output feature 1 only; the input features are all old.
  MaskedDense d = dense(2, 2, 17);
  add_fn_params(d, 2);
  const Tensor x = fixtures::random_tensor({6, 2}, 18, 0.1, 1.0);
  d.weight = Tensor::matrix({{0.5f, 0.5f}, {0.7f, 0.3f}});
  d.bias = Tensor::vector({0.1f, 0.1f});
  ForwardMode train{true, 0.0, nullptr};
  LayerCache cache;
  (void)forward_dense(d, x, 2, ones(2), ones(2), train, &cache);
  const Mask m_out{0, 1}, m_in{0, 0};
  const auto r = backward_dense(d, Tensor({6, 2}, 1.0f), 2, m_out, m_in, ones(2), ones(2), cache);
  EXPECT_EQ(r.grads.weight(0, 0), 0.0f);
  EXPECT_EQ(r.grads.weight(0, 1), 0.0f);
  EXPECT_EQ(r.grads.bias[0], 0.0f);
  EXPECT_NE(r.grads.weight(1, 0), 0.0f);
  EXPECT_NE(r.grads.bias[1], 0.0f);
  // FN of the task still adapts the old feature.
  EXPECT_NE(r.grads.fn->gamma[0], 0.0f);
  const auto mask = gradient_mask_task_il(m_out, m_in);
  for (std::size_t k = 0; k < 4; ++k)
    if (mask[k] == 0) EXPECT_EQ(r.grads.weight[k], 0.0f);
}

TEST(BackwardDense, InputGradientMaskedByNIn) {
  MaskedDense d = dense(3, 3, 19, false);
  ForwardMode train{true, 0.0, nullptr};
  LayerCache cache;
  const Tensor x = fixtures::random_tensor({2, 3}, 20, 0.1, 1.0);
  (void)forward_dense(d, x, 1, Mask{1, 0, 1}, ones(3), train, &cache);
  const auto r = backward_dense(d, Tensor({2, 3}, 1.0f), 1, ones(3), ones(3), ones(3), Mask{1, 0, 1}, cache);
  EXPECT_EQ(r.grad_x(0, 1), 0.0f);
  EXPECT_EQ(r.grad_x(1, 1), 0.0f);
}

TEST(ApplySgd, FnLocality) {
  MaskedDense d = dense(3, 2, 21);
  add_fn_params(d, 1);
  add_fn_params(d, 2);
  d.fn.at(1).gamma = fixtures::random_tensor({3}, 22);
  const FnParams old = d.fn.at(1);
  ForwardMode train{true, 0.0, nullptr};
  LayerCache cache;
  (void)forward_dense(d, fixtures::random_tensor({4, 2}, 23), 2, ones(2), ones(3), train, &cache);
  const auto r = backward_dense(d, Tensor({4, 3}, 1.0f), 2, ones(3), ones(2), ones(3), ones(2), cache);
  apply_sgd(d, r.grads, 0.1f);
  EXPECT_TRUE(bit_equal(d.fn.at(1).gamma, old.gamma));
  EXPECT_TRUE(bit_equal(d.fn.at(1).beta, old.beta));
  EXPECT_FALSE(bit_equal(d.fn.at(2).beta, Tensor({3})));
}

TEST(ForwardConv, MaskedChannelIsZeroMap) {
  MaskedConv c = conv(3, 2, 3, 30);
  add_fn_params(c, 1);
  const Tensor y = forward_conv(c, fixtures::random_tensor({2, 2, 5, 5}, 31), 1, ones(2), Mask{1, 0, 1}, {});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(y(b, 1, i, j), 0.0f);
}

TEST(ForwardConv, PointwiseKernelIsDensePerSite) {
  MaskedConv c = conv(3, 2, 1, 32);
  c.pad = 0;
  add_fn_params(c, 1);
  c.fn.at(1).gamma = fixtures::random_tensor({3}, 33, 0.5, 1.5);
  MaskedDense d;
  d.weight = c.kernels.reshaped({3, 2});
  d.bias = c.bias;
  d.dropout = false;
  d.fn[1] = c.fn.at(1);
  const Tensor x = fixtures::random_tensor({1, 2, 3, 4}, 34);
  const Tensor y = forward_conv(c, x, 1, ones(2), ones(3), {});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      Tensor site({1, 2});
      for (std::size_t ch = 0; ch < 2; ++ch) site(0, ch) = x(0, ch, i, j);
      const Tensor ref = forward_dense(d, site, 1, ones(2), ones(3), {});
      for (std::size_t o = 0; o < 3; ++o) EXPECT_FLOAT_EQ(y(0, o, i, j), ref(0, o));
    }
}

TEST(ForwardConv, IdentityKernelIsRelu) {
  MaskedConv c;
  c.kernels = Tensor({1, 1, 1, 1}, 1.0f);
  c.bias = Tensor({1});
  add_fn_params(c, 1);
  const Tensor x = fixtures::random_tensor({1, 1, 4, 4}, 35);
  const Tensor y = forward_conv(c, x, 1, ones(1), ones(1), {});
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], std::max(x[i], 0.0f));
}

TEST(BackwardConv, MatchesFiniteDifferencesAndMasksSlices) {
  MaskedConv c = conv(3, 2, 3, 36);
  add_fn_params(c, 1);
  const Tensor x = fixtures::random_tensor({2, 2, 4, 4}, 37);
  const Tensor g = fixtures::random_tensor({2, 3, 4, 4}, 38);
  ForwardMode train{true, 0.0, nullptr};
  LayerCache cache;
  (void)forward_conv(c, x, 1, ones(2), ones(3), train, &cache);
  const auto full = backward_conv(c, g, 1, ones(3), ones(2), ones(3), ones(2), cache);
  auto f = [&](const MaskedConv& l) { return weighted_sum(forward_conv(l, x, 1, ones(2), ones(3), {}), g); };
  const float h = 1e-3f;
  for (std::size_t k = 0; k < c.kernels.size(); k += 5) {
    MaskedConv up = c, down = c;
    up.kernels[k] += h;
    down.kernels[k] -= h;
    EXPECT_NEAR(full.grads.weight[k], (f(up) - f(down)) / (2 * h), 5e-3);
  }
  const Mask m_out{0, 1, 0}, m_in{1, 0};
  const auto masked = backward_conv(c, g, 1, m_out, m_in, ones(3), Mask{1, 0}, cache);
  const auto rule = gradient_mask_task_il(m_out, m_in);
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t a = 0; a < 9; ++a) {
        const float v = masked.grads.weight[(o * 2 + i) * 9 + a];
        if (rule[o * 2 + i] == 0) EXPECT_EQ(v, 0.0f);
        else EXPECT_EQ(v, full.grads.weight[(o * 2 + i) * 9 + a]);
      }
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t p = 0; p < 16; ++p) EXPECT_EQ(masked.grad_x[(b * 2 + 1) * 16 + p], 0.0f);
}

TEST(Binary, AndRuleAndDisjointHalves) {
  MaskedDense d = dense(8, 8, 40, false);
  const Mask first{1, 1, 1, 1, 0, 0, 0, 0}, second{0, 0, 0, 0, 1, 1, 1, 1};
  const Tensor x = fixtures::random_tensor({3, 8}, 41);
  Tensor x_masked = x;
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t j = 0; j < 4; ++j) x_masked(b, j) = 0.0f;
  const Tensor before = forward_binary(d, x_masked, second, second, {});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 8; ++j) d.weight(i, j) = 99.0f;
  EXPECT_TRUE(bit_equal(before, forward_binary(d, x_masked, second, second, {})));
  const auto m = gradient_mask_binary(Mask{1}, Mask{0});
  EXPECT_EQ(m[0], 0);
  ForwardMode train{true, 0.0, nullptr};
  LayerCache cache;
  (void)forward_binary(d, x, first, first, train, &cache);
  const auto r = backward_binary(d, Tensor({3, 8}, 1.0f), first, first, cache);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j)
      if (!(first[i] && first[j])) EXPECT_EQ(r.grads.weight(i, j), 0.0f);
}

TEST(Binary, SingleTaskOwningAllIsPlainLayer) {
  MaskedDense d = dense(4, 3, 42, false);
  const Tensor x = fixtures::random_tensor({2, 3}, 43);
  EXPECT_TRUE(bit_equal(forward_binary(d, x, ones(3), ones(4), {}), forward_dense(d, x, 1, ones(3), ones(4), {})));
}

TEST(Head, AffineMap) {
  TaskHead h;
  h.task = 1;
  h.weight = fixtures::random_tensor({3, 4}, 50);
  h.bias = fixtures::random_tensor({3}, 51);
  const Tensor zero_logits = head_forward(h, Tensor({1, 4}));
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(zero_logits(0, c), h.bias[c]);
  const Tensor f = fixtures::random_tensor({5, 4}, 52);
  const Tensor ref = matmul(f, transpose(h.weight));
  const Tensor y = head_forward(h, f);
  for (std::size_t b = 0; b < 5; ++b)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(y(b, c), ref(b, c) + h.bias[c], 1e-6);
  h.weight = Tensor::matrix({{1, 0}, {0, 1}});
  h.bias = Tensor::vector({0.5f, -0.5f});
  const Tensor id = head_forward(h, Tensor::matrix({{2, 3}}));
  EXPECT_EQ(id(0, 0), 2.5f);
  EXPECT_EQ(id(0, 1), 2.5f);
  EXPECT_THROW(head_forward(h, Tensor({1, 3})), DimensionError);
}

TEST(Pool, BackwardRoutesToArgmax) {
  MaxPool pool;
  const Tensor x({1, 1, 2, 2}, std::vector<float>{1, 4, 3, 2});
  PoolCache cache;
  const Tensor y = maxpool_forward(pool, x, &cache);
  EXPECT_EQ(y[0], 4.0f);
  const Tensor g = maxpool_backward(pool, Tensor({1, 1, 1, 1}, 1.0f), cache);
  EXPECT_EQ(g.shape(), x.shape());
  EXPECT_EQ(g[1], 1.0f);
  EXPECT_EQ(g[0] + g[2] + g[3], 0.0f);
}

TEST(GradientMask, GeneralEqualsOrRuleOnRandomLedgers) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const TaskId tasks = 1 + rng() % 4;
    OwnershipLedger l(2);
    for (TaskId t = 0; t < tasks; ++t) {
      const std::size_t add[] = {rng() % 5, rng() % 5};
      l.register_task(add);
    }
    const TaskId t = tasks;
    const Mask n_out = derive_n(l, 1, t), n_in = derive_n(l, 0, t);
    const Mask prev_out = t > 1 ? derive_n(l, 1, t - 1) : Mask{}, prev_in = t > 1 ? derive_n(l, 0, t - 1) : Mask{};
    const auto general = gradient_mask_general(n_out, n_in, pad(prev_out, n_out.size()), pad(prev_in, n_in.size()));
    const auto rule = gradient_mask_task_il(derive_m(l, 1, t), derive_m(l, 0, t));
    for (std::size_t i = 0; i < n_out.size(); ++i)
      for (std::size_t j = 0; j < n_in.size(); ++j) {
        if (!n_out[i] || !n_in[j]) continue;  // features that exist for the task
        EXPECT_EQ(general[i * n_in.size() + j], rule[i * n_in.size() + j]);
      }
  }
}
