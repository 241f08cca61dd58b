#include <gtest/gtest.h>

#include "oracle.hpp"
#include "tfm/errors.hpp"
#include "tfm/growth_policy.hpp"

using namespace tfm;

namespace {

GrowthPolicy fixed(std::vector<double> schedule) {
  GrowthPolicy p;
  p.mode = GrowthMode::kFixedSchedule;
  p.schedule = std::move(schedule);
  return p;
}

std::vector<CandidateResult> results(std::vector<double> rates, std::vector<double> accs) {
  std::vector<CandidateResult> r;
  for (std::size_t i = 0; i < rates.size(); ++i) r.push_back({rates[i], accs[i], true});
  return r;
}

}  // namespace

TEST(ChooseRate, TieGoesToLowest) {
  EXPECT_EQ(choose_lowest_within_margin(results({0.0, 0.1}, {0.80, 0.80}), kMarginCoarse), 0u);
}

TEST(ChooseRate, OnlyOneWithinMargin) {
  EXPECT_EQ(choose_lowest_within_margin(results({0.0, 0.1}, {0.60, 0.82}), kMarginCoarse), 1u);
}

TEST(ChooseRate, MarginIsAbsolute) {
  EXPECT_EQ(choose_lowest_within_margin(results({0.0, 0.1, 0.2}, {0.806, 0.81, 0.82}), 0.015), 0u);
  EXPECT_EQ(choose_lowest_within_margin(results({0.0, 0.1, 0.2}, {0.804, 0.81, 0.82}), 0.015), 1u);
  EXPECT_EQ(kMarginCoarse, 0.015);
  EXPECT_EQ(kMarginFineGrained, 0.001);
}

TEST(ChooseRate, InfeasibleSkippedAndAllInfeasibleThrows) {
  auto r = results({0.0, 0.1}, {0.9, 0.5});
  r[0].feasible = false;
  EXPECT_EQ(choose_lowest_within_margin(r, 0.015), 1u);
  r[1].feasible = false;
  EXPECT_THROW(choose_lowest_within_margin(r, 0.015), CapacityError);
}

TEST(ScheduledRate, FiftyFivePlusFive) {
  const auto p = fixed({0.55, 0.05});
  const std::size_t caps[] = {100};
  EXPECT_EQ(scheduled_rate(p, 1, caps).added, (std::vector<std::size_t>{55}));
  for (TaskId t = 2; t <= 10; ++t) EXPECT_EQ(scheduled_rate(p, t, caps).added, (std::vector<std::size_t>{5}));
  EXPECT_THROW(scheduled_rate(p, 11, caps), CapacityError);
}

TEST(ScheduledRate, FullNetworkImmediately) {
  const std::size_t caps[] = {7, 13};
  EXPECT_EQ(scheduled_rate(fixed({1.0}), 1, caps).added, (std::vector<std::size_t>{7, 13}));
}

TEST(ScheduledRate, HalfRoundsUp) {
  const auto p = fixed({0.5, 0.05});
  const std::size_t caps[] = {10};
  EXPECT_EQ(scheduled_rate(p, 2, caps).added, (std::vector<std::size_t>{1}));
  EXPECT_EQ(added_for_rate(caps, 0.05), (std::vector<std::size_t>{1}));
  EXPECT_EQ(added_for_rate(caps, 0.04), (std::vector<std::size_t>{0}));
}

TEST(ScheduledRate, EffectivelyZeroFlag) {
  const std::size_t caps[] = {4, 6};
  const auto d = scheduled_rate(fixed({0.5, 0.01}), 2, caps);
  EXPECT_TRUE(d.effectively_zero);
  EXPECT_EQ(d.chosen_rate, 0.01);
  EXPECT_FALSE(scheduled_rate(fixed({0.5, 0.0}), 1, caps).effectively_zero);
}

TEST(Policy, ValidateRejectsBadValues) {
  GrowthPolicy p;
  p.mode = GrowthMode::kValidationSearch;
  p.candidate_rates = {0.1, 0.0};
  EXPECT_THROW(p.validate(), ConfigError);
  p.candidate_rates = {0.0, 1.5};
  EXPECT_THROW(p.validate(), ConfigError);
  p.candidate_rates = {0.0};
  p.margin = -0.1;
  EXPECT_THROW(p.validate(), ConfigError);
  GrowthPolicy f = fixed({0.6, 0.5});
  EXPECT_THROW(f.validate(), ConfigError);
}

TEST(SelectRate, IsolatedAndDeterministic) {
  MaskedNetwork net(fixtures::mlp(6, {{4, 16}, {4, 16}}), NetworkOptions{}, RngSeed{2});
  const std::size_t a1[] = {4, 4};
  net.grow(1, a1);
  net.begin_task(1, 3);
  fit_task(net, 1, fixtures::blobs(3, 10, 6, 1, 1), fixtures::blobs(3, 3, 6, 1, 1), fixtures::quick_trainer(2));
  net.end_task(1);
  const auto before = net.snapshot();
  GrowthPolicy p;
  p.mode = GrowthMode::kValidationSearch;
  p.candidate_rates = {0.0, 0.25, 1.0};
  const Split tr = fixtures::blobs(3, 10, 6, 3, 2), va = fixtures::blobs(3, 4, 6, 3, 2);
  const auto d1 = select_rate(p, net, 2, 3, tr, va, fixtures::quick_trainer(3));
  const auto d2 = select_rate(p, net, 2, 3, tr, va, fixtures::quick_trainer(3));
  EXPECT_EQ(net.snapshot(), before);
  EXPECT_EQ(d1.to_json(), d2.to_json());
  ASSERT_EQ(d1.candidates.size(), 3u);
  EXPECT_FALSE(d1.candidates[2].feasible);
  EXPECT_TRUE(d1.chosen_rate == 0.0 || d1.chosen_rate == 0.25);
  EXPECT_EQ(d1.added, added_for_rate(std::vector<std::size_t>{16, 16}, d1.chosen_rate));
}
