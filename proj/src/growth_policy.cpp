#include "tfm/growth_policy.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "tfm/errors.hpp"

namespace tfm {

namespace {

std::size_t round_half_up(double x) {
  if (!(x > 0.0)) return 0;
  return static_cast<std::size_t>(std::floor(x + 0.5 + 1e-9));
}

}  // namespace

void GrowthPolicy::validate() const {
  if (!(margin >= 0.0)) throw ConfigError("growth: margin must be >= 0");
  if (mode == GrowthMode::kValidationSearch) {
    if (candidate_rates.empty()) throw ConfigError("growth: no candidate rates");
    for (double r : candidate_rates)
      if (!(r >= 0.0 && r <= 1.0)) throw ConfigError(fmt::format("growth: candidate rate {} outside [0, 1]", r));
    if (!std::is_sorted(candidate_rates.begin(), candidate_rates.end())) {
      throw ConfigError("growth: candidate rates must be ascending");
    }
  } else {
    if (schedule.empty()) throw ConfigError("growth: empty schedule");
    double total = 0.0;
    for (double r : schedule) {
      if (!(r >= 0.0 && r <= 1.0)) throw ConfigError(fmt::format("growth: schedule entry {} outside [0, 1]", r));
      total += r;
    }
    if (total > 1.0 + 1e-9) throw ConfigError(fmt::format("growth: schedule sums to {} > 1", total));
  }
}

nlohmann::json GrowthDecision::to_json() const {
  nlohmann::json j;
  j["task"] = task;
  j["chosen_rate"] = chosen_rate;
  j["effectively_zero"] = effectively_zero;
  j["added"] = added;
  auto& c = j["candidates"] = nlohmann::json::array();
  for (const auto& r : candidates) c.push_back({{"rate", r.rate}, {"val_accuracy", r.val_accuracy}, {"feasible", r.feasible}});
  return j;
}

std::vector<std::size_t> added_for_rate(std::span<const std::size_t> caps, double rate) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError(fmt::format("growth rate {} outside [0, 1]", rate));
  std::vector<std::size_t> out;
  out.reserve(caps.size());
  for (auto cap : caps) out.push_back(round_half_up(rate * static_cast<double>(cap)));
  return out;
}

GrowthDecision scheduled_rate(const GrowthPolicy& policy, TaskId task, std::span<const std::size_t> caps) {
  if (policy.mode != GrowthMode::kFixedSchedule) throw ContractError("scheduled_rate needs a fixed-schedule policy");
  if (task == 0) throw LookupError("tasks are numbered from 1");
  if (policy.schedule.empty()) throw ConfigError("growth: empty schedule");
  double cumulative = 0.0;
  for (TaskId t = 1; t <= task; ++t) cumulative += policy.schedule[std::min<std::size_t>(t - 1, policy.schedule.size() - 1)];
  if (cumulative > 1.0 + 1e-9) {
    throw CapacityError(fmt::format("task {}: cumulative growth {} exceeds the network cap", task, cumulative));
  }
  GrowthDecision d;
  d.task = task;
  d.chosen_rate = policy.schedule[std::min<std::size_t>(task - 1, policy.schedule.size() - 1)];
  d.added = added_for_rate(caps, d.chosen_rate);
  d.effectively_zero = std::all_of(d.added.begin(), d.added.end(), [](auto n) { return n == 0; });
  return d;
}

std::size_t choose_lowest_within_margin(std::span<const CandidateResult> results, double margin) {
  double best = -1.0;
  for (const auto& r : results)
    if (r.feasible) best = std::max(best, r.val_accuracy);
  if (best < 0.0) throw CapacityError("no growth candidate fits within the layer caps");
  for (std::size_t i = 0; i < results.size(); ++i)
    if (results[i].feasible && results[i].val_accuracy >= best - margin) return i;
  throw StateError("no candidate within margin");
}

GrowthDecision select_rate(const GrowthPolicy& policy, const MaskedNetwork& net, TaskId task, std::size_t classes,
                           const Split& train, const Split& val, const TrainerConfig& cfg) {
  if (policy.mode != GrowthMode::kValidationSearch) throw ContractError("select_rate needs a validation-search policy");
  policy.validate();
  const auto caps = net.arch().caps();
  TrainerConfig search_cfg = cfg;
  if (policy.search_max_epochs != 0) search_cfg.max_epochs = policy.search_max_epochs;

  GrowthDecision d;
  d.task = task;
  for (std::size_t i = 0; i < policy.candidate_rates.size(); ++i) {
    CandidateResult r;
    r.rate = policy.candidate_rates[i];
    MaskedNetwork trial = net;
    try {
      trial.grow(task, added_for_rate(caps, r.rate));
    } catch (const CapacityError&) {
      r.feasible = false;
      d.candidates.push_back(r);
      continue;
    }
    trial.begin_task(task, classes);
    search_cfg.seed = derive_seed(cfg.seed, 0x5ea4c4 + i);
    (void)fit_task(trial, task, train, val, search_cfg);
    r.val_accuracy = evaluate(trial, val, task).accuracy;
    spdlog::info("task {} candidate rate {} val accuracy {:.4f}", task, r.rate, r.val_accuracy);
    d.candidates.push_back(r);
  }
  const std::size_t pick = choose_lowest_within_margin(d.candidates, policy.margin);
  d.chosen_rate = d.candidates[pick].rate;
  d.added = added_for_rate(caps, d.chosen_rate);
  d.effectively_zero = std::all_of(d.added.begin(), d.added.end(), [](auto n) { return n == 0; });
  return d;
}

}  // namespace tfm
