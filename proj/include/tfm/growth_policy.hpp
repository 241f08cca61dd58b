#pragma once

// How much each growable layer widens before a new task: a fixed schedule
// or a validation search over candidate rates.

#include <cstddef>
#include <span>
#include <vector>

#include <json.hpp>

#include "tfm/network.hpp"
#include "tfm/trainer.hpp"

namespace tfm {

enum class GrowthMode : std::uint8_t { kValidationSearch, kFixedSchedule };

/// Margin presets, in absolute accuracy.
inline constexpr double kMarginCoarse = 0.015;
inline constexpr double kMarginFineGrained = 0.001;

struct GrowthPolicy {
  GrowthMode mode = GrowthMode::kFixedSchedule;
  std::vector<double> candidate_rates{0.0, 0.05, 0.1, 0.2};
  double margin = kMarginCoarse;
  /// Fraction of each cap: schedule[0] for task 1, schedule[t-1] added at task t.
  /// Tasks past the end reuse the last entry.
  std::vector<double> schedule{0.5, 0.125};
  std::size_t search_max_epochs = 0;  // 0 = the trainer's cap

  void validate() const;
  bool operator==(const GrowthPolicy&) const = default;
};

struct CandidateResult {
  double rate = 0.0;
  double val_accuracy = 0.0;
  bool feasible = true;
};

struct GrowthDecision {
  TaskId task = 0;
  double chosen_rate = 0.0;
  bool effectively_zero = false;  // every layer rounded to 0 added features
  std::vector<std::size_t> added;
  std::vector<CandidateResult> candidates;

  nlohmann::json to_json() const;
};

/// round_half_up(rate * cap) per layer.
std::vector<std::size_t> added_for_rate(std::span<const std::size_t> caps, double rate);

/// Fixed-schedule decision for `task`; task 1 sets the initial widths.
GrowthDecision scheduled_rate(const GrowthPolicy& policy, TaskId task, std::span<const std::size_t> caps);

/// Index of the lowest rate whose accuracy is within `margin` of the best.
/// Rates are assumed ascending; infeasible entries are skipped.
std::size_t choose_lowest_within_margin(std::span<const CandidateResult> results, double margin);

/// Clones `net` per candidate, grows it, trains on `train`, and scores on `val`.
/// The live network is left untouched; the caller commits the decision.
GrowthDecision select_rate(const GrowthPolicy& policy, const MaskedNetwork& net, TaskId task, std::size_t classes,
                           const Split& train, const Split& val, const TrainerConfig& cfg);

}  // namespace tfm
