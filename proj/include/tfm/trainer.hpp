#pragma once

// Plain mini-batch SGD with plateau-based learning-rate decay and
// best-epoch restore.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tfm/network.hpp"
#include "tfm/tensor.hpp"

namespace tfm {

struct TrainerConfig {
  std::size_t batch_size = 64;
  double lr_init = 0.05;
  double lr_decay_factor = 3.0;
  std::size_t patience_epochs = 5;
  double lr_floor = 1e-4;
  std::size_t max_epochs = 200;
  double dropout_p = 0.5;
  RngSeed seed{};
  bool hflip = false;  // random horizontal flips of [c,h,w] samples, training only

  /// Throws ConfigError on out-of-range values.
  void validate() const;
  bool operator==(const TrainerConfig&) const = default;
};

/// Samples for one fit or evaluation. `tasks` gives each sample's head;
/// empty means every sample belongs to the task being trained or evaluated.
struct Split {
  Tensor inputs;  // [n, sample shape...]
  std::vector<std::uint32_t> labels;
  std::vector<TaskId> tasks;

  std::size_t size() const { return labels.size(); }
};

Split subset(const Split& split, std::span<const std::size_t> indices);
/// Concatenates splits with the same sample shape.
Split concat(std::span<const Split> parts);

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t count = 0;
};

/// Mean cross-entropy and top-1 accuracy in evaluation mode.
EvalResult evaluate(const MaskedNetwork& net, const Split& split, TaskId task);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double lr = 0.0;
};

struct TrainRecord {
  TaskId task = 0;
  std::vector<EpochRecord> epochs;
  std::string stop_reason;  // "epoch-cap" or "lr-floor"
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;

  std::vector<double> lr_trace() const;
  nlohmann::json to_json() const;
};

/// Learning-rate state machine driven by per-epoch validation losses.
class PlateauSchedule {
 public:
  explicit PlateauSchedule(const TrainerConfig& cfg);

  struct Step {
    bool improved = false;
    bool decayed = false;
    bool stop = false;
  };

  Step observe(double val_loss);
  double lr() const noexcept { return lr_; }
  double best() const noexcept { return best_; }
  std::size_t decays() const noexcept { return decays_; }

 private:
  double lr_;
  double factor_;
  double floor_;
  std::size_t patience_;
  double best_;
  std::size_t wait_ = 0;
  std::size_t decays_ = 0;
};

/// Minimum decrease in validation loss that counts as an improvement.
inline constexpr double kImprovementTolerance = 1e-5;

struct FitHooks {
  /// Replaces the measured validation loss (epoch is 1-based).
  std::function<double(std::size_t epoch, double measured)> val_loss;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Trains the active task until the schedule stops, then restores the
/// parameters of the best validation-loss epoch.
TrainRecord fit_task(MaskedNetwork& net, TaskId task, const Split& train, const Split& val,
                     const TrainerConfig& cfg, const FitHooks& hooks = {});

}  // namespace tfm
