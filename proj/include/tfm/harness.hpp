#pragma once

// Continual-learning scenarios: task sequences, method dispatch, and the
// accuracy/forgetting bookkeeping.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tfm/dataset.hpp"
#include "tfm/growth_policy.hpp"
#include "tfm/network.hpp"
#include "tfm/trainer.hpp"

namespace tfm {

enum class SplitMode : std::uint8_t { kRandom, kGrouped, kSizedFirst };

struct SequenceOptions {
  SplitMode mode = SplitMode::kRandom;
  std::size_t num_tasks = 5;
  RngSeed seed{};
  std::filesystem::path groups_file;  // GROUPED: JSON array of class-id arrays
  double first_fraction = 0.55;       // SIZED_FIRST
  double test_fraction = 0.2;         // held out per class when the data has no test split
  double val_fraction = 0.1;          // of each class's train samples
};

struct TaskSplit {
  std::vector<std::uint32_t> classes;  // dataset class ids; position = task-local label
  std::vector<std::size_t> train, val, test;
};

struct TaskSequence {
  std::vector<TaskSplit> tasks;
  SplitMode mode = SplitMode::kRandom;

  std::size_t size() const { return tasks.size(); }
};

TaskSequence build_sequence(const DatasetBundle& data, const SequenceOptions& options);

enum class SplitPart : std::uint8_t { kTrain, kVal, kTest };

/// Samples of one task with task-local labels, tagged with `task`.
Split make_split(const DatasetBundle& data, const TaskSequence& seq, TaskId task, SplitPart part);

/// A[k][s]: accuracy on task s after training task k (1-based, s <= k).
class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(std::size_t tasks = 0);

  std::size_t tasks() const noexcept { return n_; }
  void set(std::size_t k, std::size_t s, double acc);
  double at(std::size_t k, std::size_t s) const;
  bool has(std::size_t k, std::size_t s) const;
  /// Index of the last complete row (0 when none).
  std::size_t checkpoints() const;
  bool complete() const;
  bool operator==(const AccuracyMatrix&) const = default;

 private:
  std::size_t n_;
  std::vector<std::optional<double>> cells_;
};

struct Forgetting {
  std::vector<double> per_task;  // A[s][s] - A[K][s]
  double mean = 0.0;             // over s < K
};

Forgetting forgetting(const AccuracyMatrix& m);
double avg_accuracy(const AccuracyMatrix& m);
/// Mean over tasks 2..K of the final row.
double avg_accuracy_after_first(const AccuracyMatrix& m);

enum class MethodKind : std::uint8_t { kTfm, kTfmNoFn, kBinaryMask, kFinetune, kFreeze, kJoint };

std::string to_string(MethodKind m);
MethodKind parse_method(const std::string& s);

struct ScenarioConfig {
  MethodKind method = MethodKind::kTfm;
  ArchSpec arch;
  GrowthPolicy policy;
  TrainerConfig trainer;
  RngSeed seed{};
};

struct ScenarioObserver {
  /// Called after task k is trained and evaluated.
  std::function<void(TaskId k, const MaskedNetwork& net)> on_checkpoint;
};

struct ScenarioResult {
  AccuracyMatrix matrix;
  std::vector<GrowthDecision> growth;
  std::vector<TrainRecord> records;
};

ScenarioResult run_scenario(const ScenarioConfig& cfg, const DatasetBundle& data, const TaskSequence& seq,
                            const ScenarioObserver& observer = {});

/// Network the scenario would build for `cfg` before any task.
MaskedNetwork make_network(const ScenarioConfig& cfg);

}  // namespace tfm
