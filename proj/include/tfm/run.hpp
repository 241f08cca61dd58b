#pragma once

// Run directories: resolved config, accuracy matrix, forgetting, growth
// decisions, overhead table, train records, and per-checkpoint snapshots.

#include <filesystem>
#include <string>

#include "tfm/config.hpp"
#include "tfm/harness.hpp"

namespace tfm {

/// Shortest round-trip decimal; integral values keep a trailing ".0".
std::string format_real(double v);

std::string matrix_csv(const AccuracyMatrix& m);
std::string forgetting_csv(const Forgetting& f);

struct RunSummary {
  AccuracyMatrix matrix;
  Forgetting forgetting;
  double avg_accuracy = 0.0;
  double avg_accuracy_after_first = 0.0;
  std::filesystem::path out;
};

/// Runs the scenario and writes the run directory at `cfg.out`.
/// status.json reads "running" until the run completes or fails.
RunSummary execute_run(const RunConfig& cfg);

std::filesystem::path snapshot_path(const std::filesystem::path& run_dir, TaskId checkpoint);

/// Restores a snapshot and scores `task` on the chosen split of the config's sequence.
double evaluate_snapshot(const RunConfig& cfg, const std::filesystem::path& snapshot, TaskId task, SplitPart part);

void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace tfm
