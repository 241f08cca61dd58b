#pragma once

// Closed-form memory overhead of continual-learning method families.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tfm/network.hpp"

namespace tfm {

struct ParamCount {
  std::size_t weights = 0;   // weights + biases, heads excluded
  std::size_t features = 0;  // sum of layer widths / channels
};

/// Counts at full capacity.
ParamCount count_params(const ArchSpec& arch);

struct OverheadModel {
  std::string method;
  std::uint32_t bits_per_feature = 0;
  std::uint32_t floats_per_feature = 0;
  std::uint32_t bits_per_weight = 0;
  std::uint32_t floats_per_weight = 0;
  bool network_copy = false;
  bool once = false;  // paid at the first task only

  /// Bytes for one charge: packed bits rounded up to whole bytes, 4 bytes per float.
  std::uint64_t unit_bytes(const ParamCount& counts) const;
  std::uint64_t bytes(const ParamCount& counts, std::size_t tasks) const;
};

namespace overhead_models {
OverheadModel tfm();         // 2 bits per feature per task
OverheadModel tfm_fn();      // + gamma and beta per feature per task
OverheadModel attention();   // one float per feature per task (HAT-like)
OverheadModel weight_mask(); // one bit per weight per task (PackNet-like)
OverheadModel importance();  // one float per weight, once (EWC-like)
OverheadModel network_copy();// full float copy of the network per task (PNN-like)
std::vector<OverheadModel> all();
OverheadModel by_name(const std::string& name);
}  // namespace overhead_models

/// bytes(T) for T = 0..tasks.
std::vector<std::uint64_t> overhead_curve(const OverheadModel& model, const ArchSpec& arch, std::size_t tasks);

/// CSV with one row per task count and one column per model.
std::string overhead_csv(std::span<const OverheadModel> models, const ArchSpec& arch, std::size_t tasks);

}  // namespace tfm
