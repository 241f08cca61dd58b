#pragma once

// Per-feature task ownership and the ternary masks derived from it.
//
// A feature is owned by exactly one task: the task during which it was
// appended and trainable. From ownership we derive, per layer and task,
//   m (owned by this task)          -> trainable
//   n (owned by this or any earlier) -> visible in the forward pass
// and combine the pair into a 2-bit state for storage.

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <utility>
#include <vector>

namespace tfm {

class ByteWriter;
class ByteReader;

using TaskId = std::uint32_t;

/// Ownership value for a feature that no task owns yet.
inline constexpr TaskId kUnowned = 0;

/// One 0/1 entry per feature.
using Mask = std::vector<std::uint8_t>;

Mask ones(std::size_t n);
Mask zeros(std::size_t n);
/// Zero-pads on the right to `width`. Throws if the mask is already longer.
Mask pad(const Mask& mask, std::size_t width);
/// Repeats every entry `factor` times (channel mask -> flattened feature mask).
Mask expand(const Mask& mask, std::size_t factor);
std::size_t count_set(const Mask& mask);

enum class MaskState : std::uint8_t { kMasked = 0, kForwardOnly = 1, kNormal = 2 };

class OwnershipLedger {
 public:
  OwnershipLedger() = default;
  explicit OwnershipLedger(std::size_t num_layers);

  /// Builds a ledger from explicit ownership (kUnowned allowed) and per-task
  /// layer widths: counts[layer][t - 1] is the width when task t trained.
  static OwnershipLedger from_owners(std::vector<std::vector<TaskId>> owners,
                                     std::vector<std::vector<std::size_t>> counts);

  /// Registers the next task, appending `added[l]` features owned by it to layer l.
  TaskId register_task(std::span<const std::size_t> added);

  std::size_t num_layers() const noexcept { return owners_.size(); }
  TaskId num_tasks() const noexcept { return num_tasks_; }
  std::size_t width(std::size_t layer) const;
  std::size_t width_at(std::size_t layer, TaskId task) const;
  TaskId owner(std::size_t layer, std::size_t feature) const;
  std::span<const TaskId> owners(std::size_t layer) const;
  std::span<const std::size_t> counts(std::size_t layer) const;

  bool operator==(const OwnershipLedger&) const = default;

 private:
  void check_layer(std::size_t layer) const;
  void check_task(TaskId task) const;

  std::vector<std::vector<TaskId>> owners_;
  std::vector<std::vector<std::size_t>> counts_;
  TaskId num_tasks_ = 0;
};

/// m[j] = 1 iff feature j is owned by `task`; length = width at `task`.
Mask derive_m(const OwnershipLedger& ledger, std::size_t layer, TaskId task);
/// n[j] = 1 iff feature j is owned by some task s <= `task`; length = width at `task`.
Mask derive_n(const OwnershipLedger& ledger, std::size_t layer, TaskId task);

/// Throws InvalidMaskError if any two masks select a common feature.
void check_disjoint(std::span<const Mask> masks);

std::vector<std::uint8_t> pack(std::span<const MaskState> states);
std::vector<MaskState> unpack(std::span<const std::uint8_t> bytes, std::size_t count);
inline std::size_t packed_size(std::size_t count) { return (2 * count + 7) / 8; }

/// Packed ternary mask of one layer for one task.
class LayerTaskMask {
 public:
  LayerTaskMask() = default;
  LayerTaskMask(std::uint32_t layer_id, TaskId task_id, std::span<const MaskState> states);

  std::uint32_t layer_id() const noexcept { return layer_id_; }
  TaskId task_id() const noexcept { return task_id_; }
  std::size_t feature_count() const noexcept { return count_; }
  std::span<const std::uint8_t> bytes() const noexcept { return bytes_; }

  MaskState state(std::size_t feature) const;
  std::vector<MaskState> states() const { return unpack(bytes_, count_); }
  Mask m() const;
  Mask n() const;

  /// Record layout: u32 layer_id, u32 task_id, u32 feature count (LE), then packed bytes.
  void write(ByteWriter& out) const;
  static LayerTaskMask read(ByteReader& in);

  bool operator==(const LayerTaskMask&) const = default;

 private:
  std::uint32_t layer_id_ = 0;
  TaskId task_id_ = 0;
  std::size_t count_ = 0;
  std::vector<std::uint8_t> bytes_;
};

/// Combines (m, n) into ternary states. Throws InvalidMaskError where m=1, n=0.
std::vector<MaskState> to_ternary(const Mask& m, const Mask& n);
LayerTaskMask to_ternary(std::uint32_t layer_id, TaskId task_id, const Mask& m, const Mask& n);

/// Masks materialized at task completion, keyed by (layer, task).
class MaskStore {
 public:
  /// Packs the masks of every layer for `task` from the ledger.
  void materialize(const OwnershipLedger& ledger, TaskId task);
  void insert(LayerTaskMask mask);

  const LayerTaskMask& get(std::size_t layer, TaskId task) const;
  bool contains(std::size_t layer, TaskId task) const;
  std::size_t size() const noexcept { return masks_.size(); }
  /// Sum of packed payload bytes (headers excluded).
  std::size_t payload_bytes() const;

  void write(ByteWriter& out) const;
  static MaskStore read(ByteReader& in);

  auto begin() const { return masks_.begin(); }
  auto end() const { return masks_.end(); }

  bool operator==(const MaskStore&) const = default;

 private:
  std::map<std::pair<std::size_t, TaskId>, LayerTaskMask> masks_;
};

}  // namespace tfm
