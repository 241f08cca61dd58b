#pragma once

// Task-aware network: ordered masked layers, per-task heads, and the
// ownership ledger that decides which features each task sees and trains.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "tfm/mask_store.hpp"
#include "tfm/masked_layers.hpp"
#include "tfm/tensor.hpp"

namespace tfm {

enum class LayerKind : std::uint8_t { kDense = 0, kConv = 1, kPool = 2, kFlatten = 3 };

struct LayerDesc {
  LayerKind kind = LayerKind::kDense;
  std::size_t width = 0;  // initial width / channels (dense, conv)
  std::size_t cap = 0;    // max width; 0 means "same as width"
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  bool dropout = false;

  bool growable() const { return kind == LayerKind::kDense || kind == LayerKind::kConv; }
  std::size_t max_width() const { return cap == 0 ? width : cap; }
  bool operator==(const LayerDesc&) const = default;
};

struct ArchSpec {
  Shape input;  // per-sample shape: {features} or {channels, h, w}
  std::vector<LayerDesc> layers;

  /// Throws ConfigError on an inconsistent description.
  void validate() const;
  std::size_t growable_count() const;
  std::vector<std::size_t> initial_widths() const;
  std::vector<std::size_t> caps() const;
  bool operator==(const ArchSpec&) const = default;
};

/// Geometry of one growable layer at full capacity.
struct LayerGeometry {
  LayerKind kind = LayerKind::kDense;
  std::size_t in = 0;   // input features (dense, after flatten) or channels (conv)
  std::size_t out = 0;  // cap width
  std::size_t kernel = 1;
};

/// Growable layers in order, with every layer at its cap. Validates the spec.
std::vector<LayerGeometry> layer_geometry(const ArchSpec& arch);

/// Dense layers with the given widths (cap = width), dropout on every hidden layer.
ArchSpec make_mlp(std::size_t input, std::span<const std::size_t> widths);

enum class MaskMode : std::uint8_t {
  kTernary = 0,  // m/n masks with growth
  kBinary = 1,   // disjoint up-front partition
  kNone = 2,     // plain network (baselines)
};

struct NetworkOptions {
  MaskMode mode = MaskMode::kTernary;
  bool fn_enabled = true;  // honoured in ternary mode only
  double dropout_p = 0.5;
  bool operator==(const NetworkOptions&) const = default;
};

using StageLayer = std::variant<MaskedDense, MaskedConv, MaxPool, std::monostate>;

struct Stage {
  LayerKind kind = LayerKind::kDense;
  StageLayer layer;
  int ledger_layer = -1;    // index in the ledger for dense/conv
  int source = -1;          // ledger layer feeding this stage; -1 = network input
  std::size_t spatial = 1;  // input positions per source feature (dense after flatten)
};

struct Batch {
  Tensor inputs;                 // [batch, sample shape...]
  std::vector<std::uint32_t> labels;
  std::vector<TaskId> tasks;     // per-sample head; empty = the trained task
};

struct NetworkGrads {
  double loss = 0.0;
  std::vector<std::optional<ParamGrads>> stages;
  std::map<TaskId, HeadBackward> heads;
};

/// Masks routed to one growable stage for one task.
struct StageMasks {
  Mask n_in, n_out, m_in, m_out;
};

struct TrunkCache;

class MaskedNetwork {
 public:
  MaskedNetwork(ArchSpec arch, NetworkOptions options, RngSeed seed);

  const ArchSpec& arch() const noexcept { return arch_; }
  const NetworkOptions& options() const noexcept { return options_; }
  const OwnershipLedger& ledger() const noexcept { return ledger_; }
  const MaskStore& mask_store() const noexcept { return masks_; }
  TaskId completed_tasks() const noexcept { return completed_; }
  std::optional<TaskId> active_task() const;

  /// Registers `task` (must be the next one) and widens each growable layer by
  /// added[l] features owned by it. Old-old weight blocks are left untouched.
  void grow(TaskId task, std::span<const std::size_t> added);
  /// Binary mode: widens every layer to its cap and splits features evenly
  /// (remainder to earlier tasks) among `num_tasks`.
  void partition(TaskId num_tasks);

  /// Creates the head and (ternary + FN) the gamma=1/beta=0 parameters for `task`.
  void begin_task(TaskId task, std::size_t classes);
  /// Materializes the task's packed masks and closes it for training.
  void end_task(TaskId task);
  void set_trunk_frozen(bool frozen) noexcept { trunk_frozen_ = frozen; }
  bool trunk_frozen() const noexcept { return trunk_frozen_; }

  Tensor predict(const Tensor& inputs, TaskId task) const;
  /// Trunk output for `task` (the head's input), evaluation mode.
  Tensor features(const Tensor& inputs, TaskId task) const;

  NetworkGrads gradients(const Batch& batch, TaskId task, Rng& rng) const;
  void apply(const NetworkGrads& grads, float lr);
  double train_step(const Batch& batch, TaskId task, float lr, Rng& rng);

  StageMasks stage_masks(std::size_t stage, TaskId task) const;
  std::size_t trunk_width(TaskId task) const;
  /// Trunk weights + biases at current widths (heads and FN excluded).
  std::size_t parameter_count() const;

  std::vector<Stage>& stages() noexcept { return stages_; }
  const std::vector<Stage>& stages() const noexcept { return stages_; }
  MaskedDense& dense_layer(std::size_t ledger_layer);
  MaskedConv& conv_layer(std::size_t ledger_layer);
  const std::map<TaskId, TaskHead>& heads() const noexcept { return heads_; }
  std::map<TaskId, TaskHead>& heads() noexcept { return heads_; }

  std::vector<std::uint8_t> snapshot() const;
  static MaskedNetwork restore(std::span<const std::uint8_t> bytes);

 private:
  MaskedNetwork() = default;
  void build_stages();
  std::size_t stage_in_width(const Stage& s, TaskId task) const;
  std::size_t stage_in_width_now(const Stage& s, std::span<const std::size_t> widths) const;
  void resize_stage(Stage& s, std::size_t out, std::size_t in);
  Mask visible(int ledger_layer, TaskId task, std::size_t input_features) const;
  Mask owned(int ledger_layer, TaskId task, std::size_t input_features) const;
  Tensor prepare_input(const Tensor& inputs) const;
  void check_predictable(TaskId task) const;
  Tensor run_trunk(const Tensor& x, TaskId task, const ForwardMode& mode, TrunkCache* cache) const;

  ArchSpec arch_;
  NetworkOptions options_;
  std::vector<Stage> stages_;
  OwnershipLedger ledger_;
  MaskStore masks_;
  std::map<TaskId, TaskHead> heads_;
  Rng rng_{RngSeed{}};
  TaskId completed_ = 0;
  TaskId active_ = 0;
  bool trunk_frozen_ = false;
  std::size_t input_features_ = 0;
  std::size_t head_spatial_ = 1;
};

/// Weights added between a q-wide and a p-wide layer when they grow by
/// (n_in, n_out): n_out * (q + n_in) + p * n_in.
std::size_t added_connections(std::size_t q, std::size_t p, std::size_t n_in, std::size_t n_out);

}  // namespace tfm
