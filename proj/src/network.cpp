#include "tfm/network.hpp"

#include <algorithm>
#include <bit>
#include <sstream>

#include <fmt/format.h>

#include "tfm/binary_io.hpp"
#include "tfm/errors.hpp"
#include "tfm/loss.hpp"

namespace tfm {

struct TrunkCache {
  std::vector<LayerCache> layers;
  std::vector<PoolCache> pools;
  std::vector<Shape> inputs;
  std::vector<Shape> outputs;
};

namespace {

constexpr char kMagic[8] = {'T', 'F', 'M', 'M', 'O', 'D', 'E', 'L'};
constexpr std::uint32_t kVersion = 1;
constexpr char kEndMarker[4] = {'E', 'N', 'D', '.'};

struct StageGeom {
  int ledger_layer = -1;
  int source = -1;
  std::size_t spatial = 1;
};

struct Trace {
  std::vector<StageGeom> stages;
  std::size_t head_spatial = 1;
};

// Walks the layer list, checking geometry, and records how masks route.
Trace trace(const ArchSpec& arch) {
  if (arch.input.empty() || shape_size(arch.input) == 0) throw ConfigError("arch: input shape is empty");
  if (arch.input.size() != 1 && arch.input.size() != 3) {
    throw ConfigError("arch: input must be {features} or {channels, h, w}");
  }
  Trace out;
  std::size_t rank = arch.input.size();
  std::size_t h = rank == 3 ? arch.input[1] : 0, w = rank == 3 ? arch.input[2] : 0;
  int last = -1;
  int next_ledger = 0;
  std::size_t pending_spatial = 1;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerDesc& d = arch.layers[i];
    StageGeom g;
    switch (d.kind) {
      case LayerKind::kDense:
        if (rank != 1) throw ConfigError(fmt::format("arch: dense layer {} needs a flattened input", i));
        break;
      case LayerKind::kConv:
      case LayerKind::kPool:
        if (rank != 3) throw ConfigError(fmt::format("arch: layer {} needs a [c,h,w] input", i));
        if (d.kernel == 0 || d.stride == 0) throw ConfigError(fmt::format("arch: layer {} kernel/stride must be >= 1", i));
        try {
          const std::size_t pad = d.kind == LayerKind::kConv ? d.pad : 0;
          h = conv_output_size(h, d.kernel, d.stride, pad);
          w = conv_output_size(w, d.kernel, d.stride, pad);
        } catch (const DimensionError& e) {
          throw ConfigError(fmt::format("arch: layer {}: {}", i, e.what()));
        }
        break;
      case LayerKind::kFlatten:
        if (rank == 3) pending_spatial = last == -1 ? 1 : h * w;
        rank = 1;
        break;
    }
    if (d.growable()) {
      if (d.max_width() < d.width) throw ConfigError(fmt::format("arch: layer {} cap below initial width", i));
      if (d.max_width() == 0) throw ConfigError(fmt::format("arch: layer {} has zero capacity", i));
      g.ledger_layer = next_ledger++;
      g.source = last;
      g.spatial = d.kind == LayerKind::kDense ? pending_spatial : 1;
      last = g.ledger_layer;
      pending_spatial = 1;
    }
    out.stages.push_back(g);
  }
  if (last == -1) throw ConfigError("arch: no dense or conv layer");
  if (rank != 1) throw ConfigError("arch: the trunk must end in a dense or flatten layer");
  out.head_spatial = pending_spatial;
  return out;
}

void write_arch(ByteWriter& out, const ArchSpec& arch) {
  out.u32(static_cast<std::uint32_t>(arch.input.size()));
  for (auto d : arch.input) out.u32(static_cast<std::uint32_t>(d));
  out.u32(static_cast<std::uint32_t>(arch.layers.size()));
  for (const auto& l : arch.layers) {
    out.u8(static_cast<std::uint8_t>(l.kind));
    out.u32(static_cast<std::uint32_t>(l.width));
    out.u32(static_cast<std::uint32_t>(l.cap));
    out.u32(static_cast<std::uint32_t>(l.kernel));
    out.u32(static_cast<std::uint32_t>(l.stride));
    out.u32(static_cast<std::uint32_t>(l.pad));
    out.u8(l.dropout ? 1 : 0);
  }
}

ArchSpec read_arch(ByteReader& in) {
  ArchSpec arch;
  const std::uint32_t rank = in.u32();
  if (rank > 3) in.fail("bad input rank");
  for (std::uint32_t i = 0; i < rank; ++i) arch.input.push_back(in.u32());
  const std::uint32_t n = in.u32();
  if (n > 4096) in.fail("implausible layer count");
  for (std::uint32_t i = 0; i < n; ++i) {
    LayerDesc l;
    const std::uint8_t kind = in.u8();
    if (kind > 3) in.fail("unknown layer kind");
    l.kind = static_cast<LayerKind>(kind);
    l.width = in.u32();
    l.cap = in.u32();
    l.kernel = in.u32();
    l.stride = in.u32();
    l.pad = in.u32();
    l.dropout = in.u8() != 0;
    arch.layers.push_back(l);
  }
  return arch;
}

void write_fn(ByteWriter& out, const std::map<TaskId, FnParams>& fn) {
  out.u32(static_cast<std::uint32_t>(fn.size()));
  for (const auto& [task, p] : fn) {
    out.u32(task);
    out.tensor(p.gamma);
    out.tensor(p.beta);
  }
}

std::map<TaskId, FnParams> read_fn(ByteReader& in) {
  std::map<TaskId, FnParams> fn;
  const std::uint32_t n = in.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    const TaskId task = in.u32();
    FnParams p;
    p.gamma = in.tensor();
    p.beta = in.tensor();
    if (p.gamma.rank() != 1 || p.gamma.shape() != p.beta.shape()) in.fail("malformed FN parameters");
    fn.emplace(task, std::move(p));
  }
  return fn;
}

Tensor gather_rows(const Tensor& m, std::span<const std::size_t> rows) {
  const std::size_t cols = m.dim(1);
  Tensor out({rows.size(), cols});
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy_n(m.data().begin() + static_cast<std::ptrdiff_t>(rows[r] * cols), cols,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * cols));
  return out;
}

}  // namespace

void ArchSpec::validate() const { (void)trace(*this); }

std::vector<LayerGeometry> layer_geometry(const ArchSpec& arch) {
  const Trace t = trace(arch);
  const auto caps = arch.caps();
  std::vector<LayerGeometry> out;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerDesc& d = arch.layers[i];
    if (!d.growable()) continue;
    const StageGeom& g = t.stages[i];
    LayerGeometry geo;
    geo.kind = d.kind;
    geo.out = d.max_width();
    geo.kernel = d.kind == LayerKind::kConv ? d.kernel : 1;
    if (g.source < 0) {
      geo.in = d.kind == LayerKind::kConv ? arch.input[0] : shape_size(arch.input);
    } else {
      geo.in = caps[static_cast<std::size_t>(g.source)] * g.spatial;
    }
    out.push_back(geo);
  }
  return out;
}

std::size_t ArchSpec::growable_count() const {
  return static_cast<std::size_t>(std::count_if(layers.begin(), layers.end(), [](const LayerDesc& d) { return d.growable(); }));
}

std::vector<std::size_t> ArchSpec::initial_widths() const {
  std::vector<std::size_t> out;
  for (const auto& d : layers)
    if (d.growable()) out.push_back(d.width);
  return out;
}

std::vector<std::size_t> ArchSpec::caps() const {
  std::vector<std::size_t> out;
  for (const auto& d : layers)
    if (d.growable()) out.push_back(d.max_width());
  return out;
}

ArchSpec make_mlp(std::size_t input, std::span<const std::size_t> widths) {
  ArchSpec arch;
  arch.input = {input};
  for (auto w : widths) arch.layers.push_back(LayerDesc{LayerKind::kDense, w, w, 0, 1, 0, true});
  return arch;
}

std::size_t added_connections(std::size_t q, std::size_t p, std::size_t n_in, std::size_t n_out) {
  return n_out * (q + n_in) + p * n_in;
}

MaskedNetwork::MaskedNetwork(ArchSpec arch, NetworkOptions options, RngSeed seed)
    : arch_(std::move(arch)), options_(options), rng_(seed) {
  build_stages();
}

void MaskedNetwork::build_stages() {
  const Trace t = trace(arch_);
  input_features_ = shape_size(arch_.input);
  head_spatial_ = t.head_spatial;
  ledger_ = OwnershipLedger(arch_.growable_count());
  stages_.clear();
  const bool fn = options_.mode == MaskMode::kTernary && options_.fn_enabled;
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
    const LayerDesc& d = arch_.layers[i];
    Stage s;
    s.kind = d.kind;
    s.ledger_layer = t.stages[i].ledger_layer;
    s.source = t.stages[i].source;
    s.spatial = t.stages[i].spatial;
    const std::size_t in0 = s.source == -1 ? stage_in_width_now(s, {}) : 0;
    switch (d.kind) {
      case LayerKind::kDense: {
        MaskedDense layer;
        layer.layer_id = static_cast<std::uint32_t>(s.ledger_layer);
        layer.weight = Tensor({0, in0});
        layer.bias = Tensor({0});
        layer.fn_enabled = fn;
        layer.dropout = d.dropout;
        s.layer = std::move(layer);
        break;
      }
      case LayerKind::kConv: {
        MaskedConv layer;
        layer.layer_id = static_cast<std::uint32_t>(s.ledger_layer);
        layer.kernels = Tensor({0, in0, d.kernel, d.kernel});
        layer.bias = Tensor({0});
        layer.fn_enabled = fn;
        layer.dropout = d.dropout;
        layer.stride = d.stride;
        layer.pad = d.pad;
        s.layer = std::move(layer);
        break;
      }
      case LayerKind::kPool:
        s.layer = MaxPool{d.kernel, d.stride};
        break;
      case LayerKind::kFlatten:
        s.layer = std::monostate{};
        break;
    }
    stages_.push_back(std::move(s));
  }
}

std::optional<TaskId> MaskedNetwork::active_task() const {
  if (active_ == 0) return std::nullopt;
  return active_;
}

std::size_t MaskedNetwork::stage_in_width(const Stage& s, TaskId task) const {
  if (s.source == -1) return s.kind == LayerKind::kConv ? arch_.input[0] : input_features_;
  return ledger_.width_at(static_cast<std::size_t>(s.source), task) * s.spatial;
}

std::size_t MaskedNetwork::stage_in_width_now(const Stage& s, std::span<const std::size_t> widths) const {
  if (s.source == -1) return s.kind == LayerKind::kConv ? arch_.input[0] : input_features_;
  return widths[static_cast<std::size_t>(s.source)] * s.spatial;
}

void MaskedNetwork::resize_stage(Stage& s, std::size_t out, std::size_t in) {
  if (auto* dense = std::get_if<MaskedDense>(&s.layer)) {
    const std::size_t p = dense->width(), q = dense->in_width();
    if (p == out && q == in) return;
    const std::size_t fan_in = std::max<std::size_t>(in, 1);
    Tensor w = init_uniform({out, in}, fan_in, rng_);
    Tensor b = init_uniform({out}, fan_in, rng_);
    for (std::size_t i = 0; i < p; ++i) {
      for (std::size_t j = 0; j < q; ++j) w(i, j) = dense->weight(i, j);
      b[i] = dense->bias[i];
    }
    dense->weight = std::move(w);
    dense->bias = std::move(b);
  } else if (auto* conv = std::get_if<MaskedConv>(&s.layer)) {
    const std::size_t p = conv->width(), q = conv->in_width(), k = conv->kernel_size();
    if (p == out && q == in) return;
    const std::size_t fan_in = std::max<std::size_t>(in * k * k, 1);
    Tensor kern = init_uniform({out, in, k, k}, fan_in, rng_);
    Tensor b = init_uniform({out}, fan_in, rng_);
    for (std::size_t o = 0; o < p; ++o) {
      for (std::size_t c = 0; c < q; ++c)
        for (std::size_t y = 0; y < k; ++y)
          for (std::size_t x = 0; x < k; ++x) kern(o, c, y, x) = conv->kernels(o, c, y, x);
      b[o] = conv->bias[o];
    }
    conv->kernels = std::move(kern);
    conv->bias = std::move(b);
  }
}

void MaskedNetwork::grow(TaskId task, std::span<const std::size_t> added) {
  if (options_.mode == MaskMode::kBinary) throw ContractError("binary-mask networks are partitioned, not grown");
  if (active_ != 0 || task != ledger_.num_tasks() + 1 || completed_ != ledger_.num_tasks()) {
    throw ContractError(fmt::format("grow({}) must be called once, between tasks, before training it", task));
  }
  if (added.size() != ledger_.num_layers()) {
    throw DimensionError(fmt::format("grow: {} entries for {} growable layers", added.size(), ledger_.num_layers()));
  }
  const auto caps = arch_.caps();
  std::vector<std::size_t> widths(ledger_.num_layers());
  for (std::size_t l = 0; l < widths.size(); ++l) {
    widths[l] = ledger_.width(l) + added[l];
    if (widths[l] > caps[l]) {
      throw CapacityError(fmt::format("layer {}: growing {} -> {} exceeds cap {}", l, ledger_.width(l), widths[l], caps[l]));
    }
  }
  for (auto& s : stages_) {
    if (s.ledger_layer < 0) continue;
    resize_stage(s, widths[static_cast<std::size_t>(s.ledger_layer)], stage_in_width_now(s, widths));
  }
  ledger_.register_task(added);
}

void MaskedNetwork::partition(TaskId num_tasks) {
  if (options_.mode != MaskMode::kBinary) throw ContractError("partition() is for binary-mask networks");
  if (ledger_.num_tasks() != 0) throw ContractError("partition() must be called on a fresh network");
  if (num_tasks == 0) throw ConfigError("partition needs at least one task");
  const auto caps = arch_.caps();
  std::vector<std::vector<TaskId>> owners(caps.size());
  std::vector<std::vector<std::size_t>> counts(caps.size());
  for (std::size_t l = 0; l < caps.size(); ++l) {
    if (caps[l] < num_tasks) {
      throw CapacityError(fmt::format("layer {}: {} features cannot be split among {} tasks", l, caps[l], num_tasks));
    }
    const std::size_t share = caps[l] / num_tasks, rem = caps[l] % num_tasks;
    for (TaskId t = 1; t <= num_tasks; ++t) owners[l].insert(owners[l].end(), share + (t <= rem ? 1 : 0), t);
    counts[l].assign(num_tasks, caps[l]);
    std::vector<Mask> per_task;
    for (TaskId t = 1; t <= num_tasks; ++t) {
      Mask m(caps[l]);
      for (std::size_t j = 0; j < caps[l]; ++j) m[j] = owners[l][j] == t ? 1 : 0;
      per_task.push_back(std::move(m));
    }
    check_disjoint(per_task);
  }
  for (auto& s : stages_) {
    if (s.ledger_layer < 0) continue;
    resize_stage(s, caps[static_cast<std::size_t>(s.ledger_layer)], stage_in_width_now(s, caps));
  }
  ledger_ = OwnershipLedger::from_owners(std::move(owners), std::move(counts));
}

void MaskedNetwork::begin_task(TaskId task, std::size_t classes) {
  if (active_ != 0 || task != completed_ + 1) {
    throw ContractError(fmt::format("begin_task({}): tasks run strictly in order; {} completed", task, completed_));
  }
  if (task > ledger_.num_tasks()) throw ContractError(fmt::format("task {} has not been registered (grow first)", task));
  if (classes == 0) throw ConfigError("a task needs at least one class");
  for (auto& s : stages_) {
    if (auto* d = std::get_if<MaskedDense>(&s.layer); d && d->fn_enabled) add_fn_params(*d, task);
    if (auto* c = std::get_if<MaskedConv>(&s.layer); c && c->fn_enabled) add_fn_params(*c, task);
  }
  const std::size_t q = trunk_width(task);
  const std::size_t fan_in = std::max<std::size_t>(q, 1);
  TaskHead head;
  head.task = task;
  head.weight = init_uniform({classes, q}, fan_in, rng_);
  head.bias = init_uniform({classes}, fan_in, rng_);
  heads_[task] = std::move(head);
  active_ = task;
}

void MaskedNetwork::end_task(TaskId task) {
  if (active_ != task || task == 0) throw ContractError(fmt::format("end_task({}) without a matching begin_task", task));
  if (options_.mode != MaskMode::kNone) masks_.materialize(ledger_, task);
  completed_ = task;
  active_ = 0;
}

std::size_t MaskedNetwork::trunk_width(TaskId task) const {
  return ledger_.width_at(ledger_.num_layers() - 1, task) * head_spatial_;
}

Mask MaskedNetwork::visible(int layer, TaskId task, std::size_t input_features) const {
  if (layer < 0) return ones(input_features);
  const auto l = static_cast<std::size_t>(layer);
  switch (options_.mode) {
    case MaskMode::kTernary: return derive_n(ledger_, l, task);
    case MaskMode::kBinary: return derive_m(ledger_, l, task);
    case MaskMode::kNone: break;
  }
  return ones(ledger_.width_at(l, task));
}

Mask MaskedNetwork::owned(int layer, TaskId task, std::size_t input_features) const {
  if (layer < 0) return options_.mode == MaskMode::kTernary ? zeros(input_features) : ones(input_features);
  const auto l = static_cast<std::size_t>(layer);
  if (options_.mode == MaskMode::kNone) return ones(ledger_.width_at(l, task));
  return derive_m(ledger_, l, task);
}

StageMasks MaskedNetwork::stage_masks(std::size_t stage, TaskId task) const {
  if (stage >= stages_.size() || stages_[stage].ledger_layer < 0) {
    throw LookupError(fmt::format("stage {} has no masks", stage));
  }
  const Stage& s = stages_[stage];
  const std::size_t in = stage_in_width(s, task);
  StageMasks m;
  m.n_out = visible(s.ledger_layer, task, 0);
  m.m_out = owned(s.ledger_layer, task, 0);
  if (s.source < 0) {
    m.n_in = visible(-1, task, in);
    m.m_in = owned(-1, task, in);
  } else {
    m.n_in = expand(visible(s.source, task, 0), s.spatial);
    m.m_in = expand(owned(s.source, task, 0), s.spatial);
  }
  return m;
}

Tensor MaskedNetwork::prepare_input(const Tensor& inputs) const {
  if (inputs.rank() < 2 || inputs.dim(0) == 0) throw DimensionError("network input must be a non-empty batch");
  const std::size_t batch = inputs.dim(0);
  if (inputs.size() / batch != input_features_) {
    throw DimensionError(fmt::format("network expects {} values per sample, got {}", input_features_, inputs.size() / batch));
  }
  Shape shape{batch};
  shape.insert(shape.end(), arch_.input.begin(), arch_.input.end());
  return inputs.reshaped(std::move(shape));
}

void MaskedNetwork::check_predictable(TaskId task) const {
  const bool known = task >= 1 && (task <= completed_ || task == active_);
  if (!known || !heads_.contains(task)) throw LookupError(fmt::format("task {} has not been trained", task));
}

Tensor MaskedNetwork::run_trunk(const Tensor& x, TaskId task, const ForwardMode& mode, TrunkCache* cache) const {
  Tensor h = x;
  if (cache != nullptr) {
    cache->layers.assign(stages_.size(), LayerCache{});
    cache->pools.assign(stages_.size(), PoolCache{});
    cache->inputs.assign(stages_.size(), Shape{});
    cache->outputs.assign(stages_.size(), Shape{});
  }
  const std::size_t batch = x.dim(0);
  for (std::size_t k = 0; k < stages_.size(); ++k) {
    const Stage& s = stages_[k];
    if (cache != nullptr) cache->inputs[k] = h.shape();
    LayerCache* lc = cache != nullptr ? &cache->layers[k] : nullptr;
    switch (s.kind) {
      case LayerKind::kDense: {
        if (h.rank() != 2) h = std::move(h).reshaped({batch, h.size() / batch});
        const StageMasks m = stage_masks(k, task);
        const auto& layer = std::get<MaskedDense>(s.layer);
        h = options_.mode == MaskMode::kBinary ? forward_binary(layer, h, m.m_in, m.m_out, mode, lc)
                                               : forward_dense(layer, h, task, m.n_in, m.n_out, mode, lc);
        break;
      }
      case LayerKind::kConv: {
        const StageMasks m = stage_masks(k, task);
        const auto& layer = std::get<MaskedConv>(s.layer);
        h = options_.mode == MaskMode::kBinary ? forward_binary(layer, h, m.m_in, m.m_out, mode, lc)
                                               : forward_conv(layer, h, task, m.n_in, m.n_out, mode, lc);
        break;
      }
      case LayerKind::kPool:
        h = maxpool_forward(std::get<MaxPool>(s.layer), h, cache != nullptr ? &cache->pools[k] : nullptr);
        break;
      case LayerKind::kFlatten:
        h = std::move(h).reshaped({batch, h.size() / batch});
        break;
    }
    if (cache != nullptr) cache->outputs[k] = h.shape();
  }
  if (h.rank() != 2) h = std::move(h).reshaped({batch, h.size() / batch});
  return h;
}

Tensor MaskedNetwork::features(const Tensor& inputs, TaskId task) const {
  check_predictable(task);
  return run_trunk(prepare_input(inputs), task, ForwardMode{}, nullptr);
}

Tensor MaskedNetwork::predict(const Tensor& inputs, TaskId task) const {
  return head_forward(heads_.at(task), features(inputs, task));
}

NetworkGrads MaskedNetwork::gradients(const Batch& batch, TaskId task, Rng& rng) const {
  if (active_ == 0 || task != active_) {
    throw ContractError(fmt::format("only the newest task can be trained (asked {}, active {})", task, active_));
  }
  const Tensor x = prepare_input(batch.inputs);
  const std::size_t n = x.dim(0);
  if (batch.labels.size() != n) throw DimensionError("batch labels do not match inputs");
  if (!batch.tasks.empty() && batch.tasks.size() != n) throw DimensionError("batch tasks do not match inputs");

  std::map<TaskId, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) {
    const TaskId t = batch.tasks.empty() ? task : batch.tasks[i];
    if (t != task && options_.mode != MaskMode::kNone) {
      throw ContractError("masked networks train one task per batch");
    }
    if (t > task || !heads_.contains(t)) throw LookupError(fmt::format("no head for task {}", t));
    groups[t].push_back(i);
  }

  TrunkCache cache;
  const ForwardMode mode{true, options_.dropout_p, &rng};
  const Tensor feats = run_trunk(x, task, mode, &cache);

  NetworkGrads grads;
  grads.stages.resize(stages_.size());
  Tensor d_feats(feats.shape());
  const float inv_n = 1.0f / static_cast<float>(n);
  for (const auto& [t, rows] : groups) {
    const TaskHead& head = heads_.at(t);
    const Tensor f = gather_rows(feats, rows);
    const Tensor logits = head_forward(head, f);
    Tensor d_logits(logits.shape());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const std::uint32_t label = batch.labels[rows[r]];
      if (label >= head.classes()) throw DataError(fmt::format("label {} out of range for task {}", label, t));
      const auto row = logits.data().subspan(r * head.classes(), head.classes());
      CrossEntropy ce = cross_entropy(row, label);
      grads.loss += ce.loss;
      for (std::size_t c = 0; c < head.classes(); ++c) d_logits(r, c) = ce.grad_logits[c] * inv_n;
    }
    HeadBackward hb = head_backward(head, f, d_logits);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t j = 0; j < feats.dim(1); ++j) d_feats(rows[r], j) = hb.grad_features(r, j);
    grads.heads.emplace(t, std::move(hb));
  }
  grads.loss /= static_cast<double>(n);
  if (trunk_frozen_) return grads;

  Tensor g = std::move(d_feats);
  for (std::size_t k = stages_.size(); k-- > 0;) {
    const Stage& s = stages_[k];
    switch (s.kind) {
      case LayerKind::kDense:
      case LayerKind::kConv: {
        g = std::move(g).reshaped(cache.outputs[k]);
        const StageMasks m = stage_masks(k, task);
        BackwardResult r;
        if (const auto* d = std::get_if<MaskedDense>(&s.layer)) {
          r = options_.mode == MaskMode::kBinary
                  ? backward_binary(*d, g, m.m_out, m.m_in, cache.layers[k])
                  : backward_dense(*d, g, task, m.m_out, m.m_in, m.n_out, m.n_in, cache.layers[k]);
        } else {
          const auto& c = std::get<MaskedConv>(s.layer);
          r = options_.mode == MaskMode::kBinary
                  ? backward_binary(c, g, m.m_out, m.m_in, cache.layers[k])
                  : backward_conv(c, g, task, m.m_out, m.m_in, m.n_out, m.n_in, cache.layers[k]);
        }
        grads.stages[k] = std::move(r.grads);
        g = std::move(r.grad_x);
        break;
      }
      case LayerKind::kPool:
        g = maxpool_backward(std::get<MaxPool>(s.layer), std::move(g).reshaped(cache.outputs[k]), cache.pools[k]);
        break;
      case LayerKind::kFlatten:
        g = std::move(g).reshaped(cache.inputs[k]);
        break;
    }
  }
  return grads;
}

void MaskedNetwork::apply(const NetworkGrads& grads, float lr) {
  for (std::size_t k = 0; k < grads.stages.size() && k < stages_.size(); ++k) {
    if (!grads.stages[k]) continue;
    if (auto* d = std::get_if<MaskedDense>(&stages_[k].layer)) apply_sgd(*d, *grads.stages[k], lr);
    if (auto* c = std::get_if<MaskedConv>(&stages_[k].layer)) apply_sgd(*c, *grads.stages[k], lr);
  }
  for (const auto& [task, hb] : grads.heads) apply_sgd(heads_.at(task), hb, lr);
}

double MaskedNetwork::train_step(const Batch& batch, TaskId task, float lr, Rng& rng) {
  const NetworkGrads g = gradients(batch, task, rng);
  apply(g, lr);
  return g.loss;
}

std::size_t MaskedNetwork::parameter_count() const {
  std::size_t total = 0;
  for (const auto& s : stages_) {
    if (const auto* d = std::get_if<MaskedDense>(&s.layer)) total += d->weight.size() + d->bias.size();
    if (const auto* c = std::get_if<MaskedConv>(&s.layer)) total += c->kernels.size() + c->bias.size();
  }
  return total;
}

MaskedDense& MaskedNetwork::dense_layer(std::size_t ledger_layer) {
  for (auto& s : stages_)
    if (s.ledger_layer == static_cast<int>(ledger_layer))
      if (auto* d = std::get_if<MaskedDense>(&s.layer)) return *d;
  throw LookupError(fmt::format("no dense layer {}", ledger_layer));
}

MaskedConv& MaskedNetwork::conv_layer(std::size_t ledger_layer) {
  for (auto& s : stages_)
    if (s.ledger_layer == static_cast<int>(ledger_layer))
      if (auto* c = std::get_if<MaskedConv>(&s.layer)) return *c;
  throw LookupError(fmt::format("no conv layer {}", ledger_layer));
}

std::vector<std::uint8_t> MaskedNetwork::snapshot() const {
  ByteWriter out;
  out.raw(std::span(reinterpret_cast<const std::uint8_t*>(kMagic), sizeof kMagic));
  out.u32(kVersion);
  write_arch(out, arch_);
  out.u8(static_cast<std::uint8_t>(options_.mode));
  out.u8(options_.fn_enabled ? 1 : 0);
  out.u64(std::bit_cast<std::uint64_t>(options_.dropout_p));
  out.u8(trunk_frozen_ ? 1 : 0);
  out.u32(completed_);
  out.u32(active_);

  out.u32(ledger_.num_tasks());
  out.u32(static_cast<std::uint32_t>(ledger_.num_layers()));
  for (std::size_t l = 0; l < ledger_.num_layers(); ++l) {
    for (auto c : ledger_.counts(l)) out.u32(static_cast<std::uint32_t>(c));
    out.u32(static_cast<std::uint32_t>(ledger_.width(l)));
    for (auto o : ledger_.owners(l)) out.u32(o);
  }
  std::ostringstream rng_state;
  rng_state << rng_.engine();
  out.str(rng_state.str());

  for (const auto& s : stages_) {
    if (const auto* d = std::get_if<MaskedDense>(&s.layer)) {
      out.tensor(d->weight);
      out.tensor(d->bias);
      write_fn(out, d->fn);
    } else if (const auto* c = std::get_if<MaskedConv>(&s.layer)) {
      out.tensor(c->kernels);
      out.tensor(c->bias);
      write_fn(out, c->fn);
    }
  }
  masks_.write(out);
  out.u32(static_cast<std::uint32_t>(heads_.size()));
  for (const auto& [task, head] : heads_) {
    out.u32(task);
    out.tensor(head.weight);
    out.tensor(head.bias);
  }
  out.raw(std::span(reinterpret_cast<const std::uint8_t*>(kEndMarker), sizeof kEndMarker));
  return std::move(out).take();
}

MaskedNetwork MaskedNetwork::restore(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  const auto magic = in.raw(sizeof kMagic);
  if (!std::equal(magic.begin(), magic.end(), reinterpret_cast<const std::uint8_t*>(kMagic))) {
    throw FormatError("not a model file (bad magic)", 0);
  }
  const std::uint32_t version = in.u32();
  if (version != kVersion) in.fail(fmt::format("unsupported model version {}", version));

  MaskedNetwork net;
  std::size_t at = in.offset();
  net.arch_ = read_arch(in);
  const std::uint8_t mode = in.u8();
  if (mode > 2) in.fail("unknown mask mode");
  net.options_.mode = static_cast<MaskMode>(mode);
  net.options_.fn_enabled = in.u8() != 0;
  net.options_.dropout_p = std::bit_cast<double>(in.u64());
  try {
    net.build_stages();
  } catch (const Error& e) {
    throw FormatError(e.what(), at);
  }
  net.trunk_frozen_ = in.u8() != 0;
  net.completed_ = in.u32();
  net.active_ = in.u32();

  at = in.offset();
  const std::uint32_t tasks = in.u32();
  const std::uint32_t layers = in.u32();
  if (layers != net.arch_.growable_count()) in.fail("ledger layer count does not match architecture");
  std::vector<std::vector<TaskId>> owners(layers);
  std::vector<std::vector<std::size_t>> counts(layers);
  for (std::uint32_t l = 0; l < layers; ++l) {
    for (std::uint32_t t = 0; t < tasks; ++t) counts[l].push_back(in.u32());
    const std::uint32_t width = in.u32();
    if (width > (bytes.size() - in.offset()) / 4) in.fail("ledger width exceeds file size");
    for (std::uint32_t j = 0; j < width; ++j) owners[l].push_back(in.u32());
  }
  try {
    net.ledger_ = OwnershipLedger::from_owners(std::move(owners), std::move(counts));
  } catch (const Error& e) {
    throw FormatError(e.what(), at);
  }
  if (net.completed_ > tasks || net.active_ > tasks) throw FormatError("task counters exceed registered tasks", at);
  std::istringstream rng_state(in.str());
  rng_state >> net.rng_.engine();
  if (!rng_state) in.fail("corrupt RNG state");

  std::vector<std::size_t> widths(net.ledger_.num_layers());
  for (std::size_t l = 0; l < widths.size(); ++l) widths[l] = net.ledger_.width(l);
  for (auto& s : net.stages_) {
    if (s.ledger_layer < 0) continue;
    at = in.offset();
    Tensor w = in.tensor();
    Tensor b = in.tensor();
    auto fn = read_fn(in);
    const std::size_t out = widths[static_cast<std::size_t>(s.ledger_layer)];
    const std::size_t inw = net.stage_in_width_now(s, widths);
    if (auto* d = std::get_if<MaskedDense>(&s.layer)) {
      if (w.shape() != Shape{out, inw} || b.shape() != Shape{out}) throw FormatError("dense parameters do not match ledger widths", at);
      d->weight = std::move(w);
      d->bias = std::move(b);
      d->fn = std::move(fn);
    } else if (auto* c = std::get_if<MaskedConv>(&s.layer)) {
      const std::size_t k = c->kernel_size();
      if (w.shape() != Shape{out, inw, k, k} || b.shape() != Shape{out}) throw FormatError("conv parameters do not match ledger widths", at);
      c->kernels = std::move(w);
      c->bias = std::move(b);
      c->fn = std::move(fn);
    }
  }
  at = in.offset();
  net.masks_ = MaskStore::read(in);
  for (const auto& [key, mask] : net.masks_) {
    const auto [layer, task] = key;
    if (layer >= net.ledger_.num_layers() || task == 0 || task > net.ledger_.num_tasks()) {
      throw FormatError("mask record outside the ledger", at);
    }
    const auto expected = to_ternary(static_cast<std::uint32_t>(layer), task, derive_m(net.ledger_, layer, task),
                                     derive_n(net.ledger_, layer, task));
    if (!(expected == mask)) throw FormatError("stored mask disagrees with the ownership ledger", at);
  }
  const std::uint32_t heads = in.u32();
  for (std::uint32_t i = 0; i < heads; ++i) {
    at = in.offset();
    TaskHead head;
    head.task = in.u32();
    head.weight = in.tensor();
    head.bias = in.tensor();
    if (head.weight.rank() != 2 || head.bias.rank() != 1 || head.bias.dim(0) != head.weight.dim(0)) {
      throw FormatError("malformed head", at);
    }
    net.heads_.emplace(head.task, std::move(head));
  }
  const auto end = in.raw(sizeof kEndMarker);
  if (!std::equal(end.begin(), end.end(), reinterpret_cast<const std::uint8_t*>(kEndMarker))) {
    throw FormatError("missing end marker", in.offset() - sizeof kEndMarker);
  }
  if (!in.at_end()) in.fail("trailing bytes after model");
  return net;
}

}  // namespace tfm
