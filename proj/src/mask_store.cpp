#include "tfm/mask_store.hpp"

#include <algorithm>
#include <string>

#include <fmt/format.h>

#include "tfm/binary_io.hpp"
#include "tfm/errors.hpp"

namespace tfm {

Mask ones(std::size_t n) { return Mask(n, 1); }
Mask zeros(std::size_t n) { return Mask(n, 0); }

Mask pad(const Mask& mask, std::size_t width) {
  if (mask.size() > width) {
    throw DimensionError(fmt::format("cannot pad mask of {} to width {}", mask.size(), width));
  }
  Mask out = mask;
  out.resize(width, 0);
  return out;
}

Mask expand(const Mask& mask, std::size_t factor) {
  Mask out;
  out.reserve(mask.size() * factor);
  for (auto bit : mask) out.insert(out.end(), factor, bit);
  return out;
}

std::size_t count_set(const Mask& mask) {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

OwnershipLedger::OwnershipLedger(std::size_t num_layers) : owners_(num_layers), counts_(num_layers) {}

OwnershipLedger OwnershipLedger::from_owners(std::vector<std::vector<TaskId>> owners,
                                             std::vector<std::vector<std::size_t>> counts) {
  if (owners.size() != counts.size()) throw ConfigError("ledger: owners/counts layer count differs");
  OwnershipLedger ledger;
  ledger.num_tasks_ = counts.empty() ? 0 : static_cast<TaskId>(counts.front().size());
  for (std::size_t l = 0; l < owners.size(); ++l) {
    const auto& c = counts[l];
    if (c.size() != ledger.num_tasks_) throw ConfigError("ledger: layers disagree on task count");
    if (!std::is_sorted(c.begin(), c.end())) {
      throw ConfigError(fmt::format("ledger: layer {} widths decrease across tasks", l));
    }
    if (!c.empty() && c.back() != owners[l].size()) {
      throw ConfigError(fmt::format("ledger: layer {} has {} features but final width {}", l,
                                    owners[l].size(), c.back()));
    }
    for (std::size_t j = 0; j < owners[l].size(); ++j) {
      const TaskId t = owners[l][j];
      if (t == kUnowned) continue;
      if (t > ledger.num_tasks_) {
        throw ConfigError(fmt::format("ledger: feature {} of layer {} owned by unknown task {}", j, l, t));
      }
      if (j >= c[t - 1]) {
        throw ConfigError(
            fmt::format("ledger: feature {} of layer {} did not exist when task {} trained", j, l, t));
      }
    }
  }
  ledger.owners_ = std::move(owners);
  ledger.counts_ = std::move(counts);
  return ledger;
}

TaskId OwnershipLedger::register_task(std::span<const std::size_t> added) {
  if (added.size() != owners_.size()) {
    throw DimensionError(fmt::format("register_task: {} growth entries for {} layers", added.size(),
                                     owners_.size()));
  }
  const TaskId task = num_tasks_ + 1;
  for (std::size_t l = 0; l < owners_.size(); ++l) {
    owners_[l].insert(owners_[l].end(), added[l], task);
    counts_[l].push_back(owners_[l].size());
  }
  num_tasks_ = task;
  return task;
}

void OwnershipLedger::check_layer(std::size_t layer) const {
  if (layer >= owners_.size()) throw LookupError(fmt::format("unknown layer {}", layer));
}

void OwnershipLedger::check_task(TaskId task) const {
  if (task == 0 || task > num_tasks_) throw LookupError(fmt::format("task {} is not registered", task));
}

std::size_t OwnershipLedger::width(std::size_t layer) const {
  check_layer(layer);
  return owners_[layer].size();
}

std::size_t OwnershipLedger::width_at(std::size_t layer, TaskId task) const {
  check_layer(layer);
  check_task(task);
  return counts_[layer][task - 1];
}

TaskId OwnershipLedger::owner(std::size_t layer, std::size_t feature) const {
  check_layer(layer);
  if (feature >= owners_[layer].size()) throw LookupError(fmt::format("unknown feature {}", feature));
  return owners_[layer][feature];
}

std::span<const TaskId> OwnershipLedger::owners(std::size_t layer) const {
  check_layer(layer);
  return owners_[layer];
}

std::span<const std::size_t> OwnershipLedger::counts(std::size_t layer) const {
  check_layer(layer);
  return counts_[layer];
}

Mask derive_m(const OwnershipLedger& ledger, std::size_t layer, TaskId task) {
  const std::size_t width = ledger.width_at(layer, task);
  const auto owners = ledger.owners(layer);
  Mask m(width);
  for (std::size_t j = 0; j < width; ++j) m[j] = owners[j] == task ? 1 : 0;
  return m;
}

Mask derive_n(const OwnershipLedger& ledger, std::size_t layer, TaskId task) {
  const std::size_t width = ledger.width_at(layer, task);
  const auto owners = ledger.owners(layer);
  Mask n(width);
  for (std::size_t j = 0; j < width; ++j) n[j] = owners[j] != kUnowned && owners[j] <= task ? 1 : 0;
  return n;
}

void check_disjoint(std::span<const Mask> masks) {
  std::size_t width = 0;
  for (const auto& m : masks) width = std::max(width, m.size());
  std::vector<std::size_t> claimed(width, masks.size());
  for (std::size_t t = 0; t < masks.size(); ++t) {
    for (std::size_t j = 0; j < masks[t].size(); ++j) {
      if (!masks[t][j]) continue;
      if (claimed[j] != masks.size()) {
        throw InvalidMaskError(
            fmt::format("masks {} and {} both select feature {}", claimed[j], t, j));
      }
      claimed[j] = t;
    }
  }
}

std::vector<std::uint8_t> pack(std::span<const MaskState> states) {
  std::vector<std::uint8_t> bytes(packed_size(states.size()), 0);
  for (std::size_t f = 0; f < states.size(); ++f) {
    const auto v = static_cast<std::uint8_t>(states[f]);
    if (v > 2) throw InvalidMaskError(fmt::format("invalid mask state {} at feature {}", v, f));
    bytes[f / 4] |= static_cast<std::uint8_t>(v << (2 * (f % 4)));
  }
  return bytes;
}

std::vector<MaskState> unpack(std::span<const std::uint8_t> bytes, std::size_t count) {
  if (bytes.size() != packed_size(count)) {
    throw CorruptionError(fmt::format("{} packed bytes cannot hold exactly {} states", bytes.size(), count));
  }
  std::vector<MaskState> states(count);
  for (std::size_t f = 0; f < count; ++f) {
    const auto v = static_cast<std::uint8_t>((bytes[f / 4] >> (2 * (f % 4))) & 0x3u);
    if (v == 3) throw CorruptionError(fmt::format("reserved mask state 3 at feature {}", f));
    states[f] = static_cast<MaskState>(v);
  }
  return states;
}

LayerTaskMask::LayerTaskMask(std::uint32_t layer_id, TaskId task_id, std::span<const MaskState> states)
    : layer_id_(layer_id), task_id_(task_id), count_(states.size()), bytes_(pack(states)) {}

MaskState LayerTaskMask::state(std::size_t feature) const {
  if (feature >= count_) throw LookupError(fmt::format("feature {} beyond mask width {}", feature, count_));
  const auto v = static_cast<std::uint8_t>((bytes_[feature / 4] >> (2 * (feature % 4))) & 0x3u);
  if (v == 3) throw CorruptionError(fmt::format("reserved mask state 3 at feature {}", feature));
  return static_cast<MaskState>(v);
}

Mask LayerTaskMask::m() const {
  Mask out(count_);
  const auto s = states();
  for (std::size_t j = 0; j < count_; ++j) out[j] = s[j] == MaskState::kNormal ? 1 : 0;
  return out;
}

Mask LayerTaskMask::n() const {
  Mask out(count_);
  const auto s = states();
  for (std::size_t j = 0; j < count_; ++j) out[j] = s[j] != MaskState::kMasked ? 1 : 0;
  return out;
}

void LayerTaskMask::write(ByteWriter& out) const {
  out.u32(layer_id_);
  out.u32(task_id_);
  out.u32(static_cast<std::uint32_t>(count_));
  out.raw(bytes_);
}

LayerTaskMask LayerTaskMask::read(ByteReader& in) {
  LayerTaskMask mask;
  mask.layer_id_ = in.u32();
  mask.task_id_ = in.u32();
  mask.count_ = in.u32();
  const std::size_t start = in.offset();
  auto bytes = in.raw(packed_size(mask.count_));
  mask.bytes_.assign(bytes.begin(), bytes.end());
  try {
    (void)unpack(mask.bytes_, mask.count_);
  } catch (const CorruptionError& e) {
    throw FormatError(e.what(), start);
  }
  return mask;
}

std::vector<MaskState> to_ternary(const Mask& m, const Mask& n) {
  if (m.size() != n.size()) {
    throw DimensionError(fmt::format("mask pair widths differ: {} vs {}", m.size(), n.size()));
  }
  std::vector<MaskState> states(m.size());
  for (std::size_t j = 0; j < m.size(); ++j) {
    if (m[j] && !n[j]) {
      throw InvalidMaskError(fmt::format("feature {} is learnable but not visible (m=1, n=0)", j));
    }
    states[j] = m[j] ? MaskState::kNormal : (n[j] ? MaskState::kForwardOnly : MaskState::kMasked);
  }
  return states;
}

LayerTaskMask to_ternary(std::uint32_t layer_id, TaskId task_id, const Mask& m, const Mask& n) {
  const auto states = to_ternary(m, n);
  return LayerTaskMask(layer_id, task_id, states);
}

void MaskStore::materialize(const OwnershipLedger& ledger, TaskId task) {
  for (std::size_t l = 0; l < ledger.num_layers(); ++l) {
    insert(to_ternary(static_cast<std::uint32_t>(l), task, derive_m(ledger, l, task),
                      derive_n(ledger, l, task)));
  }
}

void MaskStore::insert(LayerTaskMask mask) {
  const auto key = std::make_pair(static_cast<std::size_t>(mask.layer_id()), mask.task_id());
  if (masks_.contains(key)) {
    throw StateError(fmt::format("mask for layer {} task {} is already stored", key.first, key.second));
  }
  masks_.emplace(key, std::move(mask));
}

const LayerTaskMask& MaskStore::get(std::size_t layer, TaskId task) const {
  auto it = masks_.find({layer, task});
  if (it == masks_.end()) throw LookupError(fmt::format("no stored mask for layer {} task {}", layer, task));
  return it->second;
}

bool MaskStore::contains(std::size_t layer, TaskId task) const { return masks_.contains({layer, task}); }

std::size_t MaskStore::payload_bytes() const {
  std::size_t total = 0;
  for (const auto& [key, mask] : masks_) total += mask.bytes().size();
  return total;
}

void MaskStore::write(ByteWriter& out) const {
  out.u32(static_cast<std::uint32_t>(masks_.size()));
  for (const auto& [key, mask] : masks_) mask.write(out);
}

MaskStore MaskStore::read(ByteReader& in) {
  MaskStore store;
  const std::uint32_t n = in.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::size_t at = in.offset();
    auto mask = LayerTaskMask::read(in);
    if (store.contains(mask.layer_id(), mask.task_id())) throw FormatError("duplicate mask record", at);
    store.insert(std::move(mask));
  }
  return store;
}

}  // namespace tfm
