#include "tfm/overhead.hpp"

#include <fmt/format.h>

#include "tfm/errors.hpp"

namespace tfm {

ParamCount count_params(const ArchSpec& arch) {
  ParamCount c;
  for (const auto& g : layer_geometry(arch)) {
    c.weights += g.out * g.in * g.kernel * g.kernel + g.out;
    c.features += g.out;
  }
  return c;
}

std::uint64_t OverheadModel::unit_bytes(const ParamCount& counts) const {
  const std::uint64_t f = counts.features, w = counts.weights;
  std::uint64_t bytes = (std::uint64_t{bits_per_feature} * f + 7) / 8;
  bytes += 4 * std::uint64_t{floats_per_feature} * f;
  bytes += (std::uint64_t{bits_per_weight} * w + 7) / 8;
  bytes += 4 * std::uint64_t{floats_per_weight} * w;
  if (network_copy) bytes += 4 * w;
  return bytes;
}

std::uint64_t OverheadModel::bytes(const ParamCount& counts, std::size_t tasks) const {
  if (tasks == 0) return 0;
  return unit_bytes(counts) * (once ? 1 : tasks);
}

namespace overhead_models {
OverheadModel tfm() { return {"tfm-no-fn", 2, 0, 0, 0, false, false}; }
OverheadModel tfm_fn() { return {"tfm-fn", 2, 2, 0, 0, false, false}; }
OverheadModel attention() { return {"attention-mask", 0, 1, 0, 0, false, false}; }
OverheadModel weight_mask() { return {"weight-mask", 0, 0, 1, 0, false, false}; }
OverheadModel importance() { return {"importance", 0, 0, 0, 1, false, true}; }
OverheadModel network_copy() { return {"network-copy", 0, 0, 0, 0, true, false}; }

std::vector<OverheadModel> all() {
  return {tfm(), tfm_fn(), attention(), weight_mask(), importance(), network_copy()};
}

OverheadModel by_name(const std::string& name) {
  for (auto& m : all())
    if (m.method == name) return m;
  throw ConfigError(fmt::format("unknown overhead model '{}'", name));
}
}  // namespace overhead_models

std::vector<std::uint64_t> overhead_curve(const OverheadModel& model, const ArchSpec& arch, std::size_t tasks) {
  const ParamCount counts = count_params(arch);
  std::vector<std::uint64_t> out;
  out.reserve(tasks + 1);
  for (std::size_t t = 0; t <= tasks; ++t) out.push_back(model.bytes(counts, t));
  return out;
}

std::string overhead_csv(std::span<const OverheadModel> models, const ArchSpec& arch, std::size_t tasks) {
  std::string out = "tasks";
  for (const auto& m : models) out += "," + m.method;
  out += "\n";
  std::vector<std::vector<std::uint64_t>> curves;
  for (const auto& m : models) curves.push_back(overhead_curve(m, arch, tasks));
  for (std::size_t t = 0; t <= tasks; ++t) {
    out += std::to_string(t);
    for (const auto& c : curves) out += "," + std::to_string(c[t]);
    out += "\n";
  }
  return out;
}

}  // namespace tfm
