#pragma once

// Run configuration: JSON parsing, validation, and the resolved form that
// is written next to the results.

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "tfm/dataset.hpp"
#include "tfm/growth_policy.hpp"
#include "tfm/harness.hpp"
#include "tfm/network.hpp"
#include "tfm/trainer.hpp"

namespace tfm {

struct RunConfig {
  DatasetSource dataset;
  ArchSpec arch;
  MethodKind method = MethodKind::kTfm;
  SequenceOptions sequence;
  GrowthPolicy growth;
  TrainerConfig trainer;
  std::uint64_t seed = 0;
  std::filesystem::path out = "runs/latest";

  /// Fully resolved form: paths absolute, arch inline, every default spelled out.
  nlohmann::json to_json() const;
  /// Relative paths are resolved against `base_dir`. Throws ConfigError.
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
  void validate() const;

  ScenarioConfig scenario() const;
  SequenceOptions sequence_options() const;
};

RunConfig load_run_config(const std::filesystem::path& path);

nlohmann::json arch_to_json(const ArchSpec& arch);
ArchSpec arch_from_json(const nlohmann::json& j);
ArchSpec load_arch(const std::filesystem::path& path);

nlohmann::json dataset_to_json(const DatasetSource& src);
DatasetSource dataset_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
/// Dataset section for `synth[:key=value,...]`, a .csv file, or a JSON file
/// holding a dataset section. Paths come back absolute.
nlohmann::json dataset_arg_to_json(const std::string& arg);

nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace tfm
