// tfm: command-line front end for continual-learning runs and overhead tables.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>
#include <spdlog/spdlog.h>

#include "tfm/config.hpp"
#include "tfm/dataset.hpp"
#include "tfm/errors.hpp"
#include "tfm/harness.hpp"
#include "tfm/log.hpp"
#include "tfm/overhead.hpp"
#include "tfm/run.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Exit : int { kOk = 0, kConfig = 2, kData = 3, kCapacity = 4, kInternal = 5 };

struct Overrides {
  std::string config;
  std::string method;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> tasks;
  std::string dataset;
  std::string out;
  std::string arch;
};

fs::path find_file(const std::string& name) {
  const fs::path p(name);
  if (fs::exists(p)) return fs::absolute(p);
  const fs::path in_configs = fs::path("configs") / p;
  if (p.is_relative() && fs::exists(in_configs)) return fs::absolute(in_configs);
  throw tfm::ConfigError(fmt::format("file not found: {}", name));
}

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "run configuration (JSON)");
  cmd->add_option("--method", o.method, "tfm, tfm-no-fn, binary-mask, finetune, freeze, joint");
  cmd->add_option("--seed", o.seed, "run seed");
  cmd->add_option("--tasks", o.tasks, "number of tasks");
  cmd->add_option("--dataset", o.dataset, "synth[:k=v,...], a .csv file, or a dataset .json");
  cmd->add_option("--out", o.out, "run directory");
  cmd->add_option("--arch", o.arch, "architecture (JSON)");
}

tfm::RunConfig resolve_config(const Overrides& o) {
  json j = json::object();
  fs::path base = fs::current_path();
  if (!o.config.empty()) {
    const fs::path cfg = find_file(o.config);
    j = tfm::read_json_file(cfg);
    if (!j.is_object()) throw tfm::ConfigError(fmt::format("{}: expected a JSON object", cfg.string()));
    base = cfg.parent_path();
  }
  if (!o.method.empty()) j["method"] = o.method;
  if (o.seed) {
    j["seed"] = *o.seed;
    if (j.contains("dataset") && j["dataset"].is_object() && j["dataset"].value("format", "synth") == "synth") {
      j["dataset"].erase("seed");
    }
  }
  if (o.tasks) j["sequence"]["tasks"] = *o.tasks;
  if (!o.dataset.empty()) j["dataset"] = tfm::dataset_arg_to_json(o.dataset);
  if (!o.out.empty()) j["out"] = fs::absolute(o.out).string();
  if (!o.arch.empty()) j["arch"] = find_file(o.arch).string();
  return tfm::RunConfig::from_json(j, base);
}

int cmd_run(const Overrides& o) {
  const tfm::RunConfig cfg = resolve_config(o);
  spdlog::info("run: method {} seed {} -> {}", tfm::to_string(cfg.method), cfg.seed, cfg.out.string());
  const tfm::RunSummary s = tfm::execute_run(cfg);
  std::cout << tfm::matrix_csv(s.matrix);
  std::cout << fmt::format("avg_accuracy,{}\nmean_forgetting,{}\n", tfm::format_real(s.avg_accuracy),
                           tfm::format_real(s.forgetting.mean));
  if (cfg.sequence.mode == tfm::SplitMode::kSizedFirst) {
    std::cout << fmt::format("avg_accuracy_after_first,{}\n", tfm::format_real(s.avg_accuracy_after_first));
  }
  return kOk;
}

int cmd_overhead(const std::string& arch_file, std::size_t tasks, const std::vector<std::string>& methods,
                 const std::string& out) {
  const tfm::ArchSpec arch = tfm::load_arch(find_file(arch_file));
  std::vector<tfm::OverheadModel> models;
  if (methods.empty()) {
    models = tfm::overhead_models::all();
  } else {
    for (const auto& m : methods) models.push_back(tfm::overhead_models::by_name(m));
  }
  const auto counts = tfm::count_params(arch);
  const std::string csv = tfm::overhead_csv(models, arch, tasks);
  if (!out.empty()) tfm::write_text_file(out, csv);
  std::cerr << fmt::format("weights {} features {}\n", counts.weights, counts.features);
  std::cout << csv;
  return kOk;
}

int cmd_augment_check(const Overrides& o) {
  const tfm::RunConfig cfg = resolve_config(o);
  const tfm::DatasetBundle data = tfm::load_dataset(cfg.dataset);
  const tfm::TaskSequence seq = tfm::build_sequence(data, cfg.sequence_options());
  std::cout << fmt::format("samples {} classes {} shape [{}]\n", data.size(), data.classes,
                           fmt::join(data.sample_shape, ","));
  for (std::size_t c = 0; c < data.mean.size(); ++c) {
    std::cout << fmt::format("channel {} mean {} std {}\n", c, data.mean[c], data.stddev[c]);
  }
  for (std::size_t t = 0; t < seq.size(); ++t) {
    const auto& ts = seq.tasks[t];
    std::cout << fmt::format("task {} classes [{}] train {} val {} test {}\n", t + 1, fmt::join(ts.classes, ","),
                             ts.train.size(), ts.val.size(), ts.test.size());
  }
  const bool images = data.sample_shape.size() == 3;
  if (cfg.trainer.hflip && images) {
    const tfm::Tensor sample = data.inputs.slice(0);
    tfm::Tensor flipped = sample;
    tfm::hflip(flipped.data(), data.sample_shape);
    tfm::hflip(flipped.data(), data.sample_shape);
    if (!tfm::bit_equal(flipped, sample)) throw tfm::StateError("horizontal flip is not an involution");
    std::cout << "hflip: train-time, p=0.5, seeded; evaluation unflipped\n";
  } else {
    std::cout << (images ? "hflip: disabled\n" : "hflip: not applicable (flat samples)\n");
  }
  return kOk;
}

fs::path resolve_snapshot(const std::string& arg, const fs::path& run_dir) {
  if (fs::exists(arg)) return fs::absolute(arg);
  static const std::regex short_name(R"(ckpt_?(\d+)(\.tfm)?)");
  std::smatch m;
  if (!run_dir.empty() && std::regex_match(arg, m, short_name)) {
    const auto p = tfm::snapshot_path(run_dir, static_cast<tfm::TaskId>(std::stoul(m[1].str())));
    if (fs::exists(p)) return p;
  }
  throw tfm::DataError(fmt::format("snapshot not found: {}", arg));
}

int cmd_eval(const std::string& snapshot, const std::string& run, const std::string& config, tfm::TaskId task,
             const std::string& split) {
  fs::path run_dir = run.empty() ? fs::path() : fs::absolute(run);
  if (run_dir.empty() && config.empty() && fs::exists(snapshot)) run_dir = fs::absolute(snapshot).parent_path().parent_path();
  if (run_dir.empty() && config.empty()) run_dir = fs::current_path();
  const fs::path snap = resolve_snapshot(snapshot, run_dir);
  const fs::path cfg_path = config.empty() ? run_dir / "config.json" : fs::absolute(config);
  const tfm::RunConfig cfg = tfm::load_run_config(cfg_path);
  tfm::SplitPart part = tfm::SplitPart::kTest;
  if (split == "train") {
    part = tfm::SplitPart::kTrain;
  } else if (split == "val") {
    part = tfm::SplitPart::kVal;
  } else if (split != "test") {
    throw tfm::ConfigError(fmt::format("--split must be train, val, or test (got '{}')", split));
  }
  std::cout << tfm::format_real(tfm::evaluate_snapshot(cfg, snap, task, part)) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ternary feature mask continual-learning toolkit"};
  app.require_subcommand(1);

  Overrides run_opts;
  auto* run = app.add_subcommand("run", "run a continual-learning scenario and write a run directory");
  add_overrides(run, run_opts);

  std::string arch_file, overhead_out;
  std::size_t overhead_tasks = 10;
  std::vector<std::string> methods;
  auto* overhead = app.add_subcommand("overhead", "per-method memory overhead by task count");
  overhead->add_option("--arch", arch_file, "architecture (JSON)")->required();
  overhead->add_option("--tasks", overhead_tasks, "largest task count");
  overhead->add_option("--methods", methods, "subset of models")->delimiter(',');
  overhead->add_option("--out", overhead_out, "write the CSV here as well");

  Overrides aug_opts;
  auto* augment = app.add_subcommand("augment-check", "dry-run the data pipeline");
  add_overrides(augment, aug_opts);

  std::string snapshot, run_dir, eval_config, split = "test";
  tfm::TaskId eval_task = 1;
  auto* eval = app.add_subcommand("eval", "restore a snapshot and evaluate one task");
  eval->add_option("--snapshot", snapshot, "snapshot file or ckptN inside --run")->required();
  eval->add_option("--run", run_dir, "run directory");
  eval->add_option("--config", eval_config, "run configuration (default: the run's config.json)");
  eval->add_option("--task", eval_task, "task to evaluate")->required();
  eval->add_option("--split", split, "train, val, or test");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  tfm::init_logging();
  try {
    if (*run) return cmd_run(run_opts);
    if (*overhead) return cmd_overhead(arch_file, overhead_tasks, methods, overhead_out);
    if (*augment) return cmd_augment_check(aug_opts);
    if (*eval) return cmd_eval(snapshot, run_dir, eval_config, eval_task, split);
  } catch (const tfm::ConfigError& e) {
    spdlog::error("configuration error: {}", e.what());
    return kConfig;
  } catch (const tfm::DataError& e) {
    spdlog::error("data error: {}", e.what());
    return kData;
  } catch (const tfm::FormatError& e) {
    spdlog::error("data error: {}", e.what());
    return kData;
  } catch (const tfm::CapacityError& e) {
    spdlog::error("capacity exhausted: {}", e.what());
    return kCapacity;
  } catch (const std::exception& e) {
    spdlog::error("internal error: {}", e.what());
    return kInternal;
  }
  return kInternal;
}
