#include "tfm/run.hpp"

#include <cmath>
#include <fstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "tfm/binary_io.hpp"
#include "tfm/errors.hpp"
#include "tfm/overhead.hpp"

namespace tfm {

namespace {

void write_json(const std::filesystem::path& path, const nlohmann::json& j) { write_text_file(path, j.dump(2) + "\n"); }

}  // namespace

std::string format_real(double v) {
  std::string s = fmt::format("{}", v);
  if (std::isfinite(v) && s.find_first_of(".e") == std::string::npos) s += ".0";
  return s;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string matrix_csv(const AccuracyMatrix& m) {
  std::string out = "checkpoint";
  for (std::size_t s = 1; s <= m.tasks(); ++s) out += fmt::format(",task_{}", s);
  out += "\n";
  for (std::size_t k = 1; k <= m.checkpoints(); ++k) {
    out += std::to_string(k);
    for (std::size_t s = 1; s <= m.tasks(); ++s) out += "," + (m.has(k, s) ? format_real(m.at(k, s)) : std::string());
    out += "\n";
  }
  return out;
}

std::string forgetting_csv(const Forgetting& f) {
  std::string out = "task,forgetting\n";
  for (std::size_t s = 0; s < f.per_task.size(); ++s) out += fmt::format("{},{}\n", s + 1, format_real(f.per_task[s]));
  out += fmt::format("mean,{}\n", format_real(f.mean));
  return out;
}

std::filesystem::path snapshot_path(const std::filesystem::path& run_dir, TaskId checkpoint) {
  return run_dir / "snapshots" / fmt::format("ckpt_{}.tfm", checkpoint);
}

RunSummary execute_run(const RunConfig& cfg) {
  cfg.validate();
  const std::filesystem::path dir = cfg.out;
  std::filesystem::create_directories(dir);
  write_json(dir / "status.json", {{"status", "running"}});
  write_json(dir / "config.json", cfg.to_json());
  try {
    const DatasetBundle data = load_dataset(cfg.dataset);
    const TaskSequence seq = build_sequence(data, cfg.sequence_options());
    ScenarioObserver observer;
    observer.on_checkpoint = [&](TaskId k, const MaskedNetwork& net) {
      const auto bytes = net.snapshot();
      write_file_bytes(snapshot_path(dir, k), bytes);
    };
    const ScenarioResult result = run_scenario(cfg.scenario(), data, seq, observer);

    RunSummary summary;
    summary.matrix = result.matrix;
    summary.forgetting = forgetting(result.matrix);
    summary.avg_accuracy = avg_accuracy(result.matrix);
    summary.avg_accuracy_after_first = avg_accuracy_after_first(result.matrix);
    summary.out = dir;

    write_text_file(dir / "matrix.csv", matrix_csv(result.matrix));
    write_text_file(dir / "forgetting.csv", forgetting_csv(summary.forgetting));
    auto growth = nlohmann::json::array();
    for (const auto& d : result.growth) growth.push_back(d.to_json());
    write_json(dir / "growth.json", growth);
    const auto models = overhead_models::all();
    write_text_file(dir / "overhead.csv", overhead_csv(models, cfg.arch, seq.size()));
    for (const auto& r : result.records) write_json(dir / "train_records" / fmt::format("task_{}.json", r.task), r.to_json());

    nlohmann::json status{{"status", "complete"},
                          {"avg_accuracy", summary.avg_accuracy},
                          {"mean_forgetting", summary.forgetting.mean}};
    if (cfg.sequence.mode == SplitMode::kSizedFirst) status["avg_accuracy_after_first"] = summary.avg_accuracy_after_first;
    write_json(dir / "status.json", status);
    return summary;
  } catch (const std::exception& e) {
    write_json(dir / "status.json", {{"status", "failed"}, {"error", e.what()}});
    throw;
  }
}

double evaluate_snapshot(const RunConfig& cfg, const std::filesystem::path& snapshot, TaskId task, SplitPart part) {
  const MaskedNetwork net = MaskedNetwork::restore(read_file_bytes(snapshot));
  const DatasetBundle data = load_dataset(cfg.dataset);
  const TaskSequence seq = build_sequence(data, cfg.sequence_options());
  return evaluate(net, make_split(data, seq, task, part), task).accuracy;
}

}  // namespace tfm
