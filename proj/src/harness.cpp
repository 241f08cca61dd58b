#include "tfm/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <json.hpp>

#include "tfm/errors.hpp"

namespace tfm {

namespace {

std::vector<std::vector<std::uint32_t>> split_evenly(const std::vector<std::uint32_t>& classes, std::size_t parts) {
  std::vector<std::vector<std::uint32_t>> out(parts);
  const std::size_t share = classes.size() / parts, rem = classes.size() % parts;
  std::size_t at = 0;
  for (std::size_t t = 0; t < parts; ++t) {
    const std::size_t n = share + (t < rem ? 1 : 0);
    out[t].assign(classes.begin() + static_cast<std::ptrdiff_t>(at), classes.begin() + static_cast<std::ptrdiff_t>(at + n));
    at += n;
  }
  return out;
}

std::vector<std::vector<std::uint32_t>> read_groups(const std::filesystem::path& path, std::size_t classes) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open class-group file {}", path.string()));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
  if (!j.is_array()) throw ConfigError(fmt::format("{}: expected an array of class-id arrays", path.string()));
  std::vector<std::vector<std::uint32_t>> groups;
  std::set<std::uint32_t> seen;
  for (const auto& g : j) {
    if (!g.is_array() || g.empty()) throw ConfigError(fmt::format("{}: every group must be a non-empty array", path.string()));
    auto& group = groups.emplace_back();
    for (const auto& c : g) {
      if (!c.is_number_unsigned()) throw ConfigError(fmt::format("{}: class ids must be non-negative integers", path.string()));
      const auto id = c.get<std::uint32_t>();
      if (id >= classes) throw ConfigError(fmt::format("{}: class {} but the dataset has {} classes", path.string(), id, classes));
      if (!seen.insert(id).second) throw ConfigError(fmt::format("{}: class {} appears in two groups", path.string(), id));
      group.push_back(id);
    }
  }
  return groups;
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

TaskSequence build_sequence(const DatasetBundle& data, const SequenceOptions& options) {
  if (options.num_tasks == 0) throw ConfigError("sequence: at least one task is required");
  if (!(options.val_fraction > 0.0 && options.val_fraction < 1.0)) throw ConfigError("sequence: val_fraction must be in (0, 1)");
  if (!(options.test_fraction > 0.0 && options.test_fraction < 1.0)) {
    throw ConfigError("sequence: test_fraction must be in (0, 1)");
  }
  Rng rng(options.seed);
  std::vector<std::uint32_t> classes(data.classes);
  std::iota(classes.begin(), classes.end(), 0u);

  std::vector<std::vector<std::uint32_t>> groups;
  switch (options.mode) {
    case SplitMode::kRandom:
      if (options.num_tasks > data.classes) {
        throw ConfigError(fmt::format("sequence: {} tasks but only {} classes", options.num_tasks, data.classes));
      }
      std::shuffle(classes.begin(), classes.end(), rng.engine());
      groups = split_evenly(classes, options.num_tasks);
      break;
    case SplitMode::kGrouped:
      groups = read_groups(options.groups_file, data.classes);
      if (groups.size() != options.num_tasks) {
        throw ConfigError(fmt::format("sequence: group file has {} groups for {} tasks", groups.size(), options.num_tasks));
      }
      break;
    case SplitMode::kSizedFirst: {
      if (!(options.first_fraction > 0.0 && options.first_fraction < 1.0) || options.num_tasks < 2) {
        throw ConfigError("sequence: sized-first needs first_fraction in (0, 1) and >= 2 tasks");
      }
      std::shuffle(classes.begin(), classes.end(), rng.engine());
      const auto first = static_cast<std::size_t>(std::floor(options.first_fraction * static_cast<double>(data.classes) + 0.5));
      if (first == 0 || data.classes - first < options.num_tasks - 1) {
        throw ConfigError("sequence: not enough classes for the sized-first split");
      }
      groups.emplace_back(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>(first));
      auto rest = split_evenly(std::vector<std::uint32_t>(classes.begin() + static_cast<std::ptrdiff_t>(first), classes.end()),
                               options.num_tasks - 1);
      groups.insert(groups.end(), rest.begin(), rest.end());
      break;
    }
  }

  std::vector<std::vector<std::size_t>> by_class(data.classes);
  for (std::size_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(i);

  struct ClassSplit {
    std::vector<std::size_t> train, val, test;
  };
  std::vector<ClassSplit> per_class(data.classes);
  for (std::uint32_t c = 0; c < data.classes; ++c) {
    auto& cs = per_class[c];
    std::vector<std::size_t> pool;
    for (auto i : by_class[c]) {
      if (!data.is_test.empty() && data.is_test[i]) {
        cs.test.push_back(i);
      } else {
        pool.push_back(i);
      }
    }
    std::shuffle(pool.begin(), pool.end(), rng.engine());
    if (data.is_test.empty()) {
      const auto n_test = static_cast<std::size_t>(std::floor(options.test_fraction * static_cast<double>(pool.size()) + 0.5));
      cs.test.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_test));
      pool.erase(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_test));
    }
    const auto n_val = std::max<std::size_t>(
        pool.size() >= 2 ? 1 : 0,
        static_cast<std::size_t>(std::floor(options.val_fraction * static_cast<double>(pool.size()) + 0.5)));
    cs.val.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_val));
    cs.train.assign(pool.begin() + static_cast<std::ptrdiff_t>(n_val), pool.end());
    std::sort(cs.train.begin(), cs.train.end());
    std::sort(cs.val.begin(), cs.val.end());
    std::sort(cs.test.begin(), cs.test.end());
  }

  TaskSequence seq;
  seq.mode = options.mode;
  for (std::size_t t = 0; t < groups.size(); ++t) {
    TaskSplit ts;
    ts.classes = groups[t];
    for (auto c : ts.classes) {
      const auto& cs = per_class[c];
      ts.train.insert(ts.train.end(), cs.train.begin(), cs.train.end());
      ts.val.insert(ts.val.end(), cs.val.begin(), cs.val.end());
      ts.test.insert(ts.test.end(), cs.test.begin(), cs.test.end());
    }
    if (ts.train.empty() || ts.val.empty() || ts.test.empty()) {
      throw DataError(fmt::format("task {} has an empty train, val, or test split", t + 1));
    }
    seq.tasks.push_back(std::move(ts));
  }
  return seq;
}

Split make_split(const DatasetBundle& data, const TaskSequence& seq, TaskId task, SplitPart part) {
  if (task == 0 || task > seq.size()) throw LookupError(fmt::format("sequence has no task {}", task));
  const TaskSplit& ts = seq.tasks[task - 1];
  const auto& idx = part == SplitPart::kTrain ? ts.train : part == SplitPart::kVal ? ts.val : ts.test;
  Split full;
  full.inputs = data.inputs;
  full.labels = data.labels;
  Split out = subset(full, idx);
  for (auto& label : out.labels) {
    const auto it = std::find(ts.classes.begin(), ts.classes.end(), label);
    label = static_cast<std::uint32_t>(it - ts.classes.begin());
  }
  out.tasks.assign(out.size(), task);
  return out;
}

AccuracyMatrix::AccuracyMatrix(std::size_t tasks) : n_(tasks), cells_(tasks * tasks) {}

void AccuracyMatrix::set(std::size_t k, std::size_t s, double acc) {
  if (s == 0 || s > k || k > n_) throw LookupError(fmt::format("accuracy cell ({}, {}) outside the matrix", k, s));
  if (!(acc >= 0.0 && acc <= 1.0)) throw NumericError(fmt::format("accuracy {} outside [0, 1]", acc));
  cells_[(k - 1) * n_ + (s - 1)] = acc;
}

bool AccuracyMatrix::has(std::size_t k, std::size_t s) const {
  return s >= 1 && s <= k && k <= n_ && cells_[(k - 1) * n_ + (s - 1)].has_value();
}

double AccuracyMatrix::at(std::size_t k, std::size_t s) const {
  if (s == 0 || s > k || k > n_) throw LookupError(fmt::format("accuracy cell ({}, {}) outside the matrix", k, s));
  const auto& v = cells_[(k - 1) * n_ + (s - 1)];
  if (!v) throw StateError(fmt::format("accuracy cell ({}, {}) not filled", k, s));
  return *v;
}

std::size_t AccuracyMatrix::checkpoints() const {
  std::size_t k = 0;
  while (k < n_) {
    for (std::size_t s = 1; s <= k + 1; ++s)
      if (!has(k + 1, s)) return k;
    ++k;
  }
  return k;
}

bool AccuracyMatrix::complete() const { return n_ > 0 && checkpoints() == n_; }

Forgetting forgetting(const AccuracyMatrix& m) {
  if (!m.complete()) throw StateError("forgetting needs a complete accuracy matrix");
  const std::size_t k = m.tasks();
  Forgetting f;
  for (std::size_t s = 1; s <= k; ++s) f.per_task.push_back(m.at(s, s) - m.at(k, s));
  if (k > 1) f.mean = mean(std::vector<double>(f.per_task.begin(), f.per_task.end() - 1));
  return f;
}

double avg_accuracy(const AccuracyMatrix& m) {
  if (!m.complete()) throw StateError("average accuracy needs a complete accuracy matrix");
  std::vector<double> row;
  for (std::size_t s = 1; s <= m.tasks(); ++s) row.push_back(m.at(m.tasks(), s));
  return mean(row);
}

double avg_accuracy_after_first(const AccuracyMatrix& m) {
  if (!m.complete()) throw StateError("average accuracy needs a complete accuracy matrix");
  std::vector<double> row;
  for (std::size_t s = 2; s <= m.tasks(); ++s) row.push_back(m.at(m.tasks(), s));
  return mean(row);
}

std::string to_string(MethodKind m) {
  switch (m) {
    case MethodKind::kTfm: return "tfm";
    case MethodKind::kTfmNoFn: return "tfm-no-fn";
    case MethodKind::kBinaryMask: return "binary-mask";
    case MethodKind::kFinetune: return "finetune";
    case MethodKind::kFreeze: return "freeze";
    case MethodKind::kJoint: return "joint";
  }
  return "?";
}

MethodKind parse_method(const std::string& s) {
  for (auto m : {MethodKind::kTfm, MethodKind::kTfmNoFn, MethodKind::kBinaryMask, MethodKind::kFinetune,
                 MethodKind::kFreeze, MethodKind::kJoint}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError(fmt::format("unknown method '{}' (tfm, tfm-no-fn, binary-mask, finetune, freeze, joint)", s));
}

MaskedNetwork make_network(const ScenarioConfig& cfg) {
  NetworkOptions opt;
  switch (cfg.method) {
    case MethodKind::kTfm: opt.mode = MaskMode::kTernary; opt.fn_enabled = true; break;
    case MethodKind::kTfmNoFn: opt.mode = MaskMode::kTernary; opt.fn_enabled = false; break;
    case MethodKind::kBinaryMask: opt.mode = MaskMode::kBinary; opt.fn_enabled = false; break;
    default: opt.mode = MaskMode::kNone; opt.fn_enabled = false; break;
  }
  opt.dropout_p = cfg.trainer.dropout_p;
  return MaskedNetwork(cfg.arch, opt, derive_seed(cfg.seed, 1));
}

ScenarioResult run_scenario(const ScenarioConfig& cfg, const DatasetBundle& data, const TaskSequence& seq,
                            const ScenarioObserver& observer) {
  cfg.arch.validate();
  cfg.trainer.validate();
  cfg.policy.validate();
  const std::size_t k_max = seq.size();
  if (k_max == 0) throw ConfigError("empty task sequence");
  if (shape_size(cfg.arch.input) != shape_size(data.sample_shape)) {
    throw ConfigError(fmt::format("architecture expects {} input values but samples have {}", shape_size(cfg.arch.input),
                                  shape_size(data.sample_shape)));
  }

  MaskedNetwork net = make_network(cfg);
  const auto caps = cfg.arch.caps();
  if (cfg.method == MethodKind::kBinaryMask) net.partition(static_cast<TaskId>(k_max));

  ScenarioResult result;
  result.matrix = AccuracyMatrix(k_max);
  std::vector<Split> tests, trains, vals;
  for (TaskId k = 1; k <= k_max; ++k) {
    tests.push_back(make_split(data, seq, k, SplitPart::kTest));
    trains.push_back(make_split(data, seq, k, SplitPart::kTrain));
    vals.push_back(make_split(data, seq, k, SplitPart::kVal));
  }

  for (TaskId k = 1; k <= k_max; ++k) {
    const std::size_t classes = seq.tasks[k - 1].classes.size();
    TrainerConfig tcfg = cfg.trainer;
    tcfg.seed = derive_seed(cfg.seed, 100 + k);
    const Split& train = trains[k - 1];
    const Split& val = vals[k - 1];

    switch (cfg.method) {
      case MethodKind::kTfm:
      case MethodKind::kTfmNoFn: {
        GrowthDecision d;
        if (cfg.policy.mode == GrowthMode::kFixedSchedule) {
          d = scheduled_rate(cfg.policy, k, caps);
        } else if (k == 1) {
          d.task = 1;
          d.added = cfg.arch.initial_widths();
          const auto total = std::accumulate(caps.begin(), caps.end(), std::size_t{0});
          d.chosen_rate = static_cast<double>(std::accumulate(d.added.begin(), d.added.end(), std::size_t{0})) /
                          static_cast<double>(total);
        } else {
          TrainerConfig scfg = tcfg;
          scfg.seed = derive_seed(cfg.seed, 200 + k);
          d = select_rate(cfg.policy, net, k, classes, train, val, scfg);
        }
        net.grow(k, d.added);
        result.growth.push_back(d);
        break;
      }
      case MethodKind::kFinetune:
      case MethodKind::kFreeze:
      case MethodKind::kJoint:
        net.grow(k, k == 1 ? caps : std::vector<std::size_t>(caps.size(), 0));
        if (cfg.method == MethodKind::kFreeze && k > 1) net.set_trunk_frozen(true);
        break;
      case MethodKind::kBinaryMask:
        break;
    }

    net.begin_task(k, classes);
    spdlog::info("{}: task {} ({} classes, {} train samples)", to_string(cfg.method), k, classes, train.size());
    if (cfg.method == MethodKind::kJoint) {
      const Split all_train = concat(std::span(trains.data(), k));
      const Split all_val = concat(std::span(vals.data(), k));
      result.records.push_back(fit_task(net, k, all_train, all_val, tcfg));
    } else {
      result.records.push_back(fit_task(net, k, train, val, tcfg));
    }
    net.end_task(k);

    for (TaskId s = 1; s <= k; ++s) result.matrix.set(k, s, evaluate(net, tests[s - 1], s).accuracy);
    spdlog::info("{}: after task {} accuracy on task {} = {:.4f}", to_string(cfg.method), k, k, result.matrix.at(k, k));
    if (observer.on_checkpoint) observer.on_checkpoint(k, net);
  }
  return result;
}

}  // namespace tfm
