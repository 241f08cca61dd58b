#include "tfm/config.hpp"

#include <fstream>
#include <set>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "tfm/errors.hpp"

namespace tfm {

namespace {

using nlohmann::json;

void allow_keys(const json& j, const char* section, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(fmt::format("{}: expected an object", section));
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items()) {
    if (!allowed.contains(k)) throw ConfigError(fmt::format("{}: unknown key '{}'", section, k));
  }
}

template <typename T>
T get_or(const json& j, const char* key, const char* section, T fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(fmt::format("{}.{}: wrong type", section, key));
  }
}

std::size_t get_size(const json& j, const char* key, const char* section, std::size_t fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  const json& v = j.at(key);
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
    throw ConfigError(fmt::format("{}.{}: expected a non-negative integer", section, key));
  }
  return j.at(key).get<std::size_t>();
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  if (p.empty()) return {};
  std::filesystem::path path(p);
  if (path.is_relative()) path = base / path;
  return std::filesystem::absolute(path).lexically_normal();
}

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::kDense: return "dense";
    case LayerKind::kConv: return "conv";
    case LayerKind::kPool: return "pool";
    case LayerKind::kFlatten: return "flatten";
  }
  return "?";
}

LayerKind parse_kind(const std::string& s) {
  for (auto k : {LayerKind::kDense, LayerKind::kConv, LayerKind::kPool, LayerKind::kFlatten})
    if (s == kind_name(k)) return k;
  throw ConfigError(fmt::format("arch: unknown layer kind '{}'", s));
}

const char* split_mode_name(SplitMode m) {
  switch (m) {
    case SplitMode::kRandom: return "random";
    case SplitMode::kGrouped: return "grouped";
    case SplitMode::kSizedFirst: return "sized-first";
  }
  return "?";
}

SplitMode parse_split_mode(const std::string& s) {
  for (auto m : {SplitMode::kRandom, SplitMode::kGrouped, SplitMode::kSizedFirst})
    if (s == split_mode_name(m)) return m;
  throw ConfigError(fmt::format("sequence: unknown mode '{}' (random, grouped, sized-first)", s));
}

const char* format_name(DatasetFormat f) {
  switch (f) {
    case DatasetFormat::kIdx: return "idx";
    case DatasetFormat::kCsv: return "csv";
    case DatasetFormat::kSynth: return "synth";
  }
  return "?";
}

double parse_margin(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "coarse") return kMarginCoarse;
    if (s == "fine-grained") return kMarginFineGrained;
    throw ConfigError(fmt::format("growth.margin: unknown preset '{}' (coarse, fine-grained)", s));
  }
  if (!j.is_number()) throw ConfigError("growth.margin: expected a number or preset name");
  return j.get<double>();
}

}  // namespace

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open {}", path.string()));
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

json arch_to_json(const ArchSpec& arch) {
  json j;
  j["input"] = arch.input;
  auto& layers = j["layers"] = json::array();
  for (const auto& l : arch.layers) {
    json o{{"kind", kind_name(l.kind)}};
    switch (l.kind) {
      case LayerKind::kDense:
        o["width"] = l.width;
        o["cap"] = l.max_width();
        o["dropout"] = l.dropout;
        break;
      case LayerKind::kConv:
        o["width"] = l.width;
        o["cap"] = l.max_width();
        o["kernel"] = l.kernel;
        o["stride"] = l.stride;
        o["pad"] = l.pad;
        o["dropout"] = l.dropout;
        break;
      case LayerKind::kPool:
        o["kernel"] = l.kernel;
        o["stride"] = l.stride;
        break;
      case LayerKind::kFlatten:
        break;
    }
    layers.push_back(o);
  }
  return j;
}

ArchSpec arch_from_json(const json& j) {
  allow_keys(j, "arch", {"input", "layers"});
  ArchSpec arch;
  if (!j.contains("input") || !j.at("input").is_array()) throw ConfigError("arch.input: expected an array");
  for (const auto& d : j.at("input")) {
    if (!d.is_number_integer() || d.get<std::int64_t>() < 0) throw ConfigError("arch.input: dimensions must be non-negative integers");
    arch.input.push_back(d.get<std::size_t>());
  }
  if (!j.contains("layers") || !j.at("layers").is_array()) throw ConfigError("arch.layers: expected an array");
  for (const auto& o : j.at("layers")) {
    allow_keys(o, "arch.layers[]", {"kind", "width", "cap", "kernel", "stride", "pad", "dropout"});
    LayerDesc l;
    l.kind = parse_kind(get_or<std::string>(o, "kind", "arch.layers[]", ""));
    l.width = get_size(o, "width", "arch.layers[]", 0);
    l.cap = get_size(o, "cap", "arch.layers[]", 0);
    l.kernel = get_size(o, "kernel", "arch.layers[]", l.kind == LayerKind::kPool ? 2 : l.kind == LayerKind::kConv ? 3 : 0);
    l.stride = get_size(o, "stride", "arch.layers[]", l.kind == LayerKind::kPool ? l.kernel : 1);
    l.pad = get_size(o, "pad", "arch.layers[]", 0);
    l.dropout = get_or<bool>(o, "dropout", "arch.layers[]", l.kind == LayerKind::kDense);
    if (l.growable() && l.width == 0) throw ConfigError("arch: dense/conv layers need a width");
    arch.layers.push_back(l);
  }
  arch.validate();
  return arch;
}

ArchSpec load_arch(const std::filesystem::path& path) { return arch_from_json(read_json_file(path)); }

json dataset_to_json(const DatasetSource& src) {
  json j{{"format", format_name(src.format)}};
  switch (src.format) {
    case DatasetFormat::kIdx:
      j["images"] = src.images.string();
      j["labels"] = src.labels.string();
      j["test_images"] = src.test_images.string();
      j["test_labels"] = src.test_labels.string();
      break;
    case DatasetFormat::kCsv:
      j["path"] = src.csv.string();
      j["test_path"] = src.test_csv.string();
      j["shape"] = src.shape;
      break;
    case DatasetFormat::kSynth:
      j["classes"] = src.synth.classes;
      j["dim"] = src.synth.dim;
      j["n"] = src.synth.per_class;
      j["modes"] = src.synth.modes;
      j["separation"] = src.synth.separation;
      j["noise"] = src.synth.noise;
      j["seed"] = src.synth.seed;
      break;
  }
  if (src.format != DatasetFormat::kSynth) j["classes"] = src.classes ? json(*src.classes) : json(nullptr);
  return j;
}

DatasetSource dataset_from_json(const json& j, const std::filesystem::path& base_dir) {
  allow_keys(j, "dataset", {"format", "images", "labels", "test_images", "test_labels", "path", "test_path", "shape",
                            "classes", "dim", "n", "modes", "separation", "noise", "seed"});
  DatasetSource src;
  const auto fmt_name = get_or<std::string>(j, "format", "dataset", "synth");
  if (fmt_name == "idx") {
    src.format = DatasetFormat::kIdx;
    src.images = resolve(base_dir, get_or<std::string>(j, "images", "dataset", ""));
    src.labels = resolve(base_dir, get_or<std::string>(j, "labels", "dataset", ""));
    src.test_images = resolve(base_dir, get_or<std::string>(j, "test_images", "dataset", ""));
    src.test_labels = resolve(base_dir, get_or<std::string>(j, "test_labels", "dataset", ""));
    if (src.images.empty() || src.labels.empty()) throw ConfigError("dataset: idx needs images and labels");
    if (src.test_images.empty() != src.test_labels.empty()) {
      throw ConfigError("dataset: test_images and test_labels go together");
    }
  } else if (fmt_name == "csv") {
    src.format = DatasetFormat::kCsv;
    src.csv = resolve(base_dir, get_or<std::string>(j, "path", "dataset", ""));
    src.test_csv = resolve(base_dir, get_or<std::string>(j, "test_path", "dataset", ""));
    if (src.csv.empty()) throw ConfigError("dataset: csv needs a path");
    src.shape = get_or<std::vector<std::size_t>>(j, "shape", "dataset", {});
  } else if (fmt_name == "synth") {
    src.format = DatasetFormat::kSynth;
    src.synth.classes = get_size(j, "classes", "dataset", src.synth.classes);
    src.synth.dim = get_size(j, "dim", "dataset", src.synth.dim);
    src.synth.per_class = get_size(j, "n", "dataset", src.synth.per_class);
    src.synth.modes = get_size(j, "modes", "dataset", src.synth.modes);
    src.synth.separation = get_or<double>(j, "separation", "dataset", src.synth.separation);
    src.synth.noise = get_or<double>(j, "noise", "dataset", src.synth.noise);
    src.synth.seed = get_or<std::uint64_t>(j, "seed", "dataset", src.synth.seed);
  } else {
    throw ConfigError(fmt::format("dataset: unknown format '{}' (idx, csv, synth)", fmt_name));
  }
  if (src.format != DatasetFormat::kSynth && j.contains("classes") && !j.at("classes").is_null()) {
    src.classes = get_size(j, "classes", "dataset", 0);
  }
  return src;
}

json dataset_arg_to_json(const std::string& arg) {
  if (arg == "synth" || arg.starts_with("synth:")) {
    json j{{"format", "synth"}};
    const std::string rest = arg.size() > 6 ? arg.substr(6) : "";
    std::size_t start = 0;
    while (start < rest.size()) {
      auto comma = rest.find(',', start);
      if (comma == std::string::npos) comma = rest.size();
      const std::string kv = rest.substr(start, comma - start);
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError(fmt::format("--dataset: expected key=value, got '{}'", kv));
      const std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
      try {
        if (key == "separation" || key == "noise") {
          j[key] = std::stod(value);
        } else {
          j[key] = std::stoull(value);
        }
      } catch (const std::exception&) {
        throw ConfigError(fmt::format("--dataset: bad value for {}", key));
      }
      start = comma + 1;
    }
    (void)dataset_from_json(j, std::filesystem::current_path());
    return j;
  }
  const std::filesystem::path p(arg);
  DatasetSource src;
  if (p.extension() == ".csv") {
    src = dataset_from_json(json{{"format", "csv"}, {"path", arg}}, std::filesystem::current_path());
  } else if (p.extension() == ".json") {
    src = dataset_from_json(read_json_file(p), std::filesystem::absolute(p).parent_path());
  } else {
    throw ConfigError(fmt::format("--dataset '{}': use synth[:k=v,...], a .csv file, or a .json dataset section", arg));
  }
  return dataset_to_json(src);
}

json RunConfig::to_json() const {
  json j;
  j["dataset"] = dataset_to_json(dataset);
  j["arch"] = arch_to_json(arch);
  j["method"] = to_string(method);
  j["sequence"] = {{"mode", split_mode_name(sequence.mode)},
                   {"tasks", sequence.num_tasks},
                   {"groups_file", sequence.groups_file.string()},
                   {"first_fraction", sequence.first_fraction},
                   {"test_fraction", sequence.test_fraction},
                   {"val_fraction", sequence.val_fraction}};
  j["growth"] = {{"mode", growth.mode == GrowthMode::kFixedSchedule ? "fixed" : "search"},
                 {"schedule", growth.schedule},
                 {"candidates", growth.candidate_rates},
                 {"margin", growth.margin},
                 {"search_max_epochs", growth.search_max_epochs}};
  j["trainer"] = {{"batch_size", trainer.batch_size},   {"lr_init", trainer.lr_init},
                  {"lr_decay_factor", trainer.lr_decay_factor}, {"patience_epochs", trainer.patience_epochs},
                  {"lr_floor", trainer.lr_floor},       {"max_epochs", trainer.max_epochs},
                  {"dropout_p", trainer.dropout_p},     {"hflip", trainer.hflip}};
  j["seed"] = seed;
  j["out"] = out.string();
  return j;
}

RunConfig RunConfig::from_json(const json& j, const std::filesystem::path& base_dir) {
  allow_keys(j, "config", {"dataset", "arch", "method", "sequence", "growth", "trainer", "seed", "out"});
  RunConfig c;
  c.seed = get_or<std::uint64_t>(j, "seed", "config", 0);
  if (j.contains("dataset")) {
    c.dataset = dataset_from_json(j.at("dataset"), base_dir);
    if (c.dataset.format == DatasetFormat::kSynth && !j.at("dataset").contains("seed")) c.dataset.synth.seed = c.seed;
  } else {
    c.dataset.synth.seed = c.seed;
  }
  if (!j.contains("arch")) throw ConfigError("config: 'arch' is required (file path or object)");
  const json& a = j.at("arch");
  c.arch = a.is_string() ? load_arch(resolve(base_dir, a.get<std::string>())) : arch_from_json(a);
  c.method = parse_method(get_or<std::string>(j, "method", "config", "tfm"));

  if (j.contains("sequence")) {
    const json& s = j.at("sequence");
    allow_keys(s, "sequence", {"mode", "tasks", "groups_file", "first_fraction", "test_fraction", "val_fraction"});
    c.sequence.mode = parse_split_mode(get_or<std::string>(s, "mode", "sequence", "random"));
    c.sequence.num_tasks = get_size(s, "tasks", "sequence", c.sequence.num_tasks);
    c.sequence.groups_file = resolve(base_dir, get_or<std::string>(s, "groups_file", "sequence", ""));
    c.sequence.first_fraction = get_or<double>(s, "first_fraction", "sequence", c.sequence.first_fraction);
    c.sequence.test_fraction = get_or<double>(s, "test_fraction", "sequence", c.sequence.test_fraction);
    c.sequence.val_fraction = get_or<double>(s, "val_fraction", "sequence", c.sequence.val_fraction);
  }
  if (j.contains("growth")) {
    const json& g = j.at("growth");
    allow_keys(g, "growth", {"mode", "schedule", "candidates", "margin", "search_max_epochs"});
    const auto mode = get_or<std::string>(g, "mode", "growth", "fixed");
    if (mode == "fixed") {
      c.growth.mode = GrowthMode::kFixedSchedule;
    } else if (mode == "search") {
      c.growth.mode = GrowthMode::kValidationSearch;
    } else {
      throw ConfigError(fmt::format("growth.mode: unknown '{}' (fixed, search)", mode));
    }
    c.growth.schedule = get_or<std::vector<double>>(g, "schedule", "growth", c.growth.schedule);
    c.growth.candidate_rates = get_or<std::vector<double>>(g, "candidates", "growth", c.growth.candidate_rates);
    if (g.contains("margin")) c.growth.margin = parse_margin(g.at("margin"));
    c.growth.search_max_epochs = get_size(g, "search_max_epochs", "growth", 0);
  }
  if (j.contains("trainer")) {
    const json& t = j.at("trainer");
    allow_keys(t, "trainer", {"batch_size", "lr_init", "lr_decay_factor", "patience_epochs", "lr_floor", "max_epochs",
                              "dropout_p", "hflip"});
    c.trainer.batch_size = get_size(t, "batch_size", "trainer", c.trainer.batch_size);
    c.trainer.lr_init = get_or<double>(t, "lr_init", "trainer", c.trainer.lr_init);
    c.trainer.lr_decay_factor = get_or<double>(t, "lr_decay_factor", "trainer", c.trainer.lr_decay_factor);
    c.trainer.patience_epochs = get_size(t, "patience_epochs", "trainer", c.trainer.patience_epochs);
    c.trainer.lr_floor = get_or<double>(t, "lr_floor", "trainer", c.trainer.lr_floor);
    c.trainer.max_epochs = get_size(t, "max_epochs", "trainer", c.trainer.max_epochs);
    c.trainer.dropout_p = get_or<double>(t, "dropout_p", "trainer", c.trainer.dropout_p);
    c.trainer.hflip = get_or<bool>(t, "hflip", "trainer", c.trainer.hflip);
  }
  const auto out = get_or<std::string>(j, "out", "config", "");
  if (!out.empty()) c.out = resolve(base_dir, out);
  c.validate();
  return c;
}

void RunConfig::validate() const {
  arch.validate();
  growth.validate();
  trainer.validate();
  if (sequence.num_tasks == 0) throw ConfigError("sequence.tasks must be >= 1");
  if (sequence.mode == SplitMode::kGrouped && sequence.groups_file.empty()) {
    throw ConfigError("sequence: grouped mode needs groups_file");
  }
}

SequenceOptions RunConfig::sequence_options() const {
  SequenceOptions s = sequence;
  s.seed = derive_seed(RngSeed{seed}, 2);
  return s;
}

ScenarioConfig RunConfig::scenario() const {
  ScenarioConfig s;
  s.method = method;
  s.arch = arch;
  s.policy = growth;
  s.trainer = trainer;
  s.seed = RngSeed{seed};
  return s;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  return RunConfig::from_json(read_json_file(path), std::filesystem::absolute(path).parent_path());
}

}  // namespace tfm
