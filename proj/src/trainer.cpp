#include "tfm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "tfm/dataset.hpp"
#include "tfm/errors.hpp"
#include "tfm/loss.hpp"

namespace tfm {

namespace {

constexpr std::size_t kEvalChunk = 256;

std::size_t row_size(const Tensor& inputs, std::size_t n) { return n == 0 ? 0 : inputs.size() / n; }

Shape sample_shape(const Tensor& inputs) { return Shape(inputs.shape().begin() + 1, inputs.shape().end()); }

Tensor gather(const Tensor& inputs, std::span<const std::size_t> idx) {
  const std::size_t n = inputs.rank() == 0 ? 0 : inputs.dim(0);
  const std::size_t row = row_size(inputs, n);
  Shape shape = inputs.shape();
  shape[0] = idx.size();
  Tensor out(shape);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) throw DimensionError(fmt::format("sample index {} out of range ({})", idx[r], n));
    std::copy_n(inputs.data().begin() + static_cast<std::ptrdiff_t>(idx[r] * row), row,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * row));
  }
  return out;
}

void check_split(const Split& s, const char* name) {
  if (s.size() == 0) throw DataError(fmt::format("{} split is empty", name));
  if (s.inputs.rank() < 2 || s.inputs.dim(0) != s.size()) {
    throw DimensionError(fmt::format("{} split: {} labels for inputs of shape rank {}", name, s.size(), s.inputs.rank()));
  }
  if (!s.tasks.empty() && s.tasks.size() != s.size()) throw DimensionError(fmt::format("{} split: task ids do not match", name));
}

}  // namespace

CrossEntropy cross_entropy(std::span<const float> logits, std::size_t label) {
  if (label >= logits.size()) throw DimensionError(fmt::format("label {} >= {} classes", label, logits.size()));
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (float z : logits) sum += std::exp(static_cast<double>(z) - mx);
  const double log_z = std::log(sum) + mx;
  CrossEntropy out;
  out.loss = log_z - static_cast<double>(logits[label]);
  out.grad_logits = Tensor({logits.size()});
  for (std::size_t c = 0; c < logits.size(); ++c) {
    const double p = std::exp(static_cast<double>(logits[c]) - log_z);
    out.grad_logits[c] = static_cast<float>(p - (c == label ? 1.0 : 0.0));
  }
  return out;
}

void TrainerConfig::validate() const {
  if (batch_size == 0) throw ConfigError("trainer: batch_size must be >= 1");
  if (!(lr_init >= 0.0) || !std::isfinite(lr_init)) throw ConfigError("trainer: lr_init must be finite and >= 0");
  if (!(lr_decay_factor > 1.0)) throw ConfigError("trainer: lr_decay_factor must be > 1");
  if (patience_epochs == 0) throw ConfigError("trainer: patience_epochs must be >= 1");
  if (!(lr_floor >= 0.0)) throw ConfigError("trainer: lr_floor must be >= 0");
  if (max_epochs == 0) throw ConfigError("trainer: max_epochs must be >= 1");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("trainer: dropout_p must be in [0, 1)");
}

Split subset(const Split& split, std::span<const std::size_t> indices) {
  Split out;
  out.inputs = gather(split.inputs, indices);
  out.labels.reserve(indices.size());
  for (auto i : indices) out.labels.push_back(split.labels.at(i));
  if (!split.tasks.empty()) {
    out.tasks.reserve(indices.size());
    for (auto i : indices) out.tasks.push_back(split.tasks.at(i));
  }
  return out;
}

Split concat(std::span<const Split> parts) {
  if (parts.empty()) return {};
  const Shape shape = sample_shape(parts.front().inputs);
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (sample_shape(p.inputs) != shape) throw DimensionError("concat: sample shapes differ");
    if (p.tasks.empty() && p.size() > 0) throw DimensionError("concat: every part needs task ids");
    n += p.size();
  }
  Shape full{n};
  full.insert(full.end(), shape.begin(), shape.end());
  Split out;
  out.inputs = Tensor(full);
  std::size_t at = 0;
  for (const auto& p : parts) {
    std::copy(p.inputs.data().begin(), p.inputs.data().end(), out.inputs.data().begin() + static_cast<std::ptrdiff_t>(at));
    at += p.inputs.size();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    out.tasks.insert(out.tasks.end(), p.tasks.begin(), p.tasks.end());
  }
  return out;
}

EvalResult evaluate(const MaskedNetwork& net, const Split& split, TaskId task) {
  check_split(split, "evaluation");
  std::map<TaskId, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < split.size(); ++i) groups[split.tasks.empty() ? task : split.tasks[i]].push_back(i);

  double loss = 0.0;
  std::size_t correct = 0;
  for (const auto& [t, rows] : groups) {
    for (std::size_t start = 0; start < rows.size(); start += kEvalChunk) {
      const std::span<const std::size_t> chunk(rows.data() + start, std::min(kEvalChunk, rows.size() - start));
      const Tensor logits = net.predict(gather(split.inputs, chunk), t);
      const std::size_t classes = logits.dim(1);
      for (std::size_t r = 0; r < chunk.size(); ++r) {
        const auto row = logits.data().subspan(r * classes, classes);
        const std::uint32_t label = split.labels[chunk[r]];
        if (label >= classes) throw DataError(fmt::format("label {} out of range for task {}", label, t));
        loss += cross_entropy(row, label).loss;
        const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        if (best == label) ++correct;
      }
    }
  }
  EvalResult out;
  out.count = split.size();
  out.loss = loss / static_cast<double>(out.count);
  out.accuracy = static_cast<double>(correct) / static_cast<double>(out.count);
  return out;
}

std::vector<double> TrainRecord::lr_trace() const {
  std::vector<double> out;
  out.reserve(epochs.size());
  for (const auto& e : epochs) out.push_back(e.lr);
  return out;
}

nlohmann::json TrainRecord::to_json() const {
  nlohmann::json j;
  j["task"] = task;
  j["stop_reason"] = stop_reason;
  j["best_epoch"] = best_epoch;
  j["best_val_loss"] = best_val_loss;
  auto& rows = j["epochs"] = nlohmann::json::array();
  for (const auto& e : epochs) {
    rows.push_back({{"epoch", e.epoch},
                    {"train_loss", e.train_loss},
                    {"val_loss", e.val_loss},
                    {"val_accuracy", e.val_accuracy},
                    {"lr", e.lr}});
  }
  return j;
}

PlateauSchedule::PlateauSchedule(const TrainerConfig& cfg)
    : lr_(cfg.lr_init),
      factor_(cfg.lr_decay_factor),
      floor_(cfg.lr_floor),
      patience_(cfg.patience_epochs),
      best_(std::numeric_limits<double>::infinity()) {}

PlateauSchedule::Step PlateauSchedule::observe(double val_loss) {
  Step step;
  if (val_loss < best_ - kImprovementTolerance) {
    best_ = val_loss;
    wait_ = 0;
    step.improved = true;
    return step;
  }
  if (++wait_ >= patience_) {
    lr_ /= factor_;
    wait_ = 0;
    ++decays_;
    step.decayed = true;
    step.stop = lr_ < floor_;
  }
  return step;
}

TrainRecord fit_task(MaskedNetwork& net, TaskId task, const Split& train, const Split& val,
                     const TrainerConfig& cfg, const FitHooks& hooks) {
  cfg.validate();
  check_split(train, "train");
  check_split(val, "validation");
  if (net.active_task() != task) throw ContractError(fmt::format("fit_task({}): task is not active", task));

  Rng rng(cfg.seed);
  const Shape shape = sample_shape(train.inputs);
  const bool flip = cfg.hflip && shape.size() == 3;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  PlateauSchedule schedule(cfg);
  TrainRecord record;
  record.task = task;
  std::optional<MaskedNetwork> best;

  for (std::size_t epoch = 1;; ++epoch) {
    const double lr = schedule.lr();
    std::shuffle(order.begin(), order.end(), rng.engine());
    double train_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, order.size() - start));
      Batch batch;
      batch.inputs = gather(train.inputs, idx);
      for (auto i : idx) batch.labels.push_back(train.labels[i]);
      if (!train.tasks.empty())
        for (auto i : idx) batch.tasks.push_back(train.tasks[i]);
      if (flip) {
        const std::size_t row = batch.inputs.size() / idx.size();
        for (std::size_t r = 0; r < idx.size(); ++r)
          if (rng.bernoulli(0.5)) hflip(batch.inputs.data().subspan(r * row, row), shape);
      }
      train_loss += net.train_step(batch, task, static_cast<float>(lr), rng) * static_cast<double>(idx.size());
    }
    const EvalResult v = evaluate(net, val, task);
    EpochRecord e;
    e.epoch = epoch;
    e.train_loss = train_loss / static_cast<double>(order.size());
    e.val_loss = hooks.val_loss ? hooks.val_loss(epoch, v.loss) : v.loss;
    e.val_accuracy = v.accuracy;
    e.lr = lr;
    record.epochs.push_back(e);
    if (hooks.on_epoch) hooks.on_epoch(e);
    spdlog::debug("task {} epoch {} lr {:.3g} train {:.4f} val {:.4f} acc {:.4f}", task, epoch, lr, e.train_loss,
                  e.val_loss, e.val_accuracy);

    const PlateauSchedule::Step step = schedule.observe(e.val_loss);
    if (step.improved) {
      record.best_epoch = epoch;
      record.best_val_loss = e.val_loss;
      best = net;
    }
    if (step.stop) {
      record.stop_reason = "lr-floor";
      break;
    }
    if (epoch >= cfg.max_epochs) {
      record.stop_reason = "epoch-cap";
      break;
    }
  }
  if (best) net = std::move(*best);
  return record;
}

}  // namespace tfm
