#pragma once

// Desk-scale datasets: IDX image files, label-first CSV rows, and a seeded
// Gaussian-mixture generator.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tfm/tensor.hpp"

namespace tfm {

enum class DatasetFormat : std::uint8_t { kIdx, kCsv, kSynth };

struct SynthSpec {
  std::size_t classes = 10;
  std::size_t dim = 64;
  std::size_t per_class = 300;  // samples per class
  std::size_t modes = 2;        // Gaussian clusters per class
  double separation = 3.0;      // distance of every cluster centre from the origin
  double noise = 1.0;           // per-dimension standard deviation around a centre
  std::uint64_t seed = 0;
  bool operator==(const SynthSpec&) const = default;
};

struct DatasetSource {
  DatasetFormat format = DatasetFormat::kSynth;
  // IDX
  std::filesystem::path images, labels, test_images, test_labels;
  // CSV (label, value, value, ...)
  std::filesystem::path csv, test_csv;
  Shape shape;                         // CSV sample shape; empty = flat
  std::optional<std::size_t> classes;  // CSV/IDX: declared class count
  SynthSpec synth;
};

struct DatasetBundle {
  Tensor inputs;  // [n, sample shape...]
  std::vector<std::uint32_t> labels;
  std::vector<std::uint8_t> is_test;  // empty when the source has no fixed test split
  std::size_t classes = 0;
  Shape sample_shape;
  std::vector<float> mean, stddev;  // per channel, from non-test samples

  std::size_t size() const { return labels.size(); }
};

DatasetBundle load_dataset(const DatasetSource& source);
DatasetBundle generate_synthetic(const SynthSpec& spec);

/// Parses an IDX file; returns the dims and the raw unsigned-byte payload.
struct IdxArray {
  std::vector<std::size_t> dims;
  std::vector<std::uint8_t> data;
};
IdxArray parse_idx(std::span<const std::uint8_t> bytes, std::uint8_t expected_rank);

/// Per-channel standardization (channel = leading axis of [c,h,w] samples,
/// a single channel otherwise). Statistics come from non-test samples.
void normalize(DatasetBundle& bundle);

/// Mirrors a [c,h,w] sample left-to-right in place.
void hflip(std::span<float> sample, const Shape& chw);

}  // namespace tfm
