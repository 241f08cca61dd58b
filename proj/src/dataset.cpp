#include "tfm/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <fmt/format.h>

#include "tfm/binary_io.hpp"
#include "tfm/errors.hpp"

namespace tfm {

namespace {

std::uint32_t be32(std::span<const std::uint8_t> b, std::size_t at) {
  if (at + 4 > b.size()) throw FormatError("IDX header truncated", at);
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

struct Rows {
  std::vector<float> values;
  std::vector<std::uint32_t> labels;
  std::size_t width = 0;
};

bool parse_number(std::string_view s, double& out) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return false;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && ptr == s.data() + s.size();
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

Rows read_csv(const std::filesystem::path& path, std::size_t expect_width) {
  std::ifstream in(path);
  if (!in) throw DataError(fmt::format("cannot open {}", path.string()));
  Rows rows;
  rows.width = expect_width;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_fields(line);
    double label = 0.0;
    if (!parse_number(fields[0], label)) {
      if (line_no == 1) continue;  // header
      throw FormatError(fmt::format("{}: line {}: label is not a number", path.string(), line_no), line_no);
    }
    if (label < 0 || label != std::floor(label) || label > 1e9) {
      throw FormatError(fmt::format("{}: line {}: label must be a non-negative integer", path.string(), line_no), line_no);
    }
    const std::size_t width = fields.size() - 1;
    if (rows.width == 0) rows.width = width;
    if (width != rows.width || width == 0) {
      throw FormatError(fmt::format("{}: line {}: {} values, expected {}", path.string(), line_no, width, rows.width),
                        line_no);
    }
    for (std::size_t i = 1; i < fields.size(); ++i) {
      double v = 0.0;
      if (!parse_number(fields[i], v) || !std::isfinite(v)) {
        throw FormatError(fmt::format("{}: line {}: column {} is not a finite number", path.string(), line_no, i + 1),
                          line_no);
      }
      rows.values.push_back(static_cast<float>(v));
    }
    rows.labels.push_back(static_cast<std::uint32_t>(label));
  }
  if (rows.labels.empty()) throw DataError(fmt::format("{} has no samples", path.string()));
  return rows;
}

void append(DatasetBundle& b, const std::vector<float>& values, const std::vector<std::uint32_t>& labels,
            bool test, std::vector<float>& data) {
  data.insert(data.end(), values.begin(), values.end());
  b.labels.insert(b.labels.end(), labels.begin(), labels.end());
  b.is_test.insert(b.is_test.end(), labels.size(), test ? 1 : 0);
}

void finish(DatasetBundle& b, std::vector<float> data, std::optional<std::size_t> declared) {
  const std::uint32_t max_label = *std::max_element(b.labels.begin(), b.labels.end());
  b.classes = declared.value_or(std::size_t{max_label} + 1);
  for (std::size_t i = 0; i < b.labels.size(); ++i) {
    if (b.labels[i] >= b.classes) {
      throw FormatError(fmt::format("sample {}: label {} out of range [0, {})", i, b.labels[i], b.classes), i);
    }
  }
  Shape shape{b.labels.size()};
  shape.insert(shape.end(), b.sample_shape.begin(), b.sample_shape.end());
  b.inputs = Tensor(std::move(shape), std::move(data));
  if (std::all_of(b.is_test.begin(), b.is_test.end(), [](auto v) { return v == 0; })) b.is_test.clear();
  normalize(b);
}

DatasetBundle load_idx(const DatasetSource& src) {
  DatasetBundle b;
  std::vector<float> data;
  auto load_pair = [&](const std::filesystem::path& img_path, const std::filesystem::path& lbl_path, bool test) {
    const auto img_bytes = read_file_bytes(img_path);
    const auto lbl_bytes = read_file_bytes(lbl_path);
    IdxArray img;
    IdxArray lbl;
    try {
      img = parse_idx(img_bytes, 3);
    } catch (const FormatError& e) {
      throw FormatError(fmt::format("{}: {}", img_path.string(), e.what()), e.offset());
    }
    try {
      lbl = parse_idx(lbl_bytes, 1);
    } catch (const FormatError& e) {
      throw FormatError(fmt::format("{}: {}", lbl_path.string(), e.what()), e.offset());
    }
    if (img.dims[0] != lbl.dims[0]) {
      throw DataError(fmt::format("{} has {} images but {} has {} labels", img_path.string(), img.dims[0],
                                  lbl_path.string(), lbl.dims[0]));
    }
    const Shape shape{1, img.dims[1], img.dims[2]};
    if (!b.sample_shape.empty() && b.sample_shape != shape) throw DataError("train and test images differ in size");
    b.sample_shape = shape;
    std::vector<float> values(img.data.begin(), img.data.end());
    std::vector<std::uint32_t> labels(lbl.data.begin(), lbl.data.end());
    append(b, values, labels, test, data);
  };
  load_pair(src.images, src.labels, false);
  if (!src.test_images.empty()) load_pair(src.test_images, src.test_labels, true);
  finish(b, std::move(data), src.classes);
  return b;
}

DatasetBundle load_csv(const DatasetSource& src) {
  DatasetBundle b;
  const std::size_t declared = shape_size(src.shape);
  const Rows train = read_csv(src.csv, src.shape.empty() ? 0 : declared);
  b.sample_shape = src.shape.empty() ? Shape{train.width} : src.shape;
  std::vector<float> data;
  append(b, train.values, train.labels, false, data);
  if (!src.test_csv.empty()) {
    const Rows test = read_csv(src.test_csv, train.width);
    append(b, test.values, test.labels, true, data);
  }
  finish(b, std::move(data), src.classes);
  return b;
}

}  // namespace

IdxArray parse_idx(std::span<const std::uint8_t> bytes, std::uint8_t expected_rank) {
  const std::uint32_t magic = be32(bytes, 0);
  if ((magic >> 16) != 0 || ((magic >> 8) & 0xFF) != 0x08) {
    throw FormatError(fmt::format("bad IDX magic 0x{:08x} (expected unsigned-byte data)", magic), 0);
  }
  const std::uint8_t rank = magic & 0xFF;
  if (rank != expected_rank) throw FormatError(fmt::format("IDX rank {} where {} was expected", rank, expected_rank), 3);
  IdxArray out;
  std::size_t total = 1;
  for (std::uint8_t d = 0; d < rank; ++d) {
    out.dims.push_back(be32(bytes, 4 + 4 * std::size_t{d}));
    total *= out.dims.back();
  }
  const std::size_t header = 4 + 4 * std::size_t{rank};
  if (bytes.size() - header != total) {
    throw FormatError(fmt::format("IDX payload is {} bytes, header implies {}", bytes.size() - header, total), header);
  }
  if (total == 0) throw FormatError("IDX file holds no samples", header);
  out.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
  return out;
}

DatasetBundle load_dataset(const DatasetSource& source) {
  switch (source.format) {
    case DatasetFormat::kIdx: return load_idx(source);
    case DatasetFormat::kCsv: return load_csv(source);
    case DatasetFormat::kSynth: return generate_synthetic(source.synth);
  }
  throw ConfigError("unknown dataset format");
}

DatasetBundle generate_synthetic(const SynthSpec& spec) {
  if (spec.classes < 2 || spec.dim == 0 || spec.per_class == 0 || spec.modes == 0) {
    throw ConfigError("synthetic data needs >= 2 classes and non-zero dim, samples, modes");
  }
  if (!(spec.separation >= 0.0) || !(spec.noise > 0.0)) throw ConfigError("synthetic separation/noise out of range");
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<std::vector<double>> centres(spec.classes * spec.modes, std::vector<double>(spec.dim));
  for (auto& c : centres) {
    double norm = 0.0;
    for (auto& v : c) {
      v = normal(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : c) v *= spec.separation / norm;
  }

  DatasetBundle b;
  b.classes = spec.classes;
  b.sample_shape = {spec.dim};
  std::vector<float> data;
  data.reserve(spec.classes * spec.per_class * spec.dim);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      const auto& centre = centres[c * spec.modes + i % spec.modes];
      for (std::size_t d = 0; d < spec.dim; ++d) data.push_back(static_cast<float>(centre[d] + spec.noise * normal(rng)));
      b.labels.push_back(static_cast<std::uint32_t>(c));
    }
  }
  b.inputs = Tensor({b.labels.size(), spec.dim}, std::move(data));
  normalize(b);
  return b;
}

void normalize(DatasetBundle& b) {
  const std::size_t n = b.size();
  if (n == 0) throw DataError("dataset is empty");
  const std::size_t channels = b.sample_shape.size() == 3 ? b.sample_shape[0] : 1;
  const std::size_t row = b.inputs.size() / n;
  const std::size_t per_channel = row / channels;
  std::vector<double> sum(channels, 0.0), sq(channels, 0.0);
  std::size_t used = 0;
  auto data = b.inputs.data();
  for (std::size_t i = 0; i < n; ++i) {
    if (!b.is_test.empty() && b.is_test[i]) continue;
    ++used;
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t k = 0; k < per_channel; ++k) {
        const double v = data[i * row + c * per_channel + k];
        sum[c] += v;
        sq[c] += v * v;
      }
    }
  }
  if (used == 0) throw DataError("dataset has no training samples");
  b.mean.assign(channels, 0.0f);
  b.stddev.assign(channels, 1.0f);
  const double count = static_cast<double>(used * per_channel);
  for (std::size_t c = 0; c < channels; ++c) {
    const double mean = sum[c] / count;
    const double var = std::max(0.0, sq[c] / count - mean * mean);
    b.mean[c] = static_cast<float>(mean);
    b.stddev[c] = var > 1e-12 ? static_cast<float>(std::sqrt(var)) : 1.0f;
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t k = 0; k < per_channel; ++k) {
        float& v = data[i * row + c * per_channel + k];
        v = (v - b.mean[c]) / b.stddev[c];
      }
}

void hflip(std::span<float> sample, const Shape& chw) {
  if (chw.size() != 3 || sample.size() != shape_size(chw)) throw DimensionError("hflip expects a [c,h,w] sample");
  const std::size_t w = chw[2];
  for (std::size_t r = 0; r < chw[0] * chw[1]; ++r) std::reverse(sample.begin() + static_cast<std::ptrdiff_t>(r * w),
                                                                  sample.begin() + static_cast<std::ptrdiff_t>((r + 1) * w));
}

}  // namespace tfm
