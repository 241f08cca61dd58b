#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "tfm/binary_io.hpp"
#include "tfm/dataset.hpp"
#include "tfm/errors.hpp"

using namespace tfm;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() : path_(fs::temp_directory_path() / fs::path("tfm_dataset_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
                                                          ::testing::UnitTest::GetInstance()->current_test_info()->name())) {
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

std::vector<std::uint8_t> idx_bytes(std::uint8_t rank, std::vector<std::uint32_t> dims, std::vector<std::uint8_t> payload) {
  std::vector<std::uint8_t> b{0, 0, 0x08, rank};
  for (auto d : dims) {
    b.push_back(std::uint8_t(d >> 24));
    b.push_back(std::uint8_t(d >> 16));
    b.push_back(std::uint8_t(d >> 8));
    b.push_back(std::uint8_t(d));
  }
  b.insert(b.end(), payload.begin(), payload.end());
  return b;
}

}  // namespace

TEST(Synthetic, DeterministicUnderSeed) {
  SynthSpec s;
  s.per_class = 50;
  s.seed = 42;
  const auto a = generate_synthetic(s), b = generate_synthetic(s);
  EXPECT_TRUE(bit_equal(a.inputs, b.inputs));
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.size(), 500u);
  EXPECT_EQ(a.sample_shape, (Shape{64}));
  s.seed = 43;
  EXPECT_FALSE(bit_equal(a.inputs, generate_synthetic(s).inputs));
}

TEST(Synthetic, NormalizedAndLabelled) {
  SynthSpec s;
  s.classes = 4;
  s.per_class = 100;
  const auto d = generate_synthetic(s);
  double sum = 0.0, sq = 0.0;
  for (float v : d.inputs.data()) {
    sum += v;
    sq += double(v) * v;
  }
  const double n = double(d.inputs.size());
  EXPECT_NEAR(sum / n, 0.0, 1e-4);
  EXPECT_NEAR(sq / n, 1.0, 1e-3);
  for (auto l : d.labels) EXPECT_LT(l, 4u);
  s.classes = 1;
  EXPECT_THROW(generate_synthetic(s), ConfigError);
}

TEST(Idx, ParsesBigEndianHeader) {
  const auto arr = parse_idx(idx_bytes(3, {2, 1, 3}, {1, 2, 3, 4, 5, 6}), 3);
  EXPECT_EQ(arr.dims, (std::vector<std::size_t>{2, 1, 3}));
  EXPECT_EQ(arr.data.size(), 6u);
}

TEST(Idx, WrongMagicRejected) {
  auto b = idx_bytes(1, {2}, {0, 1});
  b[2] = 0x0D;
  EXPECT_THROW(parse_idx(b, 1), FormatError);
  b = idx_bytes(1, {2}, {0, 1});
  b[0] = 1;
  EXPECT_THROW(parse_idx(b, 1), FormatError);
}

TEST(Idx, TruncationReportsOffset) {
  try {
    parse_idx(idx_bytes(3, {2, 2, 2}, {1, 2, 3}), 3);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 16u);
  }
  EXPECT_THROW(parse_idx(idx_bytes(1, {2}, {0, 1}), 3), FormatError);
  EXPECT_THROW(parse_idx(std::vector<std::uint8_t>{0, 0}, 1), FormatError);
}

TEST(Idx, LoadsImageLabelPairs) {
  TempDir dir;
  write_file_bytes(dir / "img", idx_bytes(3, {3, 2, 2}, {0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110}));
  write_file_bytes(dir / "lbl", idx_bytes(1, {3}, {0, 1, 2}));
  DatasetSource src;
  src.format = DatasetFormat::kIdx;
  src.images = dir / "img";
  src.labels = dir / "lbl";
  const auto d = load_dataset(src);
  EXPECT_EQ(d.classes, 3u);
  EXPECT_EQ(d.sample_shape, (Shape{1, 2, 2}));
  EXPECT_EQ(d.inputs.shape(), (Shape{3, 1, 2, 2}));
  write_file_bytes(dir / "lbl", idx_bytes(1, {2}, {0, 1}));
  EXPECT_THROW(load_dataset(src), DataError);
  src.classes = 2;
  write_file_bytes(dir / "lbl", idx_bytes(1, {3}, {0, 1, 2}));
  EXPECT_THROW(load_dataset(src), FormatError);
}

TEST(Csv, LabelThenValues) {
  TempDir dir;
  {
    std::ofstream out(dir / "a.csv");
    out << "label";
    for (int i = 0; i < 784; ++i) out << ",p" << i;
    out << "\n";
    for (int r = 0; r < 3; ++r) {
      out << r;
      for (int i = 0; i < 784; ++i) out << "," << (i + r) % 7;
      out << "\n";
    }
  }
  DatasetSource src;
  src.format = DatasetFormat::kCsv;
  src.csv = dir / "a.csv";
  const auto d = load_dataset(src);
  EXPECT_EQ(d.sample_shape, (Shape{784}));
  EXPECT_EQ(d.size(), 3u);
  EXPECT_EQ(d.labels, (std::vector<std::uint32_t>{0, 1, 2}));
}

TEST(Csv, RowLengthMismatchNamesTheLine) {
  TempDir dir;
  std::ofstream(dir / "b.csv") << "0,1,2\n1,3,4\n1,5\n";
  DatasetSource src;
  src.format = DatasetFormat::kCsv;
  src.csv = dir / "b.csv";
  try {
    load_dataset(src);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 3u);
  }
  std::ofstream(dir / "b.csv") << "0,1,2\n-1,3,4\n";
  EXPECT_THROW(load_dataset(src), FormatError);
  src.csv = dir / "missing.csv";
  EXPECT_THROW(load_dataset(src), DataError);
}

TEST(Normalize, PerChannelFromNonTestSamples) {
  DatasetBundle b;
  b.sample_shape = {2, 1, 1};
  b.inputs = Tensor({3, 2, 1, 1}, std::vector<float>{1, 10, 3, 30, 100, 1000});
  b.labels = {0, 1, 0};
  b.is_test = {0, 0, 1};
  b.classes = 2;
  normalize(b);
  EXPECT_FLOAT_EQ(b.mean[0], 2.0f);
  EXPECT_FLOAT_EQ(b.mean[1], 20.0f);
  EXPECT_FLOAT_EQ(b.inputs[0], -1.0f);
  EXPECT_FLOAT_EQ(b.inputs[2], 1.0f);
  EXPECT_FLOAT_EQ(b.inputs[4], 98.0f);
}

TEST(Hflip, MirrorsAndIsInvolution) {
  std::vector<float> s{1, 2, 3, 4, 5, 6};
  hflip(s, {1, 2, 3});
  EXPECT_EQ(s, (std::vector<float>{3, 2, 1, 6, 5, 4}));
  hflip(s, {1, 2, 3});
  EXPECT_EQ(s, (std::vector<float>{1, 2, 3, 4, 5, 6}));
  EXPECT_THROW(hflip(s, {6}), DimensionError);
}
