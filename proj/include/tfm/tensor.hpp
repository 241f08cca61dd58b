#pragma once

// Dense float32 arrays and the handful of kernels the rest of the library
// computes with. Row-major, contiguous, value semantics.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

namespace tfm {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  /// Builds a 2-D tensor from nested rows. Rows must have equal length.
  static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows);
  static Tensor vector(std::initializer_list<float> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  float& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  float operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  float& operator()(std::size_t c, std::size_t i, std::size_t j) {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }
  float operator()(std::size_t c, std::size_t i, std::size_t j) const {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }
  float& operator()(std::size_t n, std::size_t c, std::size_t i, std::size_t j) {
    return data_[((n * shape_[1] + c) * shape_[2] + i) * shape_[3] + j];
  }
  float operator()(std::size_t n, std::size_t c, std::size_t i, std::size_t j) const {
    return data_[((n * shape_[1] + c) * shape_[2] + i) * shape_[3] + j];
  }

  /// Same data, new shape. Element counts must match.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  /// Copy of row `i` of the leading axis (shape = trailing axes).
  Tensor slice(std::size_t i) const;

  bool all_finite() const noexcept;

 private:
  Shape shape_;
  std::vector<float> data_;
};

/// Byte-level equality of shape and data (distinguishes -0.0 from 0.0).
bool bit_equal(const Tensor& a, const Tensor& b);

/// Throws NumericError naming `where` if any entry is NaN or Inf.
void require_finite(const Tensor& t, const char* where);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Top-left `rows x cols` block of a 2-D tensor.
Tensor block(const Tensor& a, std::size_t rows, std::size_t cols);

/// Cross-correlation of one [c_in, h, w] input with [c_out, c_in, k, k] kernels.
Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride, std::size_t pad);

/// Gradient of conv2d with respect to its input, given the output gradient.
Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& kernels, std::size_t in_h,
                         std::size_t in_w, std::size_t stride, std::size_t pad);

/// Gradient of conv2d with respect to its kernels; accumulates into `grad_kernels`.
void conv2d_grad_kernels(const Tensor& input, const Tensor& grad_out, std::size_t stride,
                         std::size_t pad, Tensor& grad_kernels);

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                             std::size_t pad);

struct RngSeed {
  std::uint64_t value = 0;
  bool operator==(const RngSeed&) const = default;
};

/// Mixes a base seed with a stream index so that sub-streams are decorrelated.
RngSeed derive_seed(RngSeed base, std::uint64_t stream);

class Rng {
 public:
  explicit Rng(RngSeed seed) : engine_(seed.value) {}

  double uniform(double lo, double hi);
  bool bernoulli(double p);
  std::mt19937_64& engine() noexcept { return engine_; }
  const std::mt19937_64& engine() const noexcept { return engine_; }

 private:
  std::mt19937_64 engine_;
};

/// Entries i.i.d. uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng);
Tensor init_uniform(Shape shape, std::size_t fan_in, RngSeed seed);

}  // namespace tfm
