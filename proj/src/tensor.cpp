#include "tfm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <string>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "tfm/errors.hpp"

namespace tfm {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw DimensionError(fmt::format("shape {} holds {} values, got {}", shape_, shape_size(shape_),
                                     data_.size()));
  }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<float>> rows) {
  const std::size_t cols = rows.size() == 0 ? 0 : rows.begin()->size();
  std::vector<float> data;
  data.reserve(rows.size() * cols);
  for (const auto& row : rows) {
    if (row.size() != cols) throw DimensionError("ragged rows in Tensor::matrix");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({rows.size(), cols}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<float> values) {
  return Tensor({values.size()}, std::vector<float>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError(fmt::format("axis {} out of range for rank {}", axis, shape_.size()));
  }
  return shape_[axis];
}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  if (shape_size(shape) != data_.size()) {
    throw DimensionError(fmt::format("cannot reshape {} to {}", shape_, shape));
  }
  shape_ = std::move(shape);
  return std::move(*this);
}

Tensor Tensor::slice(std::size_t i) const {
  if (shape_.empty() || i >= shape_[0]) throw DimensionError("slice index out of range");
  Shape inner(shape_.begin() + 1, shape_.end());
  const std::size_t n = shape_size(inner);
  return Tensor(std::move(inner),
                std::vector<float>(data_.begin() + static_cast<std::ptrdiff_t>(i * n),
                                   data_.begin() + static_cast<std::ptrdiff_t>((i + 1) * n)));
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         (a.size() == 0 || std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)) == 0);
}

void require_finite(const Tensor& t, const char* where) {
  if (!t.all_finite()) throw NumericError(std::string("non-finite value in ") + where);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError(fmt::format("matmul: incompatible shapes {} x {}", a.shape(), b.shape()));
  }
  const std::size_t p = a.dim(0), q = a.dim(1), r = b.dim(1);
  Tensor out({p, r});
  const float* ad = a.data().data();
  const float* bd = b.data().data();
  float* od = out.data().data();
  for (std::size_t i = 0; i < p; ++i) {
    float* orow = od + i * r;
    for (std::size_t k = 0; k < q; ++k) {
      const float aik = ad[i * q + k];
      const float* brow = bd + k * r;
      for (std::size_t j = 0; j < r; ++j) orow[j] += aik * brow[j];
    }
  }
  require_finite(out, "matmul");
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects a 2-D tensor");
  const std::size_t p = a.dim(0), q = a.dim(1);
  Tensor out({q, p});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) out(j, i) = a(i, j);
  return out;
}

Tensor block(const Tensor& a, std::size_t rows, std::size_t cols) {
  if (a.rank() != 2 || rows > a.dim(0) || cols > a.dim(1)) {
    throw DimensionError(fmt::format("block {}x{} out of range for {}", rows, cols, a.shape()));
  }
  Tensor out({rows, cols});
  for (std::size_t i = 0; i < rows; ++i)
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(i * a.dim(1)), cols,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * cols));
  return out;
}

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw DimensionError("conv stride must be >= 1");
  if (kernel == 0 || kernel > in + 2 * pad) {
    throw DimensionError(fmt::format("kernel {} does not fit input {} with pad {}", kernel, in, pad));
  }
  return (in + 2 * pad - kernel) / stride + 1;
}

namespace {

void check_conv_shapes(const Tensor& input, const Tensor& kernels) {
  if (input.rank() != 3 || kernels.rank() != 4 || kernels.dim(1) != input.dim(0) ||
      kernels.dim(2) != kernels.dim(3)) {
    throw DimensionError(
        fmt::format("conv2d: input {} incompatible with kernels {}", input.shape(), kernels.shape()));
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride, std::size_t pad) {
  check_conv_shapes(input, kernels);
  const std::size_t c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t c_out = kernels.dim(0), k = kernels.dim(2);
  const std::size_t oh = conv_output_size(h, k, stride, pad);
  const std::size_t ow = conv_output_size(w, k, stride, pad);
  Tensor out({c_out, oh, ow});
  for (std::size_t o = 0; o < c_out; ++o) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        float acc = 0.0f;
        for (std::size_t c = 0; c < c_in; ++c) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              acc += input(c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) * kernels(o, c, ky, kx);
            }
          }
        }
        out(o, y, x) = acc;
      }
    }
  }
  require_finite(out, "conv2d");
  return out;
}

Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& kernels, std::size_t in_h,
                         std::size_t in_w, std::size_t stride, std::size_t pad) {
  const std::size_t c_out = kernels.dim(0), c_in = kernels.dim(1), k = kernels.dim(2);
  const std::size_t oh = conv_output_size(in_h, k, stride, pad);
  const std::size_t ow = conv_output_size(in_w, k, stride, pad);
  if (grad_out.rank() != 3 || grad_out.dim(0) != c_out || grad_out.dim(1) != oh || grad_out.dim(2) != ow) {
    throw DimensionError("conv2d_grad_input: gradient shape mismatch");
  }
  Tensor grad_in({c_in, in_h, in_w});
  for (std::size_t o = 0; o < c_out; ++o) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const float g = grad_out(o, y, x);
        if (g == 0.0f) continue;
        for (std::size_t c = 0; c < c_in; ++c) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in_h)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in_w)) continue;
              grad_in(c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) += g * kernels(o, c, ky, kx);
            }
          }
        }
      }
    }
  }
  return grad_in;
}

void conv2d_grad_kernels(const Tensor& input, const Tensor& grad_out, std::size_t stride,
                         std::size_t pad, Tensor& grad_kernels) {
  check_conv_shapes(input, grad_kernels);
  const std::size_t c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t c_out = grad_kernels.dim(0), k = grad_kernels.dim(2);
  const std::size_t oh = conv_output_size(h, k, stride, pad);
  const std::size_t ow = conv_output_size(w, k, stride, pad);
  if (grad_out.rank() != 3 || grad_out.dim(0) != c_out || grad_out.dim(1) != oh || grad_out.dim(2) != ow) {
    throw DimensionError("conv2d_grad_kernels: gradient shape mismatch");
  }
  for (std::size_t o = 0; o < c_out; ++o) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const float g = grad_out(o, y, x);
        if (g == 0.0f) continue;
        for (std::size_t c = 0; c < c_in; ++c) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              grad_kernels(o, c, ky, kx) += g * input(c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
            }
          }
        }
      }
    }
  }
}

RngSeed derive_seed(RngSeed base, std::uint64_t stream) {
  // splitmix64 finalizer over the combined value
  std::uint64_t z = base.value + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return RngSeed{z ^ (z >> 31)};
}

double Rng::uniform(double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(engine_);
}

bool Rng::bernoulli(double p) { return std::bernoulli_distribution(p)(engine_); }

Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  if (fan_in == 0) throw DimensionError("init_uniform: fan_in must be >= 1");
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor out(std::move(shape));
  for (float& v : out.data()) v = static_cast<float>(rng.uniform(-bound, bound));
  return out;
}

Tensor init_uniform(Shape shape, std::size_t fan_in, RngSeed seed) {
  Rng rng(seed);
  return init_uniform(std::move(shape), fan_in, rng);
}

}  // namespace tfm
