#include "tfm/masked_layers.hpp"

#include <algorithm>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "tfm/errors.hpp"

namespace tfm {

namespace {

enum class Combine { kOr, kAnd };

bool combine(Combine rule, std::uint8_t row, std::uint8_t col) {
  return rule == Combine::kOr ? (row || col) : (row && col);
}

const FnParams* lookup_fn(const std::map<TaskId, FnParams>& fn, bool enabled, TaskId task,
                          std::size_t width, std::uint32_t layer_id) {
  if (!enabled) return nullptr;
  auto it = fn.find(task);
  if (it == fn.end()) {
    throw LookupError(fmt::format("layer {}: task {} not registered (no FN parameters)", layer_id, task));
  }
  if (it->second.gamma.size() != width) {
    throw DimensionError(fmt::format("layer {}: FN parameters of task {} cover {} features, expected {}",
                                     layer_id, task, it->second.gamma.size(), width));
  }
  return &it->second;
}

// pre is [batch, width, spatial...]; per-feature stage applied over `spatial` positions.
Tensor activate(const Tensor& pre, std::size_t width, const FnParams* fn, const Mask& out_mask,
                const ForwardMode& mode, bool dropout_layer, LayerCache* cache) {
  const std::size_t batch = pre.dim(0);
  const std::size_t spatial = pre.size() / std::max<std::size_t>(1, batch * width);
  Tensor post(pre.shape());
  Tensor y(pre.shape());
  const bool use_dropout = mode.training && dropout_layer && mode.dropout_p > 0.0;
  if (use_dropout && mode.rng == nullptr) throw ContractError("dropout requested without an RNG");
  Tensor keep;
  if (use_dropout) keep = Tensor(pre.shape());
  const float scale = use_dropout ? static_cast<float>(1.0 / (1.0 - mode.dropout_p)) : 1.0f;

  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < width; ++i) {
      const std::size_t base = (b * width + i) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) {
        float v = 0.0f;
        if (out_mask[i]) {
          v = pre[base + s];
          if (fn != nullptr) v = fn->gamma[i] * v + fn->beta[i];
        }
        post[base + s] = v;
        float r = v > 0.0f ? v : 0.0f;
        if (use_dropout) {
          const float k = out_mask[i] && mode.rng->bernoulli(1.0 - mode.dropout_p) ? scale : 0.0f;
          keep[base + s] = k;
          r *= k;
        }
        y[base + s] = r;
      }
    }
  }
  require_finite(y, "masked layer forward");
  if (cache != nullptr && mode.training) {
    cache->pre = pre;
    cache->post = std::move(post);
    cache->keep = std::move(keep);
    cache->valid = true;
  }
  return y;
}

struct Deactivated {
  Tensor grad_pre;
  std::optional<FnGrads> fn;
};

Deactivated deactivate(const Tensor& grad_y, const LayerCache& cache, std::size_t width,
                       const FnParams* fn, TaskId task, const Mask& out_mask) {
  if (grad_y.shape() != cache.pre.shape()) {
    throw DimensionError(fmt::format("gradient shape {} does not match forward output {}",
                                     fmt::join(grad_y.shape(), "x"), fmt::join(cache.pre.shape(), "x")));
  }
  const std::size_t batch = grad_y.dim(0);
  const std::size_t spatial = grad_y.size() / std::max<std::size_t>(1, batch * width);
  Deactivated out{Tensor(grad_y.shape()), std::nullopt};
  Tensor d_gamma, d_beta;
  if (fn != nullptr) {
    d_gamma = Tensor({width});
    d_beta = Tensor({width});
  }
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < width; ++i) {
      if (!out_mask[i]) continue;
      const std::size_t base = (b * width + i) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) {
        float g = grad_y[base + s];
        if (!cache.keep.empty()) g *= cache.keep[base + s];
        if (!(cache.post[base + s] > 0.0f)) g = 0.0f;
        if (fn != nullptr) {
          d_gamma[i] += g * cache.pre[base + s];
          d_beta[i] += g;
          g *= fn->gamma[i];
        }
        out.grad_pre[base + s] = g;
      }
    }
  }
  if (fn != nullptr) out.fn = FnGrads{task, std::move(d_gamma), std::move(d_beta)};
  return out;
}

void check_mask_width(const Mask& mask, std::size_t expected, const char* name) {
  if (mask.size() != expected) {
    throw DimensionError(fmt::format("{} has {} entries, expected {}", name, mask.size(), expected));
  }
}

Tensor dense_pre(const MaskedDense& layer, const Tensor& x, std::size_t p, std::size_t q) {
  if (x.rank() != 2 || x.dim(1) != q) {
    throw DimensionError(fmt::format("dense layer {}: input {} does not have {} features", layer.layer_id,
                                     fmt::join(x.shape(), "x"), q));
  }
  if (p > layer.width() || q > layer.in_width()) {
    throw DimensionError(fmt::format("dense layer {}: mask block {}x{} exceeds weights {}x{}", layer.layer_id,
                                     p, q, layer.width(), layer.in_width()));
  }
  Tensor pre = matmul(x, transpose(block(layer.weight, p, q)));
  for (std::size_t b = 0; b < x.dim(0); ++b)
    for (std::size_t i = 0; i < p; ++i) pre(b, i) += layer.bias[i];
  return pre;
}

Tensor dense_forward(const MaskedDense& layer, const Tensor& x, const FnParams* fn, std::size_t q,
                     const Mask& out_mask, const ForwardMode& mode, LayerCache* cache) {
  const std::size_t p = out_mask.size();
  Tensor pre = dense_pre(layer, x, p, q);
  if (cache != nullptr && mode.training) cache->input = x;
  return activate(pre, p, fn, out_mask, mode, layer.dropout, cache);
}

BackwardResult dense_backward(const MaskedDense& layer, const Tensor& grad_y, TaskId task, const FnParams* fn,
                              const Mask& out_mask, const Mask& in_mask, const Mask& rows, const Mask& cols,
                              Combine rule, const LayerCache& cache) {
  if (!cache.valid) throw ContractError(fmt::format("dense layer {}: backward without a training forward", layer.layer_id));
  const std::size_t p = out_mask.size(), q = in_mask.size();
  check_mask_width(rows, p, "output ownership mask");
  check_mask_width(cols, q, "input ownership mask");
  if (cache.input.rank() != 2 || cache.input.dim(1) != q) throw DimensionError("cached input width mismatch");

  Deactivated d = deactivate(grad_y, cache, p, fn, task, out_mask);
  const Tensor& da = d.grad_pre;
  BackwardResult result;
  result.grads.fn = std::move(d.fn);

  Tensor dw = matmul(transpose(da), cache.input);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j)
      if (!combine(rule, rows[i], cols[j])) dw(i, j) = 0.0f;
  result.grads.weight = std::move(dw);

  Tensor db({p});
  for (std::size_t i = 0; i < p; ++i) {
    if (!rows[i]) continue;
    for (std::size_t b = 0; b < da.dim(0); ++b) db[i] += da(b, i);
  }
  result.grads.bias = std::move(db);

  Tensor dx = matmul(da, block(layer.weight, p, q));
  for (std::size_t b = 0; b < dx.dim(0); ++b)
    for (std::size_t j = 0; j < q; ++j)
      if (!in_mask[j]) dx(b, j) = 0.0f;
  result.grad_x = std::move(dx);
  return result;
}

Tensor kernel_block(const Tensor& kernels, std::size_t c_out, std::size_t c_in) {
  const std::size_t k = kernels.dim(2);
  if (c_out > kernels.dim(0) || c_in > kernels.dim(1)) {
    throw DimensionError(fmt::format("kernel block {}x{} exceeds {}x{}", c_out, c_in, kernels.dim(0), kernels.dim(1)));
  }
  Tensor out({c_out, c_in, k, k});
  for (std::size_t o = 0; o < c_out; ++o)
    for (std::size_t c = 0; c < c_in; ++c)
      for (std::size_t y = 0; y < k; ++y)
        for (std::size_t x = 0; x < k; ++x) out(o, c, y, x) = kernels(o, c, y, x);
  return out;
}

Tensor conv_forward(const MaskedConv& layer, const Tensor& x, const FnParams* fn, std::size_t c_in,
                    const Mask& out_mask, const ForwardMode& mode, LayerCache* cache) {
  if (x.rank() != 4 || x.dim(1) != c_in) {
    throw DimensionError(fmt::format("conv layer {}: input {} does not have {} channels", layer.layer_id,
                                     fmt::join(x.shape(), "x"), c_in));
  }
  const std::size_t c_out = out_mask.size();
  const Tensor k = kernel_block(layer.kernels, c_out, c_in);
  const std::size_t batch = x.dim(0);
  const std::size_t oh = conv_output_size(x.dim(2), layer.kernel_size(), layer.stride, layer.pad);
  const std::size_t ow = conv_output_size(x.dim(3), layer.kernel_size(), layer.stride, layer.pad);
  Tensor pre({batch, c_out, oh, ow});
  const std::size_t per_sample = c_out * oh * ow;
  for (std::size_t b = 0; b < batch; ++b) {
    Tensor out = conv2d(x.slice(b), k, layer.stride, layer.pad);
    for (std::size_t o = 0; o < c_out; ++o)
      for (std::size_t s = 0; s < oh * ow; ++s) out[o * oh * ow + s] += layer.bias[o];
    std::copy(out.data().begin(), out.data().end(),
              pre.data().begin() + static_cast<std::ptrdiff_t>(b * per_sample));
  }
  if (cache != nullptr && mode.training) cache->input = x;
  return activate(pre, c_out, fn, out_mask, mode, layer.dropout, cache);
}

BackwardResult conv_backward(const MaskedConv& layer, const Tensor& grad_y, TaskId task, const FnParams* fn,
                             const Mask& out_mask, const Mask& in_mask, const Mask& rows, const Mask& cols,
                             Combine rule, const LayerCache& cache) {
  if (!cache.valid) throw ContractError(fmt::format("conv layer {}: backward without a training forward", layer.layer_id));
  const std::size_t c_out = out_mask.size(), c_in = in_mask.size();
  check_mask_width(rows, c_out, "output ownership mask");
  check_mask_width(cols, c_in, "input ownership mask");
  const Tensor& x = cache.input;
  if (x.rank() != 4 || x.dim(1) != c_in) throw DimensionError("cached input channel mismatch");

  Deactivated d = deactivate(grad_y, cache, c_out, fn, task, out_mask);
  const Tensor& da = d.grad_pre;
  BackwardResult result;
  result.grads.fn = std::move(d.fn);

  const std::size_t kk = layer.kernel_size();
  const Tensor k = kernel_block(layer.kernels, c_out, c_in);
  Tensor dk({c_out, c_in, kk, kk});
  Tensor dx(x.shape());
  const std::size_t batch = x.dim(0), h = x.dim(2), w = x.dim(3);
  const std::size_t in_per_sample = c_in * h * w;
  for (std::size_t b = 0; b < batch; ++b) {
    const Tensor xb = x.slice(b);
    const Tensor gb = da.slice(b);
    conv2d_grad_kernels(xb, gb, layer.stride, layer.pad, dk);
    Tensor gx = conv2d_grad_input(gb, k, h, w, layer.stride, layer.pad);
    std::copy(gx.data().begin(), gx.data().end(),
              dx.data().begin() + static_cast<std::ptrdiff_t>(b * in_per_sample));
  }
  for (std::size_t o = 0; o < c_out; ++o)
    for (std::size_t c = 0; c < c_in; ++c)
      if (!combine(rule, rows[o], cols[c]))
        for (std::size_t y = 0; y < kk; ++y)
          for (std::size_t xx = 0; xx < kk; ++xx) dk(o, c, y, xx) = 0.0f;
  require_finite(dk, "conv backward");
  result.grads.weight = std::move(dk);

  Tensor db({c_out});
  const std::size_t spatial = da.dim(2) * da.dim(3);
  for (std::size_t o = 0; o < c_out; ++o) {
    if (!rows[o]) continue;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t s = 0; s < spatial; ++s) db[o] += da[(b * c_out + o) * spatial + s];
  }
  result.grads.bias = std::move(db);

  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < c_in; ++c)
      if (!in_mask[c])
        for (std::size_t s = 0; s < h * w; ++s) dx[(b * c_in + c) * h * w + s] = 0.0f;
  result.grad_x = std::move(dx);
  return result;
}

template <typename Layer>
void add_fn(Layer& layer, TaskId task) {
  if (layer.fn.contains(task)) {
    throw StateError(fmt::format("layer {}: FN parameters for task {} already exist", layer.layer_id, task));
  }
  layer.fn.emplace(task, FnParams{Tensor({layer.width()}, 1.0f), Tensor({layer.width()}, 0.0f)});
}

template <typename Layer>
void apply_fn(Layer& layer, const ParamGrads& grads, float lr) {
  if (!grads.fn) return;
  auto it = layer.fn.find(grads.fn->task);
  if (it == layer.fn.end()) throw LookupError("FN gradient for unregistered task");
  for (std::size_t i = 0; i < grads.fn->gamma.size(); ++i) {
    it->second.gamma[i] -= lr * grads.fn->gamma[i];
    it->second.beta[i] -= lr * grads.fn->beta[i];
  }
}

}  // namespace

void add_fn_params(MaskedDense& layer, TaskId task) { add_fn(layer, task); }
void add_fn_params(MaskedConv& layer, TaskId task) { add_fn(layer, task); }

Tensor forward_dense(const MaskedDense& layer, const Tensor& x, TaskId task, const Mask& n_in,
                     const Mask& n_out, const ForwardMode& mode, LayerCache* cache) {
  const FnParams* fn = lookup_fn(layer.fn, layer.fn_enabled, task, n_out.size(), layer.layer_id);
  return dense_forward(layer, x, fn, n_in.size(), n_out, mode, cache);
}

BackwardResult backward_dense(const MaskedDense& layer, const Tensor& grad_y, TaskId task, const Mask& m_out,
                              const Mask& m_in, const Mask& n_out, const Mask& n_in, const LayerCache& cache) {
  const FnParams* fn = lookup_fn(layer.fn, layer.fn_enabled, task, n_out.size(), layer.layer_id);
  return dense_backward(layer, grad_y, task, fn, n_out, n_in, m_out, m_in, Combine::kOr, cache);
}

Tensor forward_conv(const MaskedConv& layer, const Tensor& x, TaskId task, const Mask& n_in, const Mask& n_out,
                    const ForwardMode& mode, LayerCache* cache) {
  const FnParams* fn = lookup_fn(layer.fn, layer.fn_enabled, task, n_out.size(), layer.layer_id);
  return conv_forward(layer, x, fn, n_in.size(), n_out, mode, cache);
}

BackwardResult backward_conv(const MaskedConv& layer, const Tensor& grad_y, TaskId task, const Mask& m_out,
                             const Mask& m_in, const Mask& n_out, const Mask& n_in, const LayerCache& cache) {
  const FnParams* fn = lookup_fn(layer.fn, layer.fn_enabled, task, n_out.size(), layer.layer_id);
  return conv_backward(layer, grad_y, task, fn, n_out, n_in, m_out, m_in, Combine::kOr, cache);
}

Tensor forward_binary(const MaskedDense& layer, const Tensor& x, const Mask& m_in, const Mask& m_out,
                      const ForwardMode& mode, LayerCache* cache) {
  return dense_forward(layer, x, nullptr, m_in.size(), m_out, mode, cache);
}

BackwardResult backward_binary(const MaskedDense& layer, const Tensor& grad_y, const Mask& m_out,
                               const Mask& m_in, const LayerCache& cache) {
  return dense_backward(layer, grad_y, 0, nullptr, m_out, m_in, m_out, m_in, Combine::kAnd, cache);
}

Tensor forward_binary(const MaskedConv& layer, const Tensor& x, const Mask& m_in, const Mask& m_out,
                      const ForwardMode& mode, LayerCache* cache) {
  return conv_forward(layer, x, nullptr, m_in.size(), m_out, mode, cache);
}

BackwardResult backward_binary(const MaskedConv& layer, const Tensor& grad_y, const Mask& m_out,
                               const Mask& m_in, const LayerCache& cache) {
  return conv_backward(layer, grad_y, 0, nullptr, m_out, m_in, m_out, m_in, Combine::kAnd, cache);
}

void apply_sgd(MaskedDense& layer, const ParamGrads& grads, float lr) {
  const std::size_t p = grads.weight.dim(0), q = grads.weight.dim(1);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) layer.weight(i, j) -= lr * grads.weight(i, j);
  for (std::size_t i = 0; i < p; ++i) layer.bias[i] -= lr * grads.bias[i];
  apply_fn(layer, grads, lr);
}

void apply_sgd(MaskedConv& layer, const ParamGrads& grads, float lr) {
  const std::size_t c_out = grads.weight.dim(0), c_in = grads.weight.dim(1), k = grads.weight.dim(2);
  for (std::size_t o = 0; o < c_out; ++o)
    for (std::size_t c = 0; c < c_in; ++c)
      for (std::size_t y = 0; y < k; ++y)
        for (std::size_t x = 0; x < k; ++x) layer.kernels(o, c, y, x) -= lr * grads.weight(o, c, y, x);
  for (std::size_t o = 0; o < c_out; ++o) layer.bias[o] -= lr * grads.bias[o];
  apply_fn(layer, grads, lr);
}

Tensor maxpool_forward(const MaxPool& pool, const Tensor& x, PoolCache* cache) {
  if (x.rank() != 4) throw DimensionError("maxpool expects [batch, channels, h, w]");
  const std::size_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = conv_output_size(h, pool.kernel, pool.stride, 0);
  const std::size_t ow = conv_output_size(w, pool.kernel, pool.stride, 0);
  Tensor y({batch, c, oh, ow});
  std::vector<std::uint32_t> argmax(y.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          std::size_t best = ((b * c + ch) * h + oy * pool.stride) * w + ox * pool.stride;
          for (std::size_t ky = 0; ky < pool.kernel; ++ky)
            for (std::size_t kx = 0; kx < pool.kernel; ++kx) {
              const std::size_t idx = ((b * c + ch) * h + oy * pool.stride + ky) * w + ox * pool.stride + kx;
              if (x[idx] > x[best]) best = idx;
            }
          const std::size_t out = ((b * c + ch) * oh + oy) * ow + ox;
          y[out] = x[best];
          argmax[out] = static_cast<std::uint32_t>(best);
        }
  if (cache != nullptr) {
    cache->input_shape = x.shape();
    cache->argmax = std::move(argmax);
  }
  return y;
}

Tensor maxpool_backward(const MaxPool&, const Tensor& grad_y, const PoolCache& cache) {
  if (cache.argmax.size() != grad_y.size()) throw ContractError("maxpool backward without matching forward");
  Tensor dx(cache.input_shape);
  for (std::size_t i = 0; i < grad_y.size(); ++i) dx[cache.argmax[i]] += grad_y[i];
  return dx;
}

Tensor head_forward(const TaskHead& head, const Tensor& features) {
  if (features.rank() != 2 || features.dim(1) != head.in_width()) {
    throw DimensionError(fmt::format("head {}: expected {} features, got {}", head.task, head.in_width(),
                                     fmt::join(features.shape(), "x")));
  }
  Tensor logits = matmul(features, transpose(head.weight));
  for (std::size_t b = 0; b < logits.dim(0); ++b)
    for (std::size_t c = 0; c < head.classes(); ++c) logits(b, c) += head.bias[c];
  return logits;
}

HeadBackward head_backward(const TaskHead& head, const Tensor& features, const Tensor& grad_logits) {
  HeadBackward out;
  out.grad_features = matmul(grad_logits, head.weight);
  out.weight = matmul(transpose(grad_logits), features);
  out.bias = Tensor({head.classes()});
  for (std::size_t b = 0; b < grad_logits.dim(0); ++b)
    for (std::size_t c = 0; c < head.classes(); ++c) out.bias[c] += grad_logits(b, c);
  return out;
}

void apply_sgd(TaskHead& head, const HeadBackward& grads, float lr) {
  for (std::size_t i = 0; i < head.weight.size(); ++i) head.weight[i] -= lr * grads.weight[i];
  for (std::size_t i = 0; i < head.bias.size(); ++i) head.bias[i] -= lr * grads.bias[i];
}

std::vector<int> gradient_mask_general(const Mask& n_out, const Mask& n_in, const Mask& n_prev_out,
                                       const Mask& n_prev_in) {
  const Mask prev_out = pad(n_prev_out, n_out.size());
  const Mask prev_in = pad(n_prev_in, n_in.size());
  std::vector<int> mask(n_out.size() * n_in.size());
  for (std::size_t i = 0; i < n_out.size(); ++i)
    for (std::size_t j = 0; j < n_in.size(); ++j)
      mask[i * n_in.size() + j] = n_in[j] * n_out[i] - prev_in[j] * prev_out[i];
  return mask;
}

std::vector<int> gradient_mask_task_il(const Mask& m_out, const Mask& m_in) {
  std::vector<int> mask(m_out.size() * m_in.size());
  for (std::size_t i = 0; i < m_out.size(); ++i)
    for (std::size_t j = 0; j < m_in.size(); ++j) mask[i * m_in.size() + j] = (m_out[i] || m_in[j]) ? 1 : 0;
  return mask;
}

std::vector<int> gradient_mask_binary(const Mask& m_out, const Mask& m_in) {
  std::vector<int> mask(m_out.size() * m_in.size());
  for (std::size_t i = 0; i < m_out.size(); ++i)
    for (std::size_t j = 0; j < m_in.size(); ++j) mask[i * m_in.size() + j] = (m_out[i] && m_in[j]) ? 1 : 0;
  return mask;
}

}  // namespace tfm
