#pragma once

// Dense and convolutional layers with ternary-feature-masked forward and
// backward passes, task-specific feature normalization (FN), and task heads.
//
// Per layer, in order: linear -> bias -> FN (gamma_t * a + beta_t) -> n-mask
// -> ReLU -> dropout (training only). A layer only ever reads the top-left
// block of its weights that matches the mask widths it is given, so outputs
// for an old task never touch parameters grown after it.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "tfm/mask_store.hpp"
#include "tfm/tensor.hpp"

namespace tfm {

struct FnParams {
  Tensor gamma;
  Tensor beta;
};

struct MaskedDense {
  std::uint32_t layer_id = 0;
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]
  std::map<TaskId, FnParams> fn;
  bool fn_enabled = true;
  bool dropout = true;

  std::size_t width() const { return weight.dim(0); }
  std::size_t in_width() const { return weight.dim(1); }
};

struct MaskedConv {
  std::uint32_t layer_id = 0;
  Tensor kernels;  // [c_out, c_in, k, k]
  Tensor bias;     // [c_out]
  std::map<TaskId, FnParams> fn;
  bool fn_enabled = true;
  bool dropout = false;
  std::size_t stride = 1;
  std::size_t pad = 0;

  std::size_t width() const { return kernels.dim(0); }
  std::size_t in_width() const { return kernels.dim(1); }
  std::size_t kernel_size() const { return kernels.dim(2); }
};

struct MaxPool {
  std::size_t kernel = 2;
  std::size_t stride = 2;
};

struct TaskHead {
  TaskId task = 0;
  Tensor weight;  // [classes, features]
  Tensor bias;    // [classes]

  std::size_t classes() const { return weight.dim(0); }
  std::size_t in_width() const { return weight.dim(1); }
};

struct ForwardMode {
  bool training = false;
  double dropout_p = 0.0;
  Rng* rng = nullptr;
};

/// Values kept from a training-mode forward pass for the matching backward.
struct LayerCache {
  Tensor input;
  Tensor pre;   // linear + bias
  Tensor post;  // after FN and n-mask, before ReLU
  Tensor keep;  // dropout multipliers (0 or 1/(1-p)); empty when dropout is off
  bool valid = false;
};

struct FnGrads {
  TaskId task = 0;
  Tensor gamma;
  Tensor beta;
};

/// Gradients for the parameter block a backward pass touched.
/// `weight` has the shape of the block that was read, not of the full tensor.
struct ParamGrads {
  Tensor weight;
  Tensor bias;
  std::optional<FnGrads> fn;
};

struct BackwardResult {
  Tensor grad_x;
  ParamGrads grads;
};

/// Adds gamma = 1, beta = 0 for `task` over the layer's current width.
void add_fn_params(MaskedDense& layer, TaskId task);
void add_fn_params(MaskedConv& layer, TaskId task);

// Ternary masking. x has width n_in.size(); the output has width n_out.size().
Tensor forward_dense(const MaskedDense& layer, const Tensor& x, TaskId task, const Mask& n_in,
                     const Mask& n_out, const ForwardMode& mode, LayerCache* cache = nullptr);
/// dL/dW_ij is kept iff (m_out_i OR m_in_j); bias_i iff m_out_i; grad_x masked by n_in.
BackwardResult backward_dense(const MaskedDense& layer, const Tensor& grad_y, TaskId task,
                              const Mask& m_out, const Mask& m_in, const Mask& n_out,
                              const Mask& n_in, const LayerCache& cache);

Tensor forward_conv(const MaskedConv& layer, const Tensor& x, TaskId task, const Mask& n_in,
                    const Mask& n_out, const ForwardMode& mode, LayerCache* cache = nullptr);
BackwardResult backward_conv(const MaskedConv& layer, const Tensor& grad_y, TaskId task,
                             const Mask& m_out, const Mask& m_in, const Mask& n_out,
                             const Mask& n_in, const LayerCache& cache);

// Binary masking: one disjoint mask per task, no FN. dL/dW_ij kept iff (m_out_i AND m_in_j).
Tensor forward_binary(const MaskedDense& layer, const Tensor& x, const Mask& m_in, const Mask& m_out,
                      const ForwardMode& mode, LayerCache* cache = nullptr);
BackwardResult backward_binary(const MaskedDense& layer, const Tensor& grad_y, const Mask& m_out,
                               const Mask& m_in, const LayerCache& cache);
Tensor forward_binary(const MaskedConv& layer, const Tensor& x, const Mask& m_in, const Mask& m_out,
                      const ForwardMode& mode, LayerCache* cache = nullptr);
BackwardResult backward_binary(const MaskedConv& layer, const Tensor& grad_y, const Mask& m_out,
                               const Mask& m_in, const LayerCache& cache);

/// Plain SGD on the touched block: param -= lr * grad.
void apply_sgd(MaskedDense& layer, const ParamGrads& grads, float lr);
void apply_sgd(MaskedConv& layer, const ParamGrads& grads, float lr);

struct PoolCache {
  Shape input_shape;
  std::vector<std::uint32_t> argmax;
};

Tensor maxpool_forward(const MaxPool& pool, const Tensor& x, PoolCache* cache = nullptr);
Tensor maxpool_backward(const MaxPool& pool, const Tensor& grad_y, const PoolCache& cache);

Tensor head_forward(const TaskHead& head, const Tensor& features);

struct HeadBackward {
  Tensor grad_features;
  Tensor weight;
  Tensor bias;
};

HeadBackward head_backward(const TaskHead& head, const Tensor& features, const Tensor& grad_logits);
void apply_sgd(TaskHead& head, const HeadBackward& grads, float lr);

/// Weight-gradient masks, row-major [out x in], entries 0/1.
/// General form: n_t_in[j]*n_t_out[i] - n_prev_in[j]*n_prev_out[i], with the
/// previous-task masks zero-padded to the current widths.
std::vector<int> gradient_mask_general(const Mask& n_out, const Mask& n_in, const Mask& n_prev_out,
                                       const Mask& n_prev_in);
/// Non-revisiting form: m_out[i] OR m_in[j].
std::vector<int> gradient_mask_task_il(const Mask& m_out, const Mask& m_in);
/// Binary-mask form: m_out[i] AND m_in[j].
std::vector<int> gradient_mask_binary(const Mask& m_out, const Mask& m_in);

}  // namespace tfm
