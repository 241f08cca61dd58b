#pragma once

#include <cstddef>
#include <span>

#include "tfm/tensor.hpp"

namespace tfm {

struct CrossEntropy {
  double loss = 0.0;
  Tensor grad_logits;  // softmax(logits) - onehot(label)
};

/// -log softmax(logits)[label], computed with max-subtraction.
CrossEntropy cross_entropy(std::span<const float> logits, std::size_t label);

}  // namespace tfm
