#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "qasf/tensor.hpp"

namespace qasf::nn {

struct LossResult {
  double loss = 0.0;                // mean over all pixels of the batch
  std::vector<double> per_sample;  // mean over each sample's pixels
  Tensor logit_gradient;            // d(loss)/d(logits)
};

/// Pixel-wise softmax cross-entropy. `logits` is (N, C, H, W); `labels` holds
/// N*H*W class ids in [0, C). Throws DataError on an out-of-range label.
LossResult cross_entropy_loss(const Tensor& logits, std::span<const std::uint8_t> labels);

// Loss values only, no gradient.
std::vector<double> per_sample_cross_entropy(const Tensor& logits,
                                             std::span<const std::uint8_t> labels);

// Per-pixel argmax over channels; ties go to the lowest class index.
std::vector<std::uint8_t> argmax_classes(const Tensor& logits);

}  // namespace qasf::nn
