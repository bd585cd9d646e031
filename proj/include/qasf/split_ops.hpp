#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "qasf/boundary.hpp"
#include "qasf/network.hpp"
#include "qasf/split_model.hpp"

namespace qasf::split {

// Per-part forward/backward across the split. Each consumer validates the
// payload of the message it receives against the partition's boundary shapes
// and throws ProtocolError on a mismatch.

struct FeForward {
  BoundaryMessage message;  // fe_activations
  nn::ForwardCache cache;
};

struct ServerForward {
  BoundaryMessage message;  // server_activations
  nn::ForwardCache cache;
};

struct BeForward {
  double loss = 0.0;
  std::vector<double> per_sample_loss;
  std::vector<std::uint8_t> prediction;
  nn::Tensor logits;
  nn::Tensor logit_gradient;
  nn::ForwardCache cache;
};

struct PartGradients {
  nn::ParamVector params;
  BoundaryMessage message;  // be_gradients / server_gradients; unused for FE
};

FeForward client_forward_fe(const SplitPartition& partition, const nn::ParamVector& fe_params,
                            const nn::Tensor& input, const Round& round);

ServerForward server_forward(const SplitPartition& partition,
                             const nn::ParamVector& server_params, const BoundaryMessage& msg);

// `labels` holds N*H*W class ids; throws ConfigError when the logits carry a
// different class count than the partition declares.
BeForward client_forward_be(const SplitPartition& partition, const nn::ParamVector& be_params,
                            const BoundaryMessage& msg, std::span<const std::uint8_t> labels);

PartGradients client_backward_be(const SplitPartition& partition, const nn::ParamVector& be_params,
                                 const BeForward& forward, const Round& round);

PartGradients server_backward(const SplitPartition& partition, const nn::ParamVector& server_params,
                              const nn::ForwardCache& cache, const BoundaryMessage& msg);

nn::ParamVector client_backward_fe(const SplitPartition& partition,
                                   const nn::ParamVector& fe_params, const nn::ForwardCache& cache,
                                   const BoundaryMessage& msg);

}  // namespace qasf::split
