#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "qasf/network.hpp"

namespace qasf::split {

/// A segmentation network cut into a client front-end (FE), a server trunk
/// and a client back-end (BE). Skip routes index the concatenation
/// fe ‖ server ‖ be.
struct SplitPartition {
  nn::Shape input_shape;  // per-sample (C, H, W)
  std::vector<nn::LayerSpec> fe;
  std::vector<nn::LayerSpec> server;
  std::vector<nn::LayerSpec> be;
  std::vector<nn::SkipRoute> skips;

  std::size_t fe_end() const { return fe.size(); }
  std::size_t server_end() const { return fe.size() + server.size(); }
  std::size_t layer_count() const { return fe.size() + server.size() + be.size(); }
};

struct ArchConfig {
  std::size_t in_channels = 1;
  int classes = 5;
  std::vector<int> down_filters{8, 16};  // up path mirrors this in reverse
  int bottleneck_filters = 16;
  int convs_per_block = 1;
  int kernel = 3;
  bool batchnorm = true;
  bool skip_connections = true;
};

/// Builds a U-Net: per down block `convs_per_block` x (conv, [bn], relu) and a
/// 2x2 max-pool; a bottleneck; per up block a 2x2 upsample, then the convs,
/// the first of which receives the mirrored down block's output as a skip.
/// A 1x1 conv produces class logits, followed by the argmax output layer.
///
/// FE is the first conv unit. BE holds the last two conv layers (last 3x3
/// unit plus the 1x1 classifier) and the argmax output.
SplitPartition build_unet(const ArchConfig& arch, std::size_t height, std::size_t width);

// fe ‖ server ‖ be as one network; validates shapes and the split invariants.
nn::Network assemble_network(const SplitPartition& partition);
SplitPartition partition_network(const nn::Network& net, std::size_t fe_layers,
                                 std::size_t server_layers);

struct PartParams {
  nn::ParamVector fe;
  nn::ParamVector server;
  nn::ParamVector be;
};

PartParams init_part_params(const SplitPartition& partition, std::uint64_t seed);

struct Monolithic {
  nn::Network network;
  nn::ParamVector params;
};

Monolithic assemble_monolithic(const SplitPartition& partition, const PartParams& params);
// Splits a merged (fe ‖ server ‖ be) parameter vector back into its parts.
PartParams split_params(const SplitPartition& partition, const nn::ParamVector& merged);

// Client-held weights are FE ‖ BE.
nn::ParamVector client_params(const PartParams& params);
PartParams with_client_params(const SplitPartition& partition, const nn::ParamVector& client,
                              const nn::ParamVector& server);

}  // namespace qasf::split
