#include "qasf/split_model.hpp"

#include "qasf/errors.hpp"

namespace qasf::split {

namespace {

using nn::LayerKind;
using nn::LayerSpec;

}  // namespace

SplitPartition build_unet(const ArchConfig& arch, std::size_t height, std::size_t width) {
  if (arch.down_filters.empty()) throw ConfigError("architecture needs at least one down block");
  if (arch.convs_per_block < 1) throw ConfigError("convs_per_block must be at least 1");
  if (arch.classes < 2) throw ConfigError("need at least two classes");

  std::vector<LayerSpec> layers;
  std::vector<nn::SkipRoute> skips;
  auto unit = [&](const std::string& prefix, int filters) {
    layers.push_back(LayerSpec::conv(prefix + ".conv", filters, arch.kernel));
    if (arch.batchnorm) layers.push_back(LayerSpec::batchnorm(prefix + ".bn"));
    layers.push_back(LayerSpec::relu(prefix + ".relu"));
  };
  const std::size_t unit_size = arch.batchnorm ? 3 : 2;

  const std::size_t depth = arch.down_filters.size();
  std::vector<std::size_t> skip_source(depth);
  for (std::size_t b = 0; b < depth; ++b) {
    for (int c = 0; c < arch.convs_per_block; ++c) {
      unit("down" + std::to_string(b) + "." + std::to_string(c), arch.down_filters[b]);
    }
    skip_source[b] = layers.size() - 1;
    layers.push_back(LayerSpec::maxpool("down" + std::to_string(b) + ".pool"));
  }
  for (int c = 0; c < arch.convs_per_block; ++c) unit("mid." + std::to_string(c), arch.bottleneck_filters);
  for (std::size_t b = depth; b-- > 0;) {
    layers.push_back(LayerSpec::upsample("up" + std::to_string(b) + ".upsample"));
    for (int c = 0; c < arch.convs_per_block; ++c) {
      if (c == 0 && arch.skip_connections) skips.push_back({skip_source[b], layers.size()});
      unit("up" + std::to_string(b) + "." + std::to_string(c), arch.down_filters[b]);
    }
  }
  layers.push_back(LayerSpec::conv("head.conv", arch.classes, 1));
  layers.push_back(LayerSpec::argmax_output("head.argmax"));

  const std::size_t n = layers.size();
  const std::size_t fe_layers = unit_size;
  const std::size_t be_layers = unit_size + 2;
  nn::Network net{{arch.in_channels, height, width}, std::move(layers), std::move(skips)};
  return partition_network(net, fe_layers, n - fe_layers - be_layers);
}

nn::Network assemble_network(const SplitPartition& partition) {
  nn::Network net;
  net.input_shape = partition.input_shape;
  net.layers.reserve(partition.layer_count());
  net.layers.insert(net.layers.end(), partition.fe.begin(), partition.fe.end());
  net.layers.insert(net.layers.end(), partition.server.begin(), partition.server.end());
  net.layers.insert(net.layers.end(), partition.be.begin(), partition.be.end());
  net.skips = partition.skips;
  nn::plan_shapes(net);
  if (partition.fe.empty() || partition.fe.front().kind != LayerKind::conv2d) {
    throw ConfigError("split partition: FE must start with a conv layer");
  }
  if (partition.be.empty() || partition.be.back().kind != LayerKind::argmax_output) {
    throw ConfigError("split partition: BE must end with the argmax output layer");
  }
  return net;
}

SplitPartition partition_network(const nn::Network& net, std::size_t fe_layers,
                                 std::size_t server_layers) {
  if (fe_layers + server_layers > net.layers.size()) {
    throw ConfigError("split partition: part sizes exceed the layer count");
  }
  SplitPartition p;
  p.input_shape = net.input_shape;
  auto first = net.layers.begin();
  p.fe.assign(first, first + static_cast<long>(fe_layers));
  p.server.assign(first + static_cast<long>(fe_layers),
                  first + static_cast<long>(fe_layers + server_layers));
  p.be.assign(first + static_cast<long>(fe_layers + server_layers), net.layers.end());
  p.skips = net.skips;
  assemble_network(p);
  return p;
}

PartParams init_part_params(const SplitPartition& partition, std::uint64_t seed) {
  const auto net = assemble_network(partition);
  return {nn::init_params(net, 0, partition.fe_end(), seed),
          nn::init_params(net, partition.fe_end(), partition.server_end(), seed),
          nn::init_params(net, partition.server_end(), partition.layer_count(), seed)};
}

Monolithic assemble_monolithic(const SplitPartition& partition, const PartParams& params) {
  Monolithic m{assemble_network(partition), {}};
  const std::vector<nn::ParamVector> parts{params.fe, params.server, params.be};
  m.params = nn::merge(parts);
  m.params.require_compatible(nn::init_params(m.network, 0), "assemble_monolithic");
  return m;
}

PartParams split_params(const SplitPartition& partition, const nn::ParamVector& merged) {
  const auto net = assemble_network(partition);
  const auto fe = nn::param_names(net, 0, partition.fe_end());
  const auto server = nn::param_names(net, partition.fe_end(), partition.server_end());
  const auto be = nn::param_names(net, partition.server_end(), partition.layer_count());
  if (fe.size() + server.size() + be.size() != merged.segment_count()) {
    throw ConfigError("split_params: segment count does not match the partition");
  }
  return {nn::select(merged, fe), nn::select(merged, server), nn::select(merged, be)};
}

nn::ParamVector client_params(const PartParams& params) {
  const std::vector<nn::ParamVector> parts{params.fe, params.be};
  return nn::merge(parts);
}

PartParams with_client_params(const SplitPartition& partition, const nn::ParamVector& client,
                              const nn::ParamVector& server) {
  const auto net = assemble_network(partition);
  const auto fe = nn::param_names(net, 0, partition.fe_end());
  const auto be = nn::param_names(net, partition.server_end(), partition.layer_count());
  if (fe.size() + be.size() != client.segment_count()) {
    throw ConfigError("client parameter vector does not match the partition");
  }
  return {nn::select(client, fe), server, nn::select(client, be)};
}

}  // namespace qasf::split
