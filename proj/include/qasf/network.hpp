#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "qasf/param_vector.hpp"
#include "qasf/tensor.hpp"

namespace qasf::nn {

enum class LayerKind { conv2d, relu, maxpool2x2, upsample2x2, batchnorm, argmax_output };

std::string_view to_string(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  // Unique within a network; prefixes the layer's parameter segment names.
  std::string name;
  int filters = 0;  // conv2d output channels
  int kernel = 3;   // conv2d, square, odd
  int stride = 1;   // conv2d

  static LayerSpec conv(std::string name, int filters, int kernel = 3, int stride = 1);
  static LayerSpec batchnorm(std::string name);
  static LayerSpec relu(std::string name);
  static LayerSpec maxpool(std::string name);
  static LayerSpec upsample(std::string name);
  static LayerSpec argmax_output(std::string name);

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

// The output of layer `from` is concatenated along channels onto the input
// of layer `to` (after the main path). Indices are positions in the layer list.
struct SkipRoute {
  std::size_t from = 0;
  std::size_t to = 0;

  friend bool operator==(const SkipRoute&, const SkipRoute&) = default;
};

struct Network {
  Shape input_shape;  // per-sample (C, H, W)
  std::vector<LayerSpec> layers;
  std::vector<SkipRoute> skips;
};

// Per-layer per-sample shapes. inputs[i] already includes concatenated skips.
struct ShapePlan {
  std::vector<Shape> inputs;
  std::vector<Shape> outputs;
};

// Validates layer parameters, skip routes and inter-layer shapes. Throws
// ConfigError naming the offending layer.
ShapePlan plan_shapes(const Network& net);
Shape output_shape(const Network& net);

std::vector<std::string> param_names(const Network& net, std::size_t begin, std::size_t end);
std::vector<std::string> param_names(const Network& net);

// He-uniform conv kernels, zero biases, unit BN scale, zero BN shift.
ParamVector init_params(const Network& net, std::size_t begin, std::size_t end,
                        std::uint64_t seed);
ParamVector init_params(const Network& net, std::uint64_t seed);

// Skip tensors crossing a stage boundary, keyed by source layer index.
using SkipMap = std::map<std::size_t, Tensor>;

struct LayerRecord {
  Tensor concat_input;  // effective input, only for layers that receive skips
  Tensor output;
  Tensor xhat;                        // batchnorm
  std::vector<double> inv_std;        // batchnorm
  std::vector<std::uint32_t> argmax;  // maxpool
};

// Activation record for one forward call over layers [begin, end).
struct ForwardCache {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t batch = 0;
  std::uint64_t fingerprint = 0;
  Tensor input;
  std::vector<LayerRecord> records;

  bool valid() const { return fingerprint != 0; }
};

struct StageOutput {
  Tensor output;
  SkipMap skips;  // skips whose destination lies at or beyond `end`
  ForwardCache cache;
};

struct StageGradients {
  ParamVector params;
  Tensor input;
  SkipMap skips;  // gradients for skip tensors sourced before `begin`
};

/// Runs layers [begin, end) of `net` on a batch (N, C, H, W).
///
/// `incoming` must hold every skip tensor sourced before `begin` that is
/// consumed at or after `begin`; those consumed past `end` are passed
/// through into the result's `skips`.
StageOutput forward_stage(const Network& net, std::size_t begin, std::size_t end,
                          const ParamVector& params, const Tensor& input,
                          const SkipMap& incoming);

// `grad_skips` carries gradients for every skip in the forward result's
// `skips`. Throws ProtocolError on a cache from a different stage or batch.
StageGradients backward_stage(const Network& net, std::size_t begin, std::size_t end,
                              const ParamVector& params, const ForwardCache& cache,
                              const Tensor& grad_output, const SkipMap& grad_skips);

struct ForwardResult {
  Tensor output;
  ForwardCache cache;
};

struct BackwardResult {
  ParamVector params;
  Tensor input;
};

ForwardResult forward(const Network& net, const ParamVector& params, const Tensor& input);
BackwardResult backward(const Network& net, const ParamVector& params,
                        const ForwardCache& cache, const Tensor& grad_output);

}  // namespace qasf::nn
