#include "qasf/split_ops.hpp"

#include <map>
#include <set>

#include "qasf/errors.hpp"
#include "qasf/loss.hpp"

namespace qasf::split {

namespace {

// What crosses the cut placed before layer `cut`: the main activation and
// every skip tensor sourced before the cut and consumed at or after it.
struct BoundarySpec {
  nn::Shape main;
  std::map<std::size_t, nn::Shape> skips;
};

BoundarySpec boundary_at(const nn::Network& net, const nn::ShapePlan& plan, std::size_t cut) {
  BoundarySpec b;
  b.main = cut == 0 ? net.input_shape : plan.outputs[cut - 1];
  for (const auto& r : net.skips) {
    if (r.from < cut && r.to >= cut) b.skips.emplace(r.from, plan.outputs[r.from]);
  }
  return b;
}

void require_kind(const BoundaryMessage& msg, MessageKind expected) {
  if (msg.kind != expected) {
    throw ProtocolError("expected a " + std::string(to_string(expected)) + " message, got " +
                        std::string(to_string(msg.kind)));
  }
}

struct Unpacked {
  const nn::Tensor* main = nullptr;
  nn::SkipMap skips;
};

Unpacked unpack(const BoundaryMessage& msg, const BoundarySpec& spec) {
  Unpacked out;
  std::size_t batch = 0;
  auto check = [&](const nn::Tensor& t, const nn::Shape& per_sample, const std::string& what) {
    if (t.rank() != 4 || t.dim(1) != per_sample[0] || t.dim(2) != per_sample[1] ||
        t.dim(3) != per_sample[2]) {
      throw ProtocolError(std::string(to_string(msg.kind)) + " payload '" + what + "' has shape " +
                          nn::shape_string(t.shape()) + ", boundary expects (N, " +
                          nn::shape_string(per_sample) + ")");
    }
    if (batch == 0) batch = t.dim(0);
    if (t.dim(0) != batch) throw ProtocolError("inconsistent batch size across payload segments");
  };
  for (const auto& seg : msg.payload) {
    std::size_t src = 0;
    if (seg.name == kMainSegment) {
      check(seg.value, spec.main, seg.name);
      out.main = &seg.value;
    } else if (parse_skip_segment(seg.name, src) && spec.skips.count(src) != 0) {
      check(seg.value, spec.skips.at(src), seg.name);
      out.skips.emplace(src, seg.value);
    } else {
      throw ProtocolError("unexpected payload segment '" + seg.name + "' in " +
                          std::string(to_string(msg.kind)));
    }
  }
  if (out.main == nullptr) throw ProtocolError(std::string(to_string(msg.kind)) + " has no main tensor");
  if (out.skips.size() != spec.skips.size()) {
    throw ProtocolError(std::string(to_string(msg.kind)) + " is missing skip tensors");
  }
  return out;
}

BoundaryMessage pack(MessageKind kind, const Round& round, nn::Tensor main, const nn::SkipMap& skips) {
  BoundaryMessage msg{kind, round, {}};
  msg.payload.add(std::string(kMainSegment), std::move(main));
  for (const auto& [src, t] : skips) msg.payload.add(skip_segment(src), t);
  return msg;
}

}  // namespace

FeForward client_forward_fe(const SplitPartition& partition, const nn::ParamVector& fe_params,
                            const nn::Tensor& input, const Round& round) {
  const auto net = assemble_network(partition);
  const auto plan = nn::plan_shapes(net);
  const auto spec = boundary_at(net, plan, 0);
  if (input.rank() != 4 || input.dim(1) != spec.main[0] || input.dim(2) != spec.main[1] ||
      input.dim(3) != spec.main[2]) {
    throw ProtocolError("FE input " + nn::shape_string(input.shape()) + " does not match (N, " +
                        nn::shape_string(spec.main) + ")");
  }
  auto out = nn::forward_stage(net, 0, partition.fe_end(), fe_params, input, {});
  return {pack(MessageKind::fe_activations, round, std::move(out.output), out.skips),
          std::move(out.cache)};
}

ServerForward server_forward(const SplitPartition& partition,
                             const nn::ParamVector& server_params, const BoundaryMessage& msg) {
  require_kind(msg, MessageKind::fe_activations);
  const auto net = assemble_network(partition);
  const auto plan = nn::plan_shapes(net);
  const auto in = unpack(msg, boundary_at(net, plan, partition.fe_end()));
  auto out = nn::forward_stage(net, partition.fe_end(), partition.server_end(), server_params,
                               *in.main, in.skips);
  return {pack(MessageKind::server_activations, msg.round, std::move(out.output), out.skips),
          std::move(out.cache)};
}

BeForward client_forward_be(const SplitPartition& partition, const nn::ParamVector& be_params,
                            const BoundaryMessage& msg, std::span<const std::uint8_t> labels) {
  require_kind(msg, MessageKind::server_activations);
  const auto net = assemble_network(partition);
  const auto plan = nn::plan_shapes(net);
  const auto in = unpack(msg, boundary_at(net, plan, partition.server_end()));
  auto out = nn::forward_stage(net, partition.server_end(), partition.layer_count(), be_params,
                               *in.main, in.skips);

  const nn::Tensor& logits = out.output;
  const std::size_t classes = logits.dim(1);
  if (labels.size() != logits.dim(0) * logits.dim(2) * logits.dim(3)) {
    throw ConfigError("mask size " + std::to_string(labels.size()) +
                      " does not match prediction " + nn::shape_string(logits.shape()));
  }
  for (std::uint8_t y : labels) {
    if (y >= classes) {
      throw ConfigError("mask class " + std::to_string(y) + " but the network predicts " +
                        std::to_string(classes) + " classes");
    }
  }
  auto loss = nn::cross_entropy_loss(logits, labels);
  BeForward r;
  r.loss = loss.loss;
  r.per_sample_loss = std::move(loss.per_sample);
  r.prediction = nn::argmax_classes(logits);
  r.logit_gradient = std::move(loss.logit_gradient);
  r.logits = std::move(out.output);
  r.cache = std::move(out.cache);
  return r;
}

PartGradients client_backward_be(const SplitPartition& partition, const nn::ParamVector& be_params,
                                 const BeForward& forward, const Round& round) {
  const auto net = assemble_network(partition);
  auto g = nn::backward_stage(net, partition.server_end(), partition.layer_count(), be_params,
                              forward.cache, forward.logit_gradient, {});
  return {std::move(g.params), pack(MessageKind::be_gradients, round, std::move(g.input), g.skips)};
}

PartGradients server_backward(const SplitPartition& partition, const nn::ParamVector& server_params,
                              const nn::ForwardCache& cache, const BoundaryMessage& msg) {
  require_kind(msg, MessageKind::be_gradients);
  const auto net = assemble_network(partition);
  const auto plan = nn::plan_shapes(net);
  const auto in = unpack(msg, boundary_at(net, plan, partition.server_end()));
  auto g = nn::backward_stage(net, partition.fe_end(), partition.server_end(), server_params, cache,
                              *in.main, in.skips);
  return {std::move(g.params),
          pack(MessageKind::server_gradients, msg.round, std::move(g.input), g.skips)};
}

nn::ParamVector client_backward_fe(const SplitPartition& partition,
                                   const nn::ParamVector& fe_params, const nn::ForwardCache& cache,
                                   const BoundaryMessage& msg) {
  require_kind(msg, MessageKind::server_gradients);
  const auto net = assemble_network(partition);
  const auto plan = nn::plan_shapes(net);
  const auto in = unpack(msg, boundary_at(net, plan, partition.fe_end()));
  return nn::backward_stage(net, 0, partition.fe_end(), fe_params, cache, *in.main, in.skips).params;
}

}  // namespace qasf::split
