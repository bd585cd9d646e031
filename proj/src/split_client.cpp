#include "qasf/split_client.hpp"

#include <numeric>

#include "qasf/errors.hpp"
#include "qasf/split_ops.hpp"

namespace qasf::split {

SplitClient::SplitClient(const SplitPartition& partition, std::uint32_t client_id,
                         Transport& transport)
    : partition_(partition), id_(client_id), transport_(transport) {}

Round SplitClient::next_round() { return {global_epoch_, id_, local_epoch_, sequence_++}; }

BoundaryMessage SplitClient::control(ControlOp op, std::vector<double> args) {
  return transport_.exchange(make_control(op, next_round(), std::move(args)));
}

namespace {

void expect_ack(const BoundaryMessage& reply) {
  if (read_control(reply).first != ControlOp::ack) throw ProtocolError("expected an ack");
}

void expect_kind(const BoundaryMessage& reply, MessageKind kind) {
  if (reply.kind == MessageKind::control) read_control(reply);  // surfaces error replies
  if (reply.kind != kind) {
    throw ProtocolError("expected " + std::string(to_string(kind)) + ", got " +
                        std::string(to_string(reply.kind)));
  }
}

}  // namespace

void SplitClient::begin_session(std::uint32_t global_epoch, std::uint32_t local_epoch,
                                const OptimizerConfig& server_optimizer) {
  global_epoch_ = global_epoch;
  local_epoch_ = local_epoch;
  const double kind = server_optimizer.kind == nn::OptimizerKind::sgd ? 0.0 : 1.0;
  expect_ack(control(ControlOp::begin_session,
                     {kind, server_optimizer.learning_rate, server_optimizer.momentum}));
}

void SplitClient::end_session() { expect_ack(control(ControlOp::end_session)); }

void SplitClient::load_server_weights(const nn::ParamVector& weights) {
  expect_ack(transport_.exchange({MessageKind::global_broadcast, next_round(), weights}));
}

nn::ParamVector SplitClient::fetch_server_weights() {
  auto reply = control(ControlOp::fetch_weights);
  expect_kind(reply, MessageKind::weights_upload);
  return std::move(reply.payload);
}

double SplitClient::train_batch(ClientModel& model, ClientOptimizers& optimizers,
                                const nn::Tensor& input, std::span<const std::uint8_t> labels) {
  const Round round = next_round();
  auto fe = client_forward_fe(partition_, model.fe, input, round);
  auto server_out = transport_.exchange(fe.message);
  expect_kind(server_out, MessageKind::server_activations);
  auto be = client_forward_be(partition_, model.be, server_out, labels);
  auto be_grads = client_backward_be(partition_, model.be, be, round);
  auto server_grads = transport_.exchange(be_grads.message);
  expect_kind(server_grads, MessageKind::server_gradients);
  auto fe_grads = client_backward_fe(partition_, model.fe, fe.cache, server_grads);

  auto be_step = nn::optimizer_step(optimizers.be, model.be, be_grads.params);
  auto fe_step = nn::optimizer_step(optimizers.fe, model.fe, fe_grads);
  model.be = std::move(be_step.params);
  optimizers.be = std::move(be_step.state);
  model.fe = std::move(fe_step.params);
  optimizers.fe = std::move(fe_step.state);
  return be.loss;
}

Evaluation SplitClient::evaluate(const ClientModel& model, const nn::Tensor& input,
                                 std::span<const std::uint8_t> labels) {
  expect_ack(control(ControlOp::eval_mode));
  auto fe = client_forward_fe(partition_, model.fe, input, next_round());
  auto server_out = transport_.exchange(fe.message);
  expect_kind(server_out, MessageKind::server_activations);
  auto be = client_forward_be(partition_, model.be, server_out, labels);
  expect_ack(control(ControlOp::train_mode));

  Evaluation e;
  e.per_sample_loss = std::move(be.per_sample_loss);
  e.prediction = std::move(be.prediction);
  e.mean_loss = std::accumulate(e.per_sample_loss.begin(), e.per_sample_loss.end(), 0.0) /
                static_cast<double>(e.per_sample_loss.size());
  return e;
}

}  // namespace qasf::split
