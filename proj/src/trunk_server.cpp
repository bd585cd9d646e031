#include "qasf/trunk_server.hpp"

#include "qasf/errors.hpp"

namespace qasf::split {

namespace {

std::string_view op_name(ControlOp op) {
  switch (op) {
    case ControlOp::begin_session: return "begin";
    case ControlOp::end_session: return "end";
    case ControlOp::fetch_weights: return "fetch";
    case ControlOp::train_mode: return "train";
    case ControlOp::eval_mode: return "eval";
    case ControlOp::ack: return "ack";
  }
  return "?";
}

constexpr std::string_view kOpPrefix = "op.";
constexpr std::string_view kErrorPrefix = "error:";

}  // namespace

BoundaryMessage make_control(ControlOp op, const Round& round, std::vector<double> args) {
  BoundaryMessage msg{MessageKind::control, round, {}};
  std::vector<double> data;
  data.push_back(static_cast<double>(args.size()));
  data.insert(data.end(), args.begin(), args.end());
  const std::size_t n = data.size();
  msg.payload.add(std::string(kOpPrefix) + std::string(op_name(op)), nn::Tensor({n}, std::move(data)));
  return msg;
}

BoundaryMessage make_error(const Round& round, const std::string& text) {
  BoundaryMessage msg{MessageKind::control, round, {}};
  msg.payload.add(std::string(kErrorPrefix) + text, nn::Tensor({1}));
  return msg;
}

std::pair<ControlOp, std::vector<double>> read_control(const BoundaryMessage& msg) {
  if (msg.kind != MessageKind::control || msg.payload.segment_count() != 1) {
    throw ProtocolError("expected a control message, got " + std::string(to_string(msg.kind)));
  }
  const auto& seg = msg.payload.segments().front();
  if (seg.name.starts_with(kErrorPrefix)) {
    throw ProtocolError("server error: " + seg.name.substr(kErrorPrefix.size()));
  }
  if (!seg.name.starts_with(kOpPrefix)) throw ProtocolError("malformed control segment '" + seg.name + "'");
  const std::string_view name = std::string_view(seg.name).substr(kOpPrefix.size());
  for (ControlOp op : {ControlOp::begin_session, ControlOp::end_session, ControlOp::fetch_weights,
                       ControlOp::train_mode, ControlOp::eval_mode, ControlOp::ack}) {
    if (op_name(op) != name) continue;
    const auto data = seg.value.data();
    const auto count = static_cast<std::size_t>(data[0]);
    if (count + 1 != data.size()) throw ProtocolError("malformed control arguments");
    return {op, std::vector<double>(data.begin() + 1, data.end())};
  }
  throw ProtocolError("unknown control operation '" + std::string(name) + "'");
}

TrunkServer::TrunkServer(SplitPartition partition) : partition_(std::move(partition)) {
  const auto net = assemble_network(partition_);
  layout_ = nn::init_params(net, partition_.fe_end(), partition_.server_end(), 0);
}

void TrunkServer::check_round(const BoundaryMessage& msg) {
  const auto key = std::make_pair(msg.round.client, msg.kind);
  auto it = last_round_.find(key);
  if (it != last_round_.end() && !round_follows(it->second, msg.round)) {
    throw ProtocolError("round replay on client " + std::to_string(msg.round.client) + " " +
                        std::string(to_string(msg.kind)) + " stream: (" +
                        std::to_string(msg.round.global_epoch) + ", " +
                        std::to_string(msg.round.local_epoch) + ", " + std::to_string(msg.round.batch) +
                        ") does not follow (" + std::to_string(it->second.global_epoch) + ", " +
                        std::to_string(it->second.local_epoch) + ", " +
                        std::to_string(it->second.batch) + ")");
  }
  last_round_[key] = msg.round;
}

void TrunkServer::require_session(const BoundaryMessage& msg) const {
  if (!active_) {
    throw ProtocolError("client " + std::to_string(msg.round.client) + " has no open session");
  }
  if (*active_ != msg.round.client) {
    throw ProtocolError("client " + std::to_string(msg.round.client) +
                        " interleaved with the active session of client " + std::to_string(*active_));
  }
}

BoundaryMessage TrunkServer::on_control(const BoundaryMessage& msg) {
  auto [op, args] = read_control(msg);
  switch (op) {
    case ControlOp::begin_session: {
      if (active_ && *active_ != msg.round.client) {
        throw ProtocolError("server is busy with client " + std::to_string(*active_));
      }
      if (args.size() != 3) throw ProtocolError("begin_session expects 3 arguments");
      optimizer_config_.kind = args[0] == 0.0 ? nn::OptimizerKind::sgd : nn::OptimizerKind::sgd_momentum;
      optimizer_config_.learning_rate = args[1];
      optimizer_config_.momentum = args[2];
      active_ = msg.round.client;
      training_ = true;
      weights_loaded_ = false;
      in_flight_.reset();
      break;
    }
    case ControlOp::end_session:
      require_session(msg);
      active_.reset();
      in_flight_.reset();
      break;
    case ControlOp::fetch_weights:
      require_session(msg);
      if (!weights_loaded_) throw ProtocolError("no server weights loaded in this session");
      return {MessageKind::weights_upload, msg.round, params_};
    case ControlOp::train_mode:
    case ControlOp::eval_mode:
      require_session(msg);
      training_ = op == ControlOp::train_mode;
      in_flight_.reset();
      break;
    case ControlOp::ack:
      throw ProtocolError("unexpected ack from client");
  }
  return make_control(ControlOp::ack, msg.round);
}

BoundaryMessage TrunkServer::handle(const BoundaryMessage& msg) {
  check_round(msg);
  switch (msg.kind) {
    case MessageKind::control:
      return on_control(msg);
    case MessageKind::global_broadcast:
      require_session(msg);
      if (!layout_.compatible_with(msg.payload)) {
        throw ProtocolError("server weight broadcast does not match the trunk layout");
      }
      params_ = msg.payload;
      optimizer_ = nn::make_optimizer(optimizer_config_.kind, optimizer_config_.learning_rate,
                                      optimizer_config_.momentum, params_);
      weights_loaded_ = true;
      in_flight_.reset();
      return make_control(ControlOp::ack, msg.round);
    case MessageKind::fe_activations: {
      require_session(msg);
      if (!weights_loaded_) throw ProtocolError("no server weights loaded in this session");
      if (!training_) return server_forward(partition_, params_, msg).message;
      if (in_flight_) throw ProtocolError("previous exchange has not completed its backward pass");
      auto fwd = server_forward(partition_, params_, msg);
      in_flight_.emplace(msg.round, std::move(fwd.cache));
      return std::move(fwd.message);
    }
    case MessageKind::be_gradients: {
      require_session(msg);
      if (!in_flight_) throw ProtocolError("be-gradients without a matching forward pass");
      if (!(in_flight_->first == msg.round)) {
        throw ProtocolError("be-gradients round does not match the forward pass in flight");
      }
      auto grads = server_backward(partition_, params_, in_flight_->second, msg);
      in_flight_.reset();
      auto step = nn::optimizer_step(optimizer_, params_, grads.params);
      params_ = std::move(step.params);
      optimizer_ = std::move(step.state);
      return std::move(grads.message);
    }
    default:
      throw ProtocolError("server does not accept " + std::string(to_string(msg.kind)) + " messages");
  }
}

}  // namespace qasf::split
