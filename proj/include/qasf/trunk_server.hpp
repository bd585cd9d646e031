#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qasf/boundary.hpp"
#include "qasf/optimizer.hpp"
#include "qasf/split_ops.hpp"

namespace qasf::split {

// Control messages carry one payload segment named "op.<name>" whose tensor
// holds the argument count followed by the arguments. Errors are
// reported as "error:<text>".
enum class ControlOp { begin_session, end_session, fetch_weights, train_mode, eval_mode, ack };

BoundaryMessage make_control(ControlOp op, const Round& round, std::vector<double> args = {});
// Returns the operation and its arguments; throws ProtocolError for error
// replies (with the remote text) and malformed control payloads.
std::pair<ControlOp, std::vector<double>> read_control(const BoundaryMessage& msg);
BoundaryMessage make_error(const Round& round, const std::string& text);

struct OptimizerConfig {
  nn::OptimizerKind kind = nn::OptimizerKind::sgd;
  double learning_rate = 0.01;
  double momentum = 0.0;
};

/// Server side of the split: owns the trunk weights and its optimizer and
/// answers one message at a time.
///
/// A client opens a session (begin_session carries the optimizer settings),
/// loads weights with a global-broadcast, then alternates fe-activations and
/// be-gradients. Only one client session is active at a time and only one
/// forward/backward exchange is in flight. Every incoming message must carry
/// a round strictly after the previous one of the same (client, kind).
class TrunkServer {
 public:
  explicit TrunkServer(SplitPartition partition);

  BoundaryMessage handle(const BoundaryMessage& msg);

  const nn::ParamVector& params() const { return params_; }
  std::optional<std::uint32_t> active_client() const { return active_; }
  const SplitPartition& partition() const { return partition_; }

 private:
  void check_round(const BoundaryMessage& msg);
  void require_session(const BoundaryMessage& msg) const;
  BoundaryMessage on_control(const BoundaryMessage& msg);

  SplitPartition partition_;
  nn::ParamVector params_;
  nn::ParamVector layout_;  // expected server weight shapes
  OptimizerConfig optimizer_config_;
  nn::OptimizerState optimizer_;
  std::optional<std::uint32_t> active_;
  bool training_ = true;
  bool weights_loaded_ = false;
  std::optional<std::pair<Round, nn::ForwardCache>> in_flight_;
  std::map<std::pair<std::uint32_t, MessageKind>, Round> last_round_;
};

}  // namespace qasf::split
