#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "qasf/optimizer.hpp"
#include "qasf/split_model.hpp"
#include "qasf/transport.hpp"

namespace qasf::split {

struct ClientModel {
  nn::ParamVector fe;
  nn::ParamVector be;
};

struct ClientOptimizers {
  nn::OptimizerState fe;
  nn::OptimizerState be;
};

struct Evaluation {
  std::vector<double> per_sample_loss;
  std::vector<std::uint8_t> prediction;
  double mean_loss = 0.0;
};

/// Client side of the U-shaped split: runs FE and BE locally and exchanges
/// activations and gradients with the server through a Transport. Labels
/// never leave this object.
///
/// Rounds are stamped (global epoch, client id, local epoch, sequence) with a
/// sequence number that only grows over the client's lifetime.
class SplitClient {
 public:
  SplitClient(const SplitPartition& partition, std::uint32_t client_id, Transport& transport);

  std::uint32_t id() const { return id_; }

  void begin_session(std::uint32_t global_epoch, std::uint32_t local_epoch,
                     const OptimizerConfig& server_optimizer);
  void end_session();
  void set_local_epoch(std::uint32_t local_epoch) { local_epoch_ = local_epoch; }

  void load_server_weights(const nn::ParamVector& weights);
  nn::ParamVector fetch_server_weights();

  // One forward/backward exchange and optimizer steps on FE and BE (the
  // server steps its trunk when it receives the BE gradients). Returns the
  // batch loss.
  double train_batch(ClientModel& model, ClientOptimizers& optimizers, const nn::Tensor& input,
                     std::span<const std::uint8_t> labels);

  // Forward only; the server keeps no cache.
  Evaluation evaluate(const ClientModel& model, const nn::Tensor& input,
                      std::span<const std::uint8_t> labels);

 private:
  Round next_round();
  BoundaryMessage control(ControlOp op, std::vector<double> args = {});

  const SplitPartition& partition_;
  std::uint32_t id_;
  Transport& transport_;
  std::uint32_t global_epoch_ = 0;
  std::uint32_t local_epoch_ = 0;
  std::uint32_t sequence_ = 0;
};

}  // namespace qasf::split
