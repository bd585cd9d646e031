#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "qasf/aggregation.hpp"
#include "qasf/dataset.hpp"
#include "qasf/metrics.hpp"
#include "qasf/optimizer.hpp"
#include "qasf/split_model.hpp"

namespace qasf::orch {

enum class TransportKind { inproc, tcp };

std::string_view to_string(TransportKind t);
TransportKind parse_transport(std::string_view name);

struct RunConfig {
  std::size_t clients = 5;
  // Samples per client; empty means the reference proportions (210, 120, 85,
  // 180, 120) divided by five, cycled when there are more than five clients.
  std::vector<std::size_t> client_counts;
  std::size_t samples = 160;
  std::size_t image_size = 32;

  std::uint32_t global_epochs = 10;
  std::uint32_t local_epochs = 12;
  double learning_rate = 0.05;
  double momentum = 0.9;       // client and server SGD momentum; 0 selects plain SGD
  std::size_t batch_size = 8;  // 0 = the whole client set per step

  agg::Strategy strategy = agg::Strategy::qa_splitfed;
  double server_momentum = 0.9;  // FedAVG-M only
  agg::StdConvention std_convention = agg::StdConvention::population;

  std::uint64_t seed = 1;
  split::ArchConfig arch;
  std::vector<std::uint32_t> corrupt_ids;  // 1-based
  data::CorruptionSpec corruption;
  data::GeneratorConfig generator;
  TransportKind transport = TransportKind::inproc;

  std::vector<std::size_t> resolved_counts() const;
  // Throws ConfigError naming the offending field.
  void validate() const;
};

nlohmann::json to_json(const RunConfig& config);

/// One record per event, in emission order; serialized as JSON lines.
struct TrainingLog {
  std::vector<nlohmann::json> records;

  std::string to_jsonl() const;
};

// Raised when a loss turns non-finite during training.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunResult {
  agg::GlobalModel best;
  std::uint32_t best_epoch = 0;  // 1-based global epoch
  std::vector<agg::GlobalModel> epoch_models;  // final global model of every global epoch
  TrainingLog log;
  metrics::Report report;
};

struct RunHooks {
  std::function<void(const nlohmann::json&)> on_record;  // progress reporting
};

// Which clients to corrupt for k corrupted clients: most data first, ties in
// a seed-derived order. Returns 1-based ids in corruption order.
std::vector<std::uint32_t> corruption_order(std::span<const std::size_t> counts, std::uint64_t seed);

RunResult run(const RunConfig& config, const RunHooks& hooks = {});

}  // namespace qasf::orch
