#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qasf/param_vector.hpp"

namespace qasf::agg {

// Weights of one client taken from its best local epoch.
struct ClientSnapshot {
  std::uint32_t client_id = 0;
  nn::ParamVector client;  // FE ‖ BE
  nn::ParamVector server;
};

enum class StdConvention { population, sample };

struct LossStats {
  double mean = 0.0;
  double std = 0.0;
  double bound = 0.0;  // mean + 2 * std
  std::size_t count = 0;
};

LossStats loss_bound(std::span<const double> losses,
                     StdConvention convention = StdConvention::population);

enum class ScoreSource { training, validation };

struct DataScores {
  std::vector<double> scores;
  ScoreSource source = ScoreSource::training;

  static DataScores from_counts(std::span<const std::size_t> counts, ScoreSource source);
  // Entries positive and summing to one within 1e-12; throws DataError.
  void validate() const;
};

struct AveragingWeights {
  std::vector<double> r;
};

struct GlobalModel {
  nn::ParamVector client;
  nn::ParamVector server;

  friend bool operator==(const GlobalModel&, const GlobalModel&) = default;
};

struct UpdateResult {
  GlobalModel model;
  AveragingWeights weights;
};

inline constexpr double kMinBound = 1e-8;

// r = (q ⊙ d) / (qᵀ d) with q = softmax(1 / max(b, kMinBound)). When every
// clamped bound is equal the result is d itself.
AveragingWeights quality_weights(std::span<const double> bounds, const DataScores& scores);

// Averages snapshots with arbitrary convex weights r.
GlobalModel weighted_average(std::span<const ClientSnapshot> snapshots,
                             std::span<const double> r);

UpdateResult model_updates(std::span<const ClientSnapshot> snapshots,
                           std::span<const double> bounds, const DataScores& scores);
UpdateResult naive_average(std::span<const ClientSnapshot> snapshots);
UpdateResult fedavg(std::span<const ClientSnapshot> snapshots,
                    std::span<const std::size_t> sample_counts);

struct MomentumState {
  double momentum = 0.9;
  std::optional<GlobalModel> previous;
  std::optional<GlobalModel> velocity;
};

struct MomentumResult {
  UpdateResult update;  // weights are the FedAVG weights of the inner average
  MomentumState state;
};

// Server momentum over the pseudo-gradient Δ = previous − average:
//   v ← β·v + Δ,  global ← previous − v  (computed as average − β·v_old).
// Without a previous global model this is plain FedAVG with v = 0.
MomentumResult fedavg_m(std::span<const ClientSnapshot> snapshots,
                        std::span<const std::size_t> sample_counts, const MomentumState& state);

enum class Strategy { naive, fedavg, fedavg_m, qa_splitfed };

std::string_view to_string(Strategy s);
Strategy parse_strategy(std::string_view name);  // throws ConfigError

}  // namespace qasf::agg
