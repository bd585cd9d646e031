#include "qasf/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "qasf/errors.hpp"

namespace qasf::agg {

namespace {

double sorted_sum(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return std::accumulate(v.begin(), v.end(), 0.0);
}

void require_snapshots(std::span<const ClientSnapshot> snapshots) {
  if (snapshots.empty()) throw ConfigError("aggregation needs at least one client snapshot");
  const auto& first = snapshots.front();
  for (const auto& s : snapshots) {
    first.client.require_compatible(s.client,
                                    "client snapshot " + std::to_string(s.client_id) + " (FE+BE)");
    first.server.require_compatible(s.server,
                                    "client snapshot " + std::to_string(s.client_id) + " (server)");
  }
}

void require_size(std::size_t got, std::size_t n, const char* what) {
  if (got != n) {
    throw ConfigError(std::string(what) + " has " + std::to_string(got) + " entries for " +
                      std::to_string(n) + " clients");
  }
}

}  // namespace

LossStats loss_bound(std::span<const double> losses, StdConvention convention) {
  if (losses.empty()) throw DataError("loss_bound of an empty loss set");
  for (double l : losses) {
    if (!std::isfinite(l) || l < 0.0) throw DataError("loss_bound expects finite nonnegative losses");
  }
  const double n = static_cast<double>(losses.size());
  const double mean = std::accumulate(losses.begin(), losses.end(), 0.0) / n;
  double ss = 0.0;
  for (double l : losses) ss += (l - mean) * (l - mean);
  double var = 0.0;
  if (convention == StdConvention::population) {
    var = ss / n;
  } else if (losses.size() > 1) {
    var = ss / (n - 1.0);
  }
  LossStats s;
  s.mean = mean;
  s.std = std::sqrt(var);
  s.bound = s.mean + 2.0 * s.std;
  s.count = losses.size();
  return s;
}

DataScores DataScores::from_counts(std::span<const std::size_t> counts, ScoreSource source) {
  if (counts.empty()) throw DataError("data scores need at least one client");
  std::size_t total = 0;
  for (auto c : counts) {
    if (c == 0) throw DataError("every client needs at least one sample for data scores");
    total += c;
  }
  DataScores d;
  d.source = source;
  d.scores.reserve(counts.size());
  for (auto c : counts) d.scores.push_back(static_cast<double>(c) / static_cast<double>(total));
  return d;
}

void DataScores::validate() const {
  if (scores.empty()) throw DataError("empty data scores");
  for (double s : scores) {
    if (!(s > 0.0) || !std::isfinite(s)) throw DataError("data scores must be positive");
  }
  if (std::abs(sorted_sum(scores) - 1.0) > 1e-12) throw DataError("data scores must sum to one");
}

AveragingWeights quality_weights(std::span<const double> bounds, const DataScores& scores) {
  scores.validate();
  require_size(bounds.size(), scores.scores.size(), "reliability bound vector");
  std::vector<double> x(bounds.size());
  for (std::size_t i = 0; i < bounds.size(); ++i) {
    if (!std::isfinite(bounds[i])) {
      throw DataError("reliability bound of client " + std::to_string(i + 1) + " is not finite");
    }
    x[i] = 1.0 / std::max(bounds[i], kMinBound);
  }
  AveragingWeights w;
  if (std::all_of(x.begin(), x.end(), [&](double v) { return v == x.front(); })) {
    w.r = scores.scores;
    return w;
  }
  const double top = *std::max_element(x.begin(), x.end());
  std::vector<double> terms(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) terms[i] = std::exp(x[i] - top) * scores.scores[i];
  const double total = sorted_sum(terms);
  w.r.resize(terms.size());
  for (std::size_t i = 0; i < terms.size(); ++i) w.r[i] = terms[i] / total;
  return w;
}

GlobalModel weighted_average(std::span<const ClientSnapshot> snapshots, std::span<const double> r) {
  require_snapshots(snapshots);
  require_size(r.size(), snapshots.size(), "averaging weight vector");
  std::vector<std::reference_wrapper<const nn::ParamVector>> clients, servers;
  for (const auto& s : snapshots) {
    clients.emplace_back(s.client);
    servers.emplace_back(s.server);
  }
  return {nn::convex_combination(clients, r), nn::convex_combination(servers, r)};
}

UpdateResult model_updates(std::span<const ClientSnapshot> snapshots,
                           std::span<const double> bounds, const DataScores& scores) {
  require_snapshots(snapshots);
  require_size(scores.scores.size(), snapshots.size(), "data score vector");
  UpdateResult out;
  out.weights = quality_weights(bounds, scores);
  out.model = weighted_average(snapshots, out.weights.r);
  return out;
}

UpdateResult naive_average(std::span<const ClientSnapshot> snapshots) {
  require_snapshots(snapshots);
  UpdateResult out;
  out.weights.r.assign(snapshots.size(), 1.0 / static_cast<double>(snapshots.size()));
  out.model = weighted_average(snapshots, out.weights.r);
  return out;
}

UpdateResult fedavg(std::span<const ClientSnapshot> snapshots,
                    std::span<const std::size_t> sample_counts) {
  require_snapshots(snapshots);
  require_size(sample_counts.size(), snapshots.size(), "sample count vector");
  UpdateResult out;
  out.weights.r = DataScores::from_counts(sample_counts, ScoreSource::training).scores;
  out.model = weighted_average(snapshots, out.weights.r);
  return out;
}

MomentumResult fedavg_m(std::span<const ClientSnapshot> snapshots,
                        std::span<const std::size_t> sample_counts, const MomentumState& state) {
  if (!(state.momentum >= 0.0 && state.momentum < 1.0)) {
    throw ConfigError("server momentum must lie in [0, 1)");
  }
  MomentumResult out;
  out.update = fedavg(snapshots, sample_counts);
  out.state.momentum = state.momentum;
  const GlobalModel& avg = out.update.model;
  if (!state.previous) {
    out.state.velocity = GlobalModel{avg.client.zeros_like(), avg.server.zeros_like()};
    out.state.previous = avg;
    return out;
  }
  const GlobalModel& prev = *state.previous;
  const GlobalModel v_old =
      state.velocity ? *state.velocity : GlobalModel{avg.client.zeros_like(), avg.server.zeros_like()};
  prev.client.require_compatible(avg.client, "previous global model (FE+BE)");
  prev.server.require_compatible(avg.server, "previous global model (server)");

  GlobalModel global = avg;
  if (state.momentum != 0.0) {  // keeps momentum 0 bit-identical to FedAVG, signed zeros included
    global.client.axpy(-state.momentum, v_old.client);
    global.server.axpy(-state.momentum, v_old.server);
  }

  GlobalModel v_new = v_old;
  v_new.client.scale(state.momentum);
  v_new.server.scale(state.momentum);
  v_new.client.axpy(1.0, prev.client);
  v_new.client.axpy(-1.0, avg.client);
  v_new.server.axpy(1.0, prev.server);
  v_new.server.axpy(-1.0, avg.server);

  out.update.model = global;
  out.state.previous = std::move(global);
  out.state.velocity = std::move(v_new);
  return out;
}

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::naive: return "naive";
    case Strategy::fedavg: return "fedavg";
    case Strategy::fedavg_m: return "fedavg-m";
    case Strategy::qa_splitfed: return "qa-splitfed";
  }
  return "?";
}

Strategy parse_strategy(std::string_view name) {
  for (Strategy s : {Strategy::naive, Strategy::fedavg, Strategy::fedavg_m, Strategy::qa_splitfed}) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown strategy '" + std::string(name) +
                    "' (expected naive, fedavg, fedavg-m or qa-splitfed)");
}

}  // namespace qasf::agg
