#include "qasf/orchestrator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

#include "qasf/errors.hpp"
#include "qasf/rng.hpp"
#include "qasf/serialize.hpp"
#include "qasf/split_client.hpp"
#include "qasf/transport.hpp"
#include "qasf/trunk_server.hpp"

namespace qasf::orch {

namespace {

using nlohmann::json;

constexpr std::array<std::size_t, 5> kReferenceCounts{210, 120, 85, 180, 120};

json stats_json(const agg::LossStats& s) {
  return {{"mean", s.mean}, {"std", s.std}, {"bound", s.bound}, {"count", s.count}};
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

struct LocalResult {
  agg::ClientSnapshot snapshot;
  std::vector<double> train_losses;  // per sample, with the snapshot weights
  std::uint32_t best_epoch = 0;
};

struct ClientData {
  nn::Tensor train_images;
  std::vector<std::uint8_t> train_labels;
  nn::Tensor val_images;
  std::vector<std::uint8_t> val_labels;
};

class Runner {
 public:
  Runner(const RunConfig& config, const RunHooks& hooks) : cfg_(config), hooks_(hooks) {}

  RunResult execute();

 private:
  void emit(json record) {
    if (hooks_.on_record) hooks_.on_record(record);
    result_.log.records.push_back(std::move(record));
  }

  split::OptimizerConfig optimizer_config() const {
    return {cfg_.momentum > 0.0 ? nn::OptimizerKind::sgd_momentum : nn::OptimizerKind::sgd,
            cfg_.learning_rate, cfg_.momentum};
  }

  split::ClientModel to_client_model(const nn::ParamVector& client) const {
    const auto parts = split::with_client_params(partition_, client, init_.server);
    return {parts.fe, parts.be};
  }

  nn::ParamVector merge_client(const split::ClientModel& m) const {
    return split::client_params({m.fe, init_.server, m.be});
  }

  LocalResult local_training(std::size_t i, std::uint32_t g, const agg::GlobalModel& global);
  std::vector<double> validation_losses(std::size_t i, std::uint32_t g, std::uint32_t local_epoch,
                                        const agg::GlobalModel& model);
  agg::GlobalModel aggregate(std::uint32_t g, std::span<const agg::ClientSnapshot> snapshots,
                             std::span<const LocalResult> locals);

  const RunConfig& cfg_;
  const RunHooks& hooks_;
  RunResult result_;
  data::Partition data_;
  std::vector<ClientData> batches_;
  split::SplitPartition partition_;
  split::PartParams init_;
  std::unique_ptr<split::TrunkServer> server_;
  std::unique_ptr<split::TcpTrunkService> service_;
  std::unique_ptr<split::Transport> transport_;
  std::vector<split::SplitClient> clients_;
  agg::MomentumState momentum_;
};

LocalResult Runner::local_training(std::size_t i, std::uint32_t g, const agg::GlobalModel& global) {
  auto& client = clients_[i];
  const auto& ds = data_.clients[i];
  const std::uint32_t E = cfg_.local_epochs;
  const std::size_t n = ds.train.size();
  const std::size_t bs = cfg_.batch_size == 0 ? n : std::min(cfg_.batch_size, n);
  const auto opt = optimizer_config();

  auto context = [&](std::uint32_t e) {
    return "global epoch " + std::to_string(g) + ", client " + std::to_string(client.id()) +
           ", local epoch " + std::to_string(e);
  };

  split::ClientModel model = to_client_model(global.client);
  split::ClientOptimizers optimizers{
      nn::make_optimizer(opt.kind, opt.learning_rate, opt.momentum, model.fe),
      nn::make_optimizer(opt.kind, opt.learning_rate, opt.momentum, model.be)};
  client.begin_session(g, 0, opt);
  client.load_server_weights(global.server);

  LocalResult out;
  out.snapshot.client_id = client.id();
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (std::uint32_t e = 1; e <= E; ++e) {
    client.set_local_epoch(e);
    double train_loss = 0.0;
    try {
      if (bs == n) {
        train_loss = client.train_batch(model, optimizers, batches_[i].train_images,
                                        batches_[i].train_labels);
      } else {
        Rng rng(derive_seed(cfg_.seed, {0x7a11, g, client.id(), e}));
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < n; start += bs) {
          std::vector<data::SegSample> batch;
          for (std::size_t k = start; k < std::min(n, start + bs); ++k) batch.push_back(ds.train[order[k]]);
          const double l = client.train_batch(model, optimizers, data::batch_images(batch),
                                              data::batch_labels(batch));
          train_loss += l * static_cast<double>(batch.size());
        }
        train_loss /= static_cast<double>(n);
      }
    } catch (const DataError& err) {
      throw DivergenceError(context(e) + ": " + err.what());
    }
    if (!std::isfinite(train_loss) || !model.fe.all_finite() || !model.be.all_finite()) {
      throw DivergenceError(context(e) + ": training diverged (loss " + std::to_string(train_loss) + ")");
    }

    double val_loss = 0.0;
    try {
      val_loss = client.evaluate(model, batches_[i].val_images, batches_[i].val_labels).mean_loss;
    } catch (const DataError& err) {
      throw DivergenceError(context(e) + ": " + err.what());
    }
    emit({{"event", "local_epoch"},
          {"global_epoch", g},
          {"client", client.id()},
          {"local_epoch", e},
          {"train_loss", train_loss},
          {"val_loss", val_loss}});
    if (val_loss < best_val) {
      best_val = val_loss;
      out.best_epoch = e;
      out.snapshot.client = merge_client(model);
      out.snapshot.server = client.fetch_server_weights();
    }
  }

  // Per-sample training losses of the snapshot weights.
  client.set_local_epoch(E + 1);
  client.load_server_weights(out.snapshot.server);
  const auto eval = client.evaluate(to_client_model(out.snapshot.client), batches_[i].train_images,
                                    batches_[i].train_labels);
  client.end_session();
  out.train_losses = eval.per_sample_loss;

  emit({{"event", "best_epoch"},
        {"global_epoch", g},
        {"client", client.id()},
        {"best_epoch", out.best_epoch},
        {"val_loss", best_val},
        {"train_losses", out.train_losses},
        {"client_digest", digest(out.snapshot.client)},
        {"server_digest", digest(out.snapshot.server)}});
  return out;
}

std::vector<double> Runner::validation_losses(std::size_t i, std::uint32_t g,
                                              std::uint32_t local_epoch,
                                              const agg::GlobalModel& model) {
  auto& client = clients_[i];
  client.begin_session(g, local_epoch, optimizer_config());
  client.load_server_weights(model.server);
  auto eval = client.evaluate(to_client_model(model.client), batches_[i].val_images,
                              batches_[i].val_labels);
  client.end_session();
  for (double l : eval.per_sample_loss) {
    if (!std::isfinite(l)) {
      throw DivergenceError("global epoch " + std::to_string(g) + ", client " +
                            std::to_string(client.id()) + ": non-finite validation loss");
    }
  }
  return eval.per_sample_loss;
}

agg::GlobalModel Runner::aggregate(std::uint32_t g, std::span<const agg::ClientSnapshot> snapshots,
                                   std::span<const LocalResult> locals) {
  const std::size_t N = snapshots.size();
  std::vector<std::size_t> train_counts, val_counts;
  for (const auto& c : data_.clients) {
    train_counts.push_back(c.train.size());
    val_counts.push_back(c.validation.size());
  }
  auto update_record = [&](int phase, const agg::AveragingWeights& w) {
    return json{{"event", "update"},
                {"global_epoch", g},
                {"phase", phase},
                {"strategy", agg::to_string(cfg_.strategy)},
                {"r", w.r}};
  };

  switch (cfg_.strategy) {
    case agg::Strategy::naive: {
      auto u = agg::naive_average(snapshots);
      emit(update_record(0, u.weights));
      return u.model;
    }
    case agg::Strategy::fedavg: {
      auto u = agg::fedavg(snapshots, train_counts);
      emit(update_record(0, u.weights));
      return u.model;
    }
    case agg::Strategy::fedavg_m: {
      auto m = agg::fedavg_m(snapshots, train_counts, momentum_);
      momentum_ = std::move(m.state);
      emit(update_record(0, m.update.weights));
      return m.update.model;
    }
    case agg::Strategy::qa_splitfed:
      break;
  }

  std::vector<std::string> before;
  for (const auto& s : snapshots) before.push_back(digest(s.client) + digest(s.server));

  std::vector<double> bt(N);
  json bt_stats = json::array();
  for (std::size_t i = 0; i < N; ++i) {
    const auto s = agg::loss_bound(locals[i].train_losses, cfg_.std_convention);
    bt[i] = s.bound;
    bt_stats.push_back(stats_json(s));
  }
  const auto dt = agg::DataScores::from_counts(train_counts, agg::ScoreSource::training);
  auto phase1 = agg::model_updates(snapshots, bt, dt);
  auto rec1 = update_record(1, phase1.weights);
  rec1["b"] = bt;
  rec1["d"] = dt.scores;
  rec1["stats"] = bt_stats;
  emit(std::move(rec1));

  std::vector<double> bv(N);
  json bv_stats = json::array();
  for (std::size_t i = 0; i < N; ++i) {
    const auto s = agg::loss_bound(validation_losses(i, g, cfg_.local_epochs + 2, phase1.model),
                                   cfg_.std_convention);
    bv[i] = s.bound;
    bv_stats.push_back(stats_json(s));
  }
  const auto dv = agg::DataScores::from_counts(val_counts, agg::ScoreSource::validation);
  auto phase2 = agg::model_updates(snapshots, bv, dv);

  for (std::size_t i = 0; i < N; ++i) {
    if (digest(snapshots[i].client) + digest(snapshots[i].server) != before[i]) {
      throw std::logic_error("client snapshot changed between the two update phases");
    }
  }
  auto rec2 = update_record(2, phase2.weights);
  rec2["b"] = bv;
  rec2["d"] = dv.scores;
  rec2["stats"] = bv_stats;
  emit(std::move(rec2));
  return phase2.model;
}

RunResult Runner::execute() {
  cfg_.validate();
  const auto counts = cfg_.resolved_counts();
  const std::size_t N = counts.size();

  auto samples = data::generate_synthetic(derive_seed(cfg_.seed, {1}), cfg_.samples,
                                          cfg_.image_size, cfg_.image_size, cfg_.generator);
  data_ = data::partition_clients(std::move(samples), counts, derive_seed(cfg_.seed, {2}));
  for (auto id : cfg_.corrupt_ids) data::corrupt_client(data_.clients[id - 1], cfg_.corruption);
  if (data_.test.empty()) throw ConfigError("samples: no samples left for the test set");
  for (const auto& c : data_.clients) {
    if (c.validation.empty()) {
      throw ConfigError("client_counts: client " + std::to_string(c.client_id) +
                        " is too small to hold a validation sample (needs >= 7 samples)");
    }
    batches_.push_back({data::batch_images(c.train), data::batch_labels(c.train),
                        data::batch_images(c.validation), data::batch_labels(c.validation)});
  }

  partition_ = split::build_unet(cfg_.arch, cfg_.image_size, cfg_.image_size);
  init_ = split::init_part_params(partition_, derive_seed(cfg_.seed, {3}));
  server_ = std::make_unique<split::TrunkServer>(partition_);
  if (cfg_.transport == TransportKind::tcp) {
    service_ = std::make_unique<split::TcpTrunkService>(*server_);
    transport_ = std::make_unique<split::TcpTransport>("127.0.0.1", service_->port());
  } else {
    transport_ = std::make_unique<split::InProcessTransport>(*server_);
  }
  for (std::size_t i = 0; i < N; ++i) {
    clients_.emplace_back(partition_, static_cast<std::uint32_t>(i + 1), *transport_);
  }
  momentum_.momentum = cfg_.server_momentum;

  json config_record = to_json(cfg_);
  config_record["event"] = "config";
  json sizes = json::array();
  for (const auto& c : data_.clients) {
    sizes.push_back({{"client", c.client_id},
                     {"train", c.train.size()},
                     {"validation", c.validation.size()},
                     {"corrupted", c.corrupted}});
  }
  config_record["clients_data"] = sizes;
  config_record["test_samples"] = data_.test.size();
  emit(std::move(config_record));

  agg::GlobalModel global{split::client_params(init_), init_.server};
  double best_loss = std::numeric_limits<double>::infinity();

  for (std::uint32_t g = 1; g <= cfg_.global_epochs; ++g) {
    std::vector<LocalResult> locals;
    std::vector<agg::ClientSnapshot> snapshots;
    for (std::size_t i = 0; i < N; ++i) {
      locals.push_back(local_training(i, g, global));
      snapshots.push_back(locals.back().snapshot);
    }
    global = aggregate(g, snapshots, locals);

    // Broadcast: every client starts the next epoch from these weights.
    std::vector<double> val_losses;
    json held = json::array();
    for (std::size_t i = 0; i < N; ++i) {
      const auto losses = validation_losses(i, g, cfg_.local_epochs + 3, global);
      val_losses.push_back(std::accumulate(losses.begin(), losses.end(), 0.0) /
                           static_cast<double>(losses.size()));
      held.push_back(digest(merge_client(to_client_model(global.client))));
    }
    const double global_val = std::accumulate(val_losses.begin(), val_losses.end(), 0.0) /
                              static_cast<double>(N);
    emit({{"event", "global_epoch"},
          {"global_epoch", g},
          {"val_losses", val_losses},
          {"global_val_loss", global_val},
          {"client_digest", digest(global.client)},
          {"server_digest", digest(global.server)},
          {"held_digests", held}});
    if (global_val < best_loss) {
      best_loss = global_val;
      result_.best_epoch = g;
      result_.best = global;
    }
    result_.epoch_models.push_back(global);
  }
  emit({{"event", "best_global"}, {"global_epoch", result_.best_epoch}, {"global_val_loss", best_loss}});

  const auto mono = split::assemble_monolithic(
      partition_, split::with_client_params(partition_, result_.best.client, result_.best.server));
  result_.report = metrics::evaluate_global(mono.network, mono.params, data_.test);
  const auto& r = result_.report;
  emit({{"event", "report"},
        {"loss", r.loss},
        {"accuracy", r.accuracy},
        {"ZP", optional_json(r.jaccard[0])},
        {"TE", optional_json(r.jaccard[1])},
        {"ICM", optional_json(r.jaccard[2])},
        {"BL", optional_json(r.jaccard[3])},
        {"test_samples", r.samples}});

  clients_.clear();
  transport_.reset();
  if (service_) service_->stop();
  return std::move(result_);
}

}  // namespace

std::string_view to_string(TransportKind t) { return t == TransportKind::tcp ? "tcp" : "inproc"; }

TransportKind parse_transport(std::string_view name) {
  if (name == "inproc") return TransportKind::inproc;
  if (name == "tcp") return TransportKind::tcp;
  throw ConfigError("transport: expected inproc or tcp, got '" + std::string(name) + "'");
}

std::vector<std::size_t> RunConfig::resolved_counts() const {
  if (!client_counts.empty()) return client_counts;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < clients; ++i) out.push_back(kReferenceCounts[i % kReferenceCounts.size()] / 5);
  return out;
}

void RunConfig::validate() const {
  if (clients < 1) throw ConfigError("clients: must be >= 1");
  if (!client_counts.empty() && client_counts.size() != clients) {
    throw ConfigError("client_counts: " + std::to_string(client_counts.size()) +
                      " entries for " + std::to_string(clients) + " clients");
  }
  if (global_epochs < 1) throw ConfigError("global_epochs: must be >= 1");
  if (local_epochs < 1) throw ConfigError("local_epochs: must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate: must be a finite value >= 0");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum: must lie in [0, 1)");
  if (!(server_momentum >= 0.0 && server_momentum < 1.0)) {
    throw ConfigError("server_momentum: must lie in [0, 1)");
  }
  if (image_size < 16 || image_size % 4 != 0) {
    throw ConfigError("image_size: must be a multiple of 4 and >= 16");
  }
  std::vector<bool> seen(clients + 1, false);
  for (auto id : corrupt_ids) {
    if (id < 1 || id > clients) {
      throw ConfigError("corrupt_ids: client id " + std::to_string(id) + " outside 1.." +
                        std::to_string(clients));
    }
    if (seen[id]) throw ConfigError("corrupt_ids: client id " + std::to_string(id) + " repeated");
    seen[id] = true;
  }
  data::validate(corruption);
}

json to_json(const RunConfig& c) {
  json corruption_order = json::array();
  for (auto p : c.corruption.precedence) corruption_order.push_back(data::class_name(p));
  return {{"clients", c.clients},
          {"client_counts", c.resolved_counts()},
          {"samples", c.samples},
          {"image_size", c.image_size},
          {"global_epochs", c.global_epochs},
          {"local_epochs", c.local_epochs},
          {"learning_rate", c.learning_rate},
          {"momentum", c.momentum},
          {"batch_size", c.batch_size},
          {"strategy", agg::to_string(c.strategy)},
          {"server_momentum", c.server_momentum},
          {"std", c.std_convention == agg::StdConvention::population ? "population" : "sample"},
          {"seed", c.seed},
          {"filters", c.arch.down_filters},
          {"bottleneck", c.arch.bottleneck_filters},
          {"convs_per_block", c.arch.convs_per_block},
          {"batchnorm", c.arch.batchnorm},
          {"skip_connections", c.arch.skip_connections},
          {"corrupt_ids", c.corrupt_ids},
          {"radius", c.corruption.radius},
          {"precedence", corruption_order},
          {"noise", c.generator.noise},
          {"transport", to_string(c.transport)}};
}

std::string TrainingLog::to_jsonl() const {
  std::string out;
  for (const auto& r : records) {
    out += r.dump();
    out += '\n';
  }
  return out;
}

std::vector<std::uint32_t> corruption_order(std::span<const std::size_t> counts, std::uint64_t seed) {
  std::vector<std::uint32_t> ids(counts.size());
  std::iota(ids.begin(), ids.end(), 1u);
  std::vector<std::uint64_t> key(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) key[i] = derive_seed(seed, {0xc0, i + 1});
  std::stable_sort(ids.begin(), ids.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (counts[a - 1] != counts[b - 1]) return counts[a - 1] > counts[b - 1];
    return key[a - 1] < key[b - 1];
  });
  return ids;
}

RunResult run(const RunConfig& config, const RunHooks& hooks) {
  Runner runner(config, hooks);
  return runner.execute();
}

}  // namespace qasf::orch
