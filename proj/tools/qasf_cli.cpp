// Command-line driver: single runs and corruption sweeps.
#include <CLI11.hpp>

#include <iostream>

#include "qasf/errors.hpp"
#include "qasf/experiment.hpp"
#include "qasf/serialize.hpp"

using namespace qasf;

namespace {

struct Options {
  orch::RunConfig cfg;
  std::string strategy = "qa-splitfed";
  std::string transport = "inproc";
  std::string std_convention = "population";
  std::vector<int> filters{8, 16};
  std::vector<std::uint32_t> corrupt_ids;
  std::string out = "runs";
  std::string run_name;
  std::string config;
  bool quiet = false;
};

// CLI11 only reads config files for the top-level app, so subcommands apply theirs here.
// Flags given on the command line win over file values.
void apply_config(CLI::App& app, const std::string& path) {
  if (path.empty()) return;
  for (const auto& item : CLI::ConfigINI().from_file(path)) {
    if (!item.parents.empty() && item.parents != std::vector<std::string>{app.get_name()}) {
      throw ConfigError("config: unexpected section '" + item.parents.front() + "' in " + path);
    }
    auto* opt = app.get_option_no_throw("--" + item.name);
    if (opt == nullptr || item.name == "config") {
      throw ConfigError("config: unknown key '" + item.name + "' in " + path);
    }
    if (opt->count() > 0) continue;
    opt->add_result(item.inputs);
    opt->run_callback();
  }
}

void add_common(CLI::App& app, Options& o) {
  app.add_option("--config", o.config, "key = value configuration file (TOML/INI)");
  auto& c = o.cfg;
  app.add_option("--clients", c.clients, "number of clients")->capture_default_str();
  app.add_option("--client-counts", c.client_counts,
                 "samples per client (default: 210/120/85/180/120 divided by 5)");
  app.add_option("--samples", c.samples, "synthetic pool size")->capture_default_str();
  app.add_option("--image-size", c.image_size, "image height and width")->capture_default_str();
  app.add_option("--global-epochs", c.global_epochs, "global epochs G")->capture_default_str();
  app.add_option("--local-epochs", c.local_epochs, "local epochs E")->capture_default_str();
  app.add_option("--learning-rate", c.learning_rate, "SGD learning rate")->capture_default_str();
  app.add_option("--momentum", c.momentum, "client/server SGD momentum")->capture_default_str();
  app.add_option("--batch-size", c.batch_size, "mini-batch size, 0 = whole client set")
      ->capture_default_str();
  app.add_option("--filters", o.filters, "filters per down block")->capture_default_str();
  app.add_option("--bottleneck", c.arch.bottleneck_filters, "bottleneck filters")
      ->capture_default_str();
  app.add_option("--convs-per-block", c.arch.convs_per_block, "conv units per block")
      ->capture_default_str();
  app.add_option("--batchnorm", c.arch.batchnorm, "batch normalization on/off")
      ->capture_default_str();
  app.add_option("--server-momentum", c.server_momentum, "FedAVG-M server momentum")
      ->capture_default_str();
  app.add_option("--std", o.std_convention, "loss std convention")
      ->check(CLI::IsMember({"population", "sample"}))
      ->capture_default_str();
  app.add_option("--corrupt-ids", o.corrupt_ids,
                 "client ids to corrupt, in order (overrides the most-data-first choice)");
  app.add_option("--radius", c.corruption.radius, "dilation radius in pixels")
      ->capture_default_str();
  app.add_option("--noise", c.generator.noise, "image noise std")->capture_default_str();
  app.add_option("--seed", c.seed, "root seed")->capture_default_str();
  app.add_option("--transport", o.transport, "client/server transport")
      ->check(CLI::IsMember({"inproc", "tcp"}))
      ->capture_default_str();
  app.add_option("--out", o.out, "output root directory")->capture_default_str();
  app.add_option("--run-name", o.run_name, "run directory name (default: timestamp)");
  app.add_flag("--quiet", o.quiet, "no progress on stderr");
}

void finish(Options& o) {
  o.cfg.strategy = agg::parse_strategy(o.strategy);
  o.cfg.transport = orch::parse_transport(o.transport);
  o.cfg.std_convention =
      o.std_convention == "sample" ? agg::StdConvention::sample : agg::StdConvention::population;
  o.cfg.arch.down_filters = o.filters;
}

int do_run(Options& o, std::optional<std::size_t> corrupted) {
  finish(o);
  auto& cfg = o.cfg;
  if (!o.corrupt_ids.empty()) {
    if (corrupted && *corrupted != o.corrupt_ids.size()) {
      throw ConfigError("corrupted: " + std::to_string(*corrupted) + " does not match the " +
                        std::to_string(o.corrupt_ids.size()) + " ids in corrupt-ids");
    }
    cfg.corrupt_ids = o.corrupt_ids;
  } else {
    cfg = exp::cell_config(cfg, cfg.strategy, corrupted.value_or(0), {});
  }
  cfg.validate();
  const auto dir = exp::make_run_dir(o.out, o.run_name);

  orch::RunHooks hooks;
  if (!o.quiet) {
    hooks.on_record = [](const nlohmann::json& r) {
      if (r.at("event") == "global_epoch") {
        std::cerr << "global epoch " << r.at("global_epoch") << ": validation loss "
                  << r.at("global_val_loss").get<double>() << '\n';
      }
    };
  }
  const auto result = orch::run(cfg, hooks);

  exp::Row row{cfg.strategy, cfg.corrupt_ids.size(), result.report, 1};
  exp::write_text(dir / "report.csv", exp::csv_header() + exp::csv_row(row));
  exp::write_text(dir / "training_log.jsonl", result.log.to_jsonl());
  exp::write_text(dir / "config.json", orch::to_json(cfg).dump(2) + "\n");
  std::filesystem::create_directories(dir / "checkpoints");
  nn::save_checkpoint(dir / "checkpoints" / "best_client.qsf", result.best.client);
  nn::save_checkpoint(dir / "checkpoints" / "best_server.qsf", result.best.server);
  std::cout << dir.string() << '\n';
  return 0;
}

int do_sweep(Options& o, std::vector<std::string> strategies, std::vector<std::size_t> ks,
             std::size_t repeats, std::size_t jobs) {
  finish(o);
  exp::SweepConfig sc;
  sc.base = o.cfg;
  for (const auto& s : strategies) sc.strategies.push_back(agg::parse_strategy(s));
  if (ks.empty()) {
    for (std::size_t k = 0; k <= o.cfg.clients; ++k) ks.push_back(k);
  }
  sc.ks = ks;
  sc.repeats = repeats;
  sc.jobs = jobs;
  sc.corrupt_order = o.corrupt_ids;
  const auto dir = exp::make_run_dir(o.out, o.run_name);
  std::function<void(const std::string&)> progress;
  if (!o.quiet) progress = [](const std::string& line) { std::cerr << line << '\n'; };
  const auto rows = exp::sweep(sc, progress);
  exp::write_text(dir / "sweep.csv", exp::rows_csv(rows));
  exp::write_text(dir / "plot_data.txt", exp::plot_data(rows));
  auto config = orch::to_json(sc.base);
  config["strategies"] = strategies;
  config["corrupted"] = ks;
  config["repeats"] = repeats;
  exp::write_text(dir / "config.json", config.dump(2) + "\n");
  std::cout << dir.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Split-federated training with quality-aware model averaging"};
  app.require_subcommand(1);

  Options run_opts;
  std::optional<std::size_t> corrupted;
  auto* run = app.add_subcommand("run", "train once and evaluate on the clean test set");
  add_common(*run, run_opts);
  run->add_option("--strategy", run_opts.strategy, "naive | fedavg | fedavg-m | qa-splitfed")
      ->capture_default_str();
  run->add_option("--corrupted", corrupted, "number of corrupted clients (most data first)");

  Options sweep_opts;
  std::vector<std::string> strategies{"naive", "fedavg", "fedavg-m", "qa-splitfed"};
  std::vector<std::size_t> ks;
  std::size_t repeats = 1, jobs = 1;
  auto* sw = app.add_subcommand("sweep", "accuracy versus number of corrupted clients");
  add_common(*sw, sweep_opts);
  sw->add_option("--strategies,--strategy", strategies, "strategies to compare")
      ->capture_default_str();
  sw->add_option("--corrupted", ks, "corrupted-client counts (default 0..clients)");
  sw->add_option("--repeats", repeats, "seeds per cell, averaged")->capture_default_str();
  sw->add_option("--jobs", jobs, "cells run in parallel")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*run) {
      apply_config(*run, run_opts.config);
      return do_run(run_opts, corrupted);
    }
    apply_config(*sw, sweep_opts.config);
    return do_sweep(sweep_opts, strategies, ks, repeats, jobs);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
