#include "qasf/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>

#include "qasf/errors.hpp"

namespace qasf::exp {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : "NA"; }

}  // namespace

orch::RunConfig cell_config(const orch::RunConfig& base, agg::Strategy strategy, std::size_t k,
                            std::span<const std::uint32_t> order) {
  orch::RunConfig c = base;
  c.strategy = strategy;
  const auto counts = base.resolved_counts();
  std::vector<std::uint32_t> ids(order.begin(), order.end());
  if (ids.empty()) ids = orch::corruption_order(counts, base.seed);
  if (k > ids.size()) {
    throw ConfigError("corrupted: " + std::to_string(k) + " corrupted clients requested but only " +
                      std::to_string(ids.size()) + " are available");
  }
  c.corrupt_ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k));
  return c;
}

metrics::Report average_reports(std::span<const metrics::Report> reports) {
  if (reports.empty()) throw DataError("no reports to average");
  metrics::Report out;
  std::array<double, 4> sum{};
  std::array<std::size_t, 4> n{};
  for (const auto& r : reports) {
    out.loss += r.loss;
    out.accuracy += r.accuracy;
    out.samples += r.samples;
    for (std::size_t c = 0; c < 4; ++c) {
      if (r.jaccard[c]) {
        sum[c] += *r.jaccard[c];
        ++n[c];
      }
    }
  }
  const double count = static_cast<double>(reports.size());
  out.loss /= count;
  out.accuracy /= count;
  for (std::size_t c = 0; c < 4; ++c) {
    if (n[c] > 0) out.jaccard[c] = sum[c] / static_cast<double>(n[c]);
  }
  return out;
}

std::vector<Row> sweep(const SweepConfig& config,
                       const std::function<void(const std::string&)>& progress) {
  if (config.strategies.empty()) throw ConfigError("strategies: at least one is required");
  if (config.ks.empty()) throw ConfigError("corrupted: at least one count is required");
  if (config.repeats < 1) throw ConfigError("repeats: must be >= 1");
  config.base.validate();

  struct Cell {
    std::size_t row;
    orch::RunConfig cfg;
  };
  std::vector<Row> rows;
  std::vector<Cell> cells;
  for (auto s : config.strategies) {
    for (auto k : config.ks) {
      rows.push_back({s, k, {}, config.repeats});
      for (std::size_t rep = 0; rep < config.repeats; ++rep) {
        orch::RunConfig base = config.base;
        base.seed = config.base.seed + rep;
        cells.push_back({rows.size() - 1, cell_config(base, s, k, config.corrupt_order)});
      }
    }
  }

  std::vector<metrics::Report> reports(cells.size());
  std::mutex mutex;
  std::size_t next = 0;
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      std::size_t idx;
      {
        std::lock_guard lock(mutex);
        if (next >= cells.size() || failure) return;
        idx = next++;
      }
      try {
        reports[idx] = orch::run(cells[idx].cfg).report;
        if (progress) {
          std::lock_guard lock(mutex);
          const auto& c = cells[idx].cfg;
          progress(std::string(agg::to_string(c.strategy)) + " k=" +
                   std::to_string(c.corrupt_ids.size()) + " seed=" + std::to_string(c.seed) +
                   " acc=" + fmt(reports[idx].accuracy));
        }
      } catch (...) {
        std::lock_guard lock(mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(config.jobs, cells.size()));
  std::vector<std::thread> threads;
  for (std::size_t j = 1; j < jobs; ++j) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  if (failure) std::rethrow_exception(failure);

  std::map<std::size_t, std::vector<metrics::Report>> grouped;
  for (std::size_t i = 0; i < cells.size(); ++i) grouped[cells[i].row].push_back(reports[i]);
  for (auto& [row, list] : grouped) rows[row].report = average_reports(list);
  return rows;
}

std::string csv_header() { return "strategy,k,loss,acc,ZP,TE,ICM,BL\n"; }

std::string csv_row(const Row& row) {
  const auto& r = row.report;
  return std::string(agg::to_string(row.strategy)) + "," + std::to_string(row.k) + "," +
         fmt(r.loss) + "," + fmt(r.accuracy) + "," + fmt(r.jaccard[0]) + "," + fmt(r.jaccard[1]) +
         "," + fmt(r.jaccard[2]) + "," + fmt(r.jaccard[3]) + "\n";
}

std::string rows_csv(std::span<const Row> rows) {
  std::string out = csv_header();
  for (const auto& r : rows) out += csv_row(r);
  return out;
}

std::string plot_data(std::span<const Row> rows) {
  std::vector<agg::Strategy> order;
  for (const auto& r : rows) {
    if (std::find(order.begin(), order.end(), r.strategy) == order.end()) order.push_back(r.strategy);
  }
  std::string out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i > 0) out += "\n\n";
    out += "# " + std::string(agg::to_string(order[i])) + "\n# k accuracy\n";
    for (const auto& r : rows) {
      if (r.strategy == order[i]) out += std::to_string(r.k) + " " + fmt(r.report.accuracy) + "\n";
    }
  }
  return out;
}

std::filesystem::path make_run_dir(const std::filesystem::path& out, const std::string& name) {
  std::string dir = name;
  if (dir.empty()) {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "run-%Y%m%d-%H%M%S", &tm);
    dir = buf;
  }
  const auto path = out / dir;
  std::error_code ec;
  std::filesystem::create_directories(path, ec);
  if (ec) throw ConfigError("out: cannot create " + path.string() + ": " + ec.message());
  return path;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw ConfigError("cannot write " + path.string());
}

}  // namespace qasf::exp
