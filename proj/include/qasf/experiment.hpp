#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "qasf/orchestrator.hpp"

namespace qasf::exp {

// Corrupts the first k clients of `order` (or of the most-data-first order
// when `order` is empty).
orch::RunConfig cell_config(const orch::RunConfig& base, agg::Strategy strategy, std::size_t k,
                            std::span<const std::uint32_t> order);

struct Row {
  agg::Strategy strategy = agg::Strategy::qa_splitfed;
  std::size_t k = 0;
  metrics::Report report;  // averaged over repeats
  std::size_t repeats = 0;
};

// Mean of each field; a Jaccard entry is averaged over the reports that
// define it and stays N/A when none does.
metrics::Report average_reports(std::span<const metrics::Report> reports);

struct SweepConfig {
  orch::RunConfig base;
  std::vector<agg::Strategy> strategies;
  std::vector<std::size_t> ks;
  std::size_t repeats = 1;  // seeds base.seed, base.seed + 1, ...
  std::size_t jobs = 1;
  std::vector<std::uint32_t> corrupt_order;  // empty = most data first
};

// Cells share seeds across strategies and k, so every comparison is paired.
std::vector<Row> sweep(const SweepConfig& config,
                       const std::function<void(const std::string&)>& progress = {});

std::string csv_header();
std::string csv_row(const Row& row);
std::string rows_csv(std::span<const Row> rows);
// One block per strategy of "k accuracy" lines, blocks separated by two
// blank lines (gnuplot index layout).
std::string plot_data(std::span<const Row> rows);

// Creates <out>/<name>, defaulting the name to a UTC timestamp.
std::filesystem::path make_run_dir(const std::filesystem::path& out, const std::string& name);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace qasf::exp
