#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "qasf/dataset.hpp"
#include "qasf/network.hpp"

namespace qasf::metrics {

// Share of equal pixels. Throws DataError on a size mismatch.
double pixel_accuracy(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

// |pred_c ∩ gt_c| / |pred_c ∪ gt_c|; nullopt when the class is absent from both.
std::optional<double> jaccard(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt,
                              int label);

struct Report {
  double loss = 0.0;
  double accuracy = 0.0;
  // ZP, TE, ICM, BL. Per-sample N/A values are left out of the means; the
  // mean itself is N/A when no sample defines it.
  std::array<std::optional<double>, 4> jaccard{};
  std::size_t samples = 0;
};

// Per-sample means from predictions and losses already computed for `samples`.
Report summarize(std::span<const data::SegSample> samples, std::span<const std::uint8_t> prediction,
                 std::span<const double> per_sample_loss);

// Forwards the whole set through the monolithic network as one batch.
Report evaluate_global(const nn::Network& net, const nn::ParamVector& params,
                       std::span<const data::SegSample> test);

}  // namespace qasf::metrics
