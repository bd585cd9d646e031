#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "qasf/tensor.hpp"

namespace qasf::data {

enum Label : std::uint8_t { background = 0, zp = 1, te = 2, icm = 3, bl = 4 };
inline constexpr int kClassCount = 5;

std::string_view class_name(int label);

struct SegSample {
  std::uint64_t id = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> image;       // row-major, values in [0, 1]
  std::vector<std::uint8_t> mask;  // row-major class ids

  friend bool operator==(const SegSample&, const SegSample&) = default;
};

struct GeneratorConfig {
  double noise = 0.06;              // std of the Gaussian texture noise
  double min_class_share = 0.01;    // every class must cover this share of pixels
  int max_attempts = 64;
};

/// Nested noisy ellipses: a ZP ring around a TE ring around the BL cavity,
/// with an ICM blob attached to the inner TE wall, on background.
/// Sample i depends only on (seed, i).
std::vector<SegSample> generate_synthetic(std::uint64_t seed, std::size_t count,
                                          std::size_t height, std::size_t width,
                                          const GeneratorConfig& config = {});

struct ClientDataset {
  std::uint32_t client_id = 0;  // 1-based
  std::vector<SegSample> train;
  std::vector<SegSample> validation;
  bool corrupted = false;
};

struct Partition {
  std::vector<ClientDataset> clients;
  std::vector<SegSample> test;
};

// validation = floor(15% of c), train = the rest; unassigned samples form
// the test set.
std::size_t validation_count(std::size_t client_count);

Partition partition_clients(std::vector<SegSample> samples, std::span<const std::size_t> counts,
                            std::uint64_t seed);

struct CorruptionSpec {
  int radius = 3;
  // Highest precedence first.
  std::array<std::uint8_t, 4> precedence{icm, te, zp, bl};
  // Indexed by class id; background is never dilated.
  std::array<bool, kClassCount> dilate{false, true, true, true, true};
};

void validate(const CorruptionSpec& spec);

// The offsets {(dx, dy) : dx² + dy² ≤ r²}.
std::vector<std::pair<int, int>> disk_offsets(int radius);

std::vector<std::uint8_t> corrupt_mask(std::span<const std::uint8_t> mask, std::size_t height,
                                       std::size_t width, const CorruptionSpec& spec);

// Corrupts every train and validation mask of the client.
void corrupt_client(ClientDataset& client, const CorruptionSpec& spec);

// Mean Euclidean distance from each boundary pixel of a foreground class in
// `original` to the nearest boundary pixel of that class in `corrupted`.
double mean_boundary_shift(std::span<const std::uint8_t> original,
                           std::span<const std::uint8_t> corrupted, std::size_t height,
                           std::size_t width);

// (N, 1, H, W) image batch and the matching N*H*W labels.
nn::Tensor batch_images(std::span<const SegSample> samples);
std::vector<std::uint8_t> batch_labels(std::span<const SegSample> samples);

// A directory of per-sample binary records and a manifest.json describing
// client assignment, splits and corruption flags.
void export_partition(const std::filesystem::path& dir, const Partition& partition);
Partition import_partition(const std::filesystem::path& dir);

}  // namespace qasf::data
