#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "qasf/bytes.hpp"
#include "qasf/param_vector.hpp"

namespace qasf::nn {

// Named-segment binary format:
//   u32 segment count
//   per segment: u32 name length, UTF-8 name, u32 rank, rank x u64 dims,
//                product(dims) x f64 (little-endian)
void write_params(ByteWriter& out, const ParamVector& params);
ParamVector read_params(ByteReader& in);

std::string serialize(const ParamVector& params);
ParamVector deserialize(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const ParamVector& params);
ParamVector load_checkpoint(const std::filesystem::path& path);

// SHA-256 of the serialized form, lowercase hex.
std::string digest(const ParamVector& params);

}  // namespace qasf::nn
