#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace qasf {

using Rng = std::mt19937_64;

// Derives an independent stream seed from a root seed and a path of tags
// (client id, epoch, sample index, ...). splitmix64 mixing per step.
std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> tags);

}  // namespace qasf
