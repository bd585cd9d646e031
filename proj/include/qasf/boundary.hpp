#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

#include "qasf/param_vector.hpp"

namespace qasf::split {

enum class MessageKind : std::uint8_t {
  fe_activations = 1,
  server_activations = 2,
  be_gradients = 3,
  server_gradients = 4,
  weights_upload = 5,
  global_broadcast = 6,
  control = 7,
};

std::string_view to_string(MessageKind kind);

struct Round {
  std::uint32_t global_epoch = 0;
  std::uint32_t client = 0;
  std::uint32_t local_epoch = 0;
  std::uint32_t batch = 0;

  friend bool operator==(const Round&, const Round&) = default;
};

// True when `next` strictly follows `prev` on (global_epoch, local_epoch, batch).
bool round_follows(const Round& prev, const Round& next);

/// A tensor or weight set crossing the client/server split. Tensor payloads
/// use the segment names below; skip tensors carry their source layer index.
struct BoundaryMessage {
  MessageKind kind = MessageKind::control;
  Round round;
  nn::ParamVector payload;
};

inline constexpr std::string_view kMainSegment = "main";
std::string skip_segment(std::size_t source_layer);
// Parses "skip.<n>"; returns false for other names.
bool parse_skip_segment(std::string_view name, std::size_t& source_layer);

inline constexpr std::array<char, 4> kWireMagic{'Q', 'S', 'F', '1'};
inline constexpr std::size_t kWireHeaderSize = 4 + 1 + 4 * 4 + 8;

// 4-byte magic, u8 kind, four u32 round fields, u64 payload length, payload
// in the named-segment parameter format. Little-endian throughout.
std::string encode(const BoundaryMessage& msg);
BoundaryMessage decode(std::string_view frame);
// Payload length announced by a frame header; validates magic and kind.
std::uint64_t payload_length(std::string_view header);

}  // namespace qasf::split
