#include "qasf/boundary.hpp"

#include <charconv>
#include <cstring>
#include <tuple>

#include "qasf/bytes.hpp"
#include "qasf/errors.hpp"
#include "qasf/serialize.hpp"

namespace qasf::split {

std::string_view to_string(MessageKind kind) {
  switch (kind) {
    case MessageKind::fe_activations: return "fe-activations";
    case MessageKind::server_activations: return "server-activations";
    case MessageKind::be_gradients: return "be-gradients";
    case MessageKind::server_gradients: return "server-gradients";
    case MessageKind::weights_upload: return "weights-upload";
    case MessageKind::global_broadcast: return "global-broadcast";
    case MessageKind::control: return "control";
  }
  return "?";
}

bool round_follows(const Round& prev, const Round& next) {
  return std::tie(prev.global_epoch, prev.local_epoch, prev.batch) <
         std::tie(next.global_epoch, next.local_epoch, next.batch);
}

std::string skip_segment(std::size_t source_layer) {
  return "skip." + std::to_string(source_layer);
}

bool parse_skip_segment(std::string_view name, std::size_t& source_layer) {
  constexpr std::string_view prefix = "skip.";
  if (name.substr(0, prefix.size()) != prefix || name.size() == prefix.size()) return false;
  const char* first = name.data() + prefix.size();
  const char* last = name.data() + name.size();
  auto [ptr, ec] = std::from_chars(first, last, source_layer);
  return ec == std::errc{} && ptr == last;
}

namespace {

void check_kind(std::uint8_t k) {
  if (k < static_cast<std::uint8_t>(MessageKind::fe_activations) ||
      k > static_cast<std::uint8_t>(MessageKind::control)) {
    throw ProtocolError("unknown message kind " + std::to_string(k));
  }
}

}  // namespace

std::string encode(const BoundaryMessage& msg) {
  const std::string payload = nn::serialize(msg.payload);
  ByteWriter w;
  w.raw(std::string_view(kWireMagic.data(), kWireMagic.size()));
  w.u8(static_cast<std::uint8_t>(msg.kind));
  w.u32(msg.round.global_epoch);
  w.u32(msg.round.client);
  w.u32(msg.round.local_epoch);
  w.u32(msg.round.batch);
  w.u64(payload.size());
  w.raw(payload);
  return w.take();
}

std::uint64_t payload_length(std::string_view header) {
  if (header.size() < kWireHeaderSize) throw ProtocolError("truncated frame header");
  if (std::memcmp(header.data(), kWireMagic.data(), kWireMagic.size()) != 0) {
    throw ProtocolError("bad frame magic");
  }
  ByteReader r(header.substr(4, kWireHeaderSize - 4));
  check_kind(r.u8());
  for (int i = 0; i < 4; ++i) r.u32();
  return r.u64();
}

BoundaryMessage decode(std::string_view frame) {
  const std::uint64_t len = payload_length(frame);
  if (frame.size() - kWireHeaderSize != len) {
    throw ProtocolError("frame length does not match its header");
  }
  ByteReader r(frame.substr(4));
  BoundaryMessage msg;
  msg.kind = static_cast<MessageKind>(r.u8());
  msg.round.global_epoch = r.u32();
  msg.round.client = r.u32();
  msg.round.local_epoch = r.u32();
  msg.round.batch = r.u32();
  r.u64();
  msg.payload = nn::deserialize(frame.substr(kWireHeaderSize));
  return msg;
}

}  // namespace qasf::split
