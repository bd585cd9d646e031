#include "qasf/bytes.hpp"

#include <bit>
#include <cstring>

#include "qasf/errors.hpp"

namespace qasf {

static_assert(std::endian::native == std::endian::little,
              "wire formats assume a little-endian host");

void ByteWriter::u32(std::uint32_t v) {
  char buf[4];
  std::memcpy(buf, &v, 4);
  out_.append(buf, 4);
}

void ByteWriter::u64(std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out_.append(buf, 8);
}

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteReader::need(std::size_t n) const {
  if (remaining() < n) {
    throw ProtocolError("truncated input: need " + std::to_string(n) + " bytes, have " +
                        std::to_string(remaining()));
  }
}

std::uint8_t ByteReader::u8() {
  need(1);
  return static_cast<std::uint8_t>(in_[pos_++]);
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v;
  std::memcpy(&v, in_.data() + pos_, 4);
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v;
  std::memcpy(&v, in_.data() + pos_, 8);
  pos_ += 8;
  return v;
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string_view ByteReader::raw(std::size_t n) {
  need(n);
  auto out = in_.substr(pos_, n);
  pos_ += n;
  return out;
}

}  // namespace qasf
