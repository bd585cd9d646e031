#include "qasf/serialize.hpp"

#include <fstream>
#include <iterator>
#include <limits>

#include "qasf/digest.hpp"
#include "qasf/errors.hpp"

namespace qasf::nn {

void write_params(ByteWriter& out, const ParamVector& params) {
  out.u32(static_cast<std::uint32_t>(params.segment_count()));
  for (const auto& seg : params) {
    out.u32(static_cast<std::uint32_t>(seg.name.size()));
    out.raw(seg.name);
    const auto& shape = seg.value.shape();
    out.u32(static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) out.u64(d);
    for (double v : seg.value.data()) out.f64(v);
  }
}

ParamVector read_params(ByteReader& in) {
  ParamVector out;
  const std::uint32_t count = in.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(in.raw(in.u32()));
    const std::uint32_t rank = in.u32();
    if (rank == 0 || rank > 8) throw ProtocolError("segment '" + name + "': bad rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = in.u64();
      if (d == 0 || d > (std::numeric_limits<std::uint32_t>::max)()) {
        throw ProtocolError("segment '" + name + "': bad dimension");
      }
      n *= d;
    }
    if (n > in.remaining() / 8) throw ProtocolError("segment '" + name + "': payload truncated");
    std::vector<double> data(n);
    for (auto& v : data) v = in.f64();
    try {
      out.add(std::move(name), Tensor(std::move(shape), std::move(data)));
    } catch (const std::runtime_error& e) {
      throw ProtocolError(std::string("bad segment: ") + e.what());
    }
  }
  return out;
}

std::string serialize(const ParamVector& params) {
  ByteWriter w;
  write_params(w, params);
  return w.take();
}

ParamVector deserialize(std::string_view bytes) {
  ByteReader r(bytes);
  ParamVector out = read_params(r);
  if (!r.done()) throw ProtocolError("trailing bytes after parameter vector");
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const ParamVector& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ConfigError("cannot open checkpoint for writing: " + path.string());
  const std::string bytes = serialize(params);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw ConfigError("failed writing checkpoint: " + path.string());
}

ParamVector load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

std::string digest(const ParamVector& params) { return sha256_hex(serialize(params)); }

}  // namespace qasf::nn
