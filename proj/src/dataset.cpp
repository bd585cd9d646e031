#include "qasf/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>

#include "qasf/bytes.hpp"
#include "qasf/errors.hpp"
#include "qasf/rng.hpp"

namespace qasf::data {

namespace {

constexpr std::array<double, kClassCount> kIntensity{0.10, 0.80, 0.60, 0.45, 0.25};

std::vector<double> blur3(const std::vector<double>& img, std::size_t h, std::size_t w) {
  static constexpr double k[3] = {0.25, 0.5, 0.25};
  std::vector<double> tmp(img.size()), out(img.size());
  auto clampi = [](long v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<long>(v, 0, static_cast<long>(n) - 1));
  };
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (int d = -1; d <= 1; ++d) s += k[d + 1] * img[y * w + clampi(long(x) + d, w)];
      tmp[y * w + x] = s;
    }
  }
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (int d = -1; d <= 1; ++d) s += k[d + 1] * tmp[clampi(long(y) + d, h) * w + x];
      out[y * w + x] = s;
    }
  }
  return out;
}

bool draw_sample(Rng& rng, std::size_t h, std::size_t w, const GeneratorConfig& config,
                 SegSample& sample) {
  using std::numbers::pi;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  const double s = static_cast<double>(std::min(h, w));
  const double cx = 0.5 * static_cast<double>(w) + uni(-0.06, 0.06) * s;
  const double cy = 0.5 * static_cast<double>(h) + uni(-0.06, 0.06) * s;
  const double a = s * uni(0.36, 0.42);
  const double b = a * uni(0.85, 1.0);
  const double theta = uni(0.0, pi);
  const double mean_axis = 0.5 * (a + b);
  const double zp_in = 1.0 - s * uni(0.07, 0.09) / mean_axis;
  const double te_in = zp_in - s * uni(0.07, 0.09) / mean_axis;
  const double amp2 = uni(0.0, 0.04), amp3 = uni(0.0, 0.03);
  const double ph2 = uni(0.0, 2 * pi), ph3 = uni(0.0, 2 * pi);
  const double icm_r = s * uni(0.10, 0.13);
  const double alpha = uni(0.0, 2 * pi);
  const double icm_rho = te_in - 0.6 * icm_r / mean_axis;
  const double icm_u = a * icm_rho * std::cos(alpha);
  const double icm_v = b * icm_rho * std::sin(alpha);
  const double brightness = uni(-0.03, 0.03);

  const double ct = std::cos(theta), st = std::sin(theta);
  sample.height = h;
  sample.width = w;
  sample.mask.assign(h * w, background);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double u = dx * ct + dy * st;
      const double v = -dx * st + dy * ct;
      const double phi = std::atan2(v / b, u / a);
      const double wobble = 1.0 + amp2 * std::cos(2 * phi + ph2) + amp3 * std::cos(3 * phi + ph3);
      const double rho = std::hypot(u / a, v / b) / wobble;
      std::uint8_t label = background;
      if (rho <= te_in) {
        label = std::hypot(u - icm_u, v - icm_v) <= icm_r ? icm : bl;
      } else if (rho <= zp_in) {
        label = te;
      } else if (rho <= 1.0) {
        label = zp;
      }
      sample.mask[y * w + x] = label;
    }
  }

  std::array<std::size_t, kClassCount> counts{};
  for (auto l : sample.mask) ++counts[l];
  const double need = config.min_class_share * static_cast<double>(h * w);
  for (auto c : counts) {
    if (static_cast<double>(c) < need) return false;
  }

  std::vector<double> clean(h * w);
  for (std::size_t i = 0; i < clean.size(); ++i) clean[i] = kIntensity[sample.mask[i]] + brightness;
  sample.image = blur3(clean, h, w);
  std::normal_distribution<double> noise(0.0, config.noise);
  for (auto& p : sample.image) p = std::clamp(p + (config.noise > 0 ? noise(rng) : 0.0), 0.0, 1.0);
  return true;
}

void check_mask(std::span<const std::uint8_t> mask, std::size_t height, std::size_t width) {
  if (mask.size() != height * width) {
    throw DataError("mask has " + std::to_string(mask.size()) + " pixels, expected " +
                    std::to_string(height) + "x" + std::to_string(width));
  }
  for (auto l : mask) {
    if (l >= kClassCount) throw DataError("mask class " + std::to_string(l) + " out of range");
  }
}

std::vector<std::size_t> boundary_pixels(std::span<const std::uint8_t> mask, std::size_t h,
                                         std::size_t w, std::uint8_t c) {
  std::vector<std::size_t> out;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (mask[y * w + x] != c) continue;
      const bool edge = (x > 0 && mask[y * w + x - 1] != c) || (x + 1 < w && mask[y * w + x + 1] != c) ||
                        (y > 0 && mask[(y - 1) * w + x] != c) || (y + 1 < h && mask[(y + 1) * w + x] != c);
      if (edge) out.push_back(y * w + x);
    }
  }
  return out;
}

std::string sample_file(std::uint64_t id) { return "sample_" + std::to_string(id) + ".bin"; }

void write_sample(const std::filesystem::path& path, const SegSample& s) {
  ByteWriter out;
  out.raw("QSS1");
  out.u32(static_cast<std::uint32_t>(s.height));
  out.u32(static_cast<std::uint32_t>(s.width));
  out.u64(s.id);
  for (double p : s.image) out.f64(p);
  for (auto l : s.mask) out.u8(l);
  std::ofstream f(path, std::ios::binary);
  f.write(out.bytes().data(), static_cast<std::streamsize>(out.bytes().size()));
  if (!f) throw DataError("cannot write " + path.string());
}

SegSample read_sample(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read " + path.string());
  std::stringstream buf;
  buf << f.rdbuf();
  const std::string bytes = buf.str();
  try {
    ByteReader in(bytes);
    if (in.raw(4) != "QSS1") throw DataError("bad sample record magic in " + path.string());
    SegSample s;
    s.height = in.u32();
    s.width = in.u32();
    s.id = in.u64();
    const std::size_t n = s.height * s.width;
    if (n == 0 || in.remaining() != n * 9) throw DataError("bad sample record size in " + path.string());
    s.image.resize(n);
    for (auto& p : s.image) p = in.f64();
    s.mask.resize(n);
    for (auto& l : s.mask) l = in.u8();
    check_mask(s.mask, s.height, s.width);
    return s;
  } catch (const ProtocolError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace

std::string_view class_name(int label) {
  static constexpr std::array<std::string_view, kClassCount> names{"background", "ZP", "TE", "ICM",
                                                                   "BL"};
  if (label < 0 || label >= kClassCount) throw DataError("class id out of range");
  return names[static_cast<std::size_t>(label)];
}

std::vector<SegSample> generate_synthetic(std::uint64_t seed, std::size_t count, std::size_t height,
                                          std::size_t width, const GeneratorConfig& config) {
  if (height < 16 || width < 16) throw ConfigError("synthetic images need H, W >= 16");
  if (config.noise < 0.0) throw ConfigError("generator noise must be nonnegative");
  if (config.max_attempts < 1) throw ConfigError("generator needs at least one attempt");
  std::vector<SegSample> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    bool ok = false;
    for (int attempt = 0; attempt < config.max_attempts && !ok; ++attempt) {
      Rng rng(derive_seed(seed, {0x5e65, i, static_cast<std::uint64_t>(attempt)}));
      ok = draw_sample(rng, height, width, config, out[i]);
    }
    if (!ok) {
      throw DataError("sample " + std::to_string(i) + " has a collapsed class after " +
                      std::to_string(config.max_attempts) + " attempts");
    }
    out[i].id = i;
  }
  return out;
}

std::size_t validation_count(std::size_t client_count) { return (15 * client_count) / 100; }

Partition partition_clients(std::vector<SegSample> samples, std::span<const std::size_t> counts,
                            std::uint64_t seed) {
  std::size_t total = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] == 0) throw ConfigError("client " + std::to_string(i + 1) + " has no samples");
    total += counts[i];
  }
  if (total > samples.size()) {
    throw ConfigError("client counts need " + std::to_string(total) + " samples but the pool has " +
                      std::to_string(samples.size()));
  }
  Rng rng(derive_seed(seed, {0x9a27}));
  std::shuffle(samples.begin(), samples.end(), rng);

  Partition p;
  auto next = samples.begin();
  for (std::size_t i = 0; i < counts.size(); ++i) {
    ClientDataset c;
    c.client_id = static_cast<std::uint32_t>(i + 1);
    const std::size_t val = validation_count(counts[i]);
    const auto train_end = next + static_cast<std::ptrdiff_t>(counts[i] - val);
    const auto val_end = train_end + static_cast<std::ptrdiff_t>(val);
    c.train.assign(std::make_move_iterator(next), std::make_move_iterator(train_end));
    c.validation.assign(std::make_move_iterator(train_end), std::make_move_iterator(val_end));
    next = val_end;
    p.clients.push_back(std::move(c));
  }
  p.test.assign(std::make_move_iterator(next), std::make_move_iterator(samples.end()));
  return p;
}

void validate(const CorruptionSpec& spec) {
  if (spec.radius < 1) throw ConfigError("corruption radius must be >= 1");
  std::array<bool, kClassCount> seen{};
  for (auto c : spec.precedence) {
    if (c == background || c >= kClassCount || seen[c]) {
      throw ConfigError("corruption precedence must order ZP, TE, ICM and BL exactly once each");
    }
    seen[c] = true;
  }
  if (spec.dilate[background]) throw ConfigError("background cannot be dilated");
}

std::vector<std::pair<int, int>> disk_offsets(int radius) {
  std::vector<std::pair<int, int>> out;
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) {
      if (dx * dx + dy * dy <= radius * radius) out.emplace_back(dx, dy);
    }
  }
  return out;
}

std::vector<std::uint8_t> corrupt_mask(std::span<const std::uint8_t> mask, std::size_t height,
                                       std::size_t width, const CorruptionSpec& spec) {
  validate(spec);
  check_mask(mask, height, width);
  const long h = static_cast<long>(height), w = static_cast<long>(width), r = spec.radius;
  std::vector<long> half(static_cast<std::size_t>(2 * r + 1));
  for (long dy = -r; dy <= r; ++dy) {
    long hw = static_cast<long>(std::sqrt(static_cast<double>(r * r - dy * dy)));
    while (hw * hw > r * r - dy * dy) --hw;
    while ((hw + 1) * (hw + 1) <= r * r - dy * dy) ++hw;
    half[static_cast<std::size_t>(dy + r)] = hw;
  }

  std::vector<std::uint8_t> out(mask.size(), background);
  // Lowest precedence first, so higher classes overwrite.
  for (auto it = spec.precedence.rbegin(); it != spec.precedence.rend(); ++it) {
    const std::uint8_t c = *it;
    for (long y = 0; y < h; ++y) {
      for (long x = 0; x < w; ++x) {
        if (mask[static_cast<std::size_t>(y * w + x)] != c) continue;
        if (!spec.dilate[c]) {
          out[static_cast<std::size_t>(y * w + x)] = c;
          continue;
        }
        for (long dy = -r; dy <= r; ++dy) {
          const long yy = y + dy;
          if (yy < 0 || yy >= h) continue;
          const long hw = half[static_cast<std::size_t>(dy + r)];
          const long x0 = std::max(0L, x - hw), x1 = std::min(w - 1, x + hw);
          std::fill(out.begin() + yy * w + x0, out.begin() + yy * w + x1 + 1, c);
        }
      }
    }
  }
  return out;
}

void corrupt_client(ClientDataset& client, const CorruptionSpec& spec) {
  for (auto* set : {&client.train, &client.validation}) {
    for (auto& s : *set) s.mask = corrupt_mask(s.mask, s.height, s.width, spec);
  }
  client.corrupted = true;
}

double mean_boundary_shift(std::span<const std::uint8_t> original,
                           std::span<const std::uint8_t> corrupted, std::size_t height,
                           std::size_t width) {
  check_mask(original, height, width);
  check_mask(corrupted, height, width);
  double total = 0.0;
  std::size_t n = 0;
  for (std::uint8_t c = 1; c < kClassCount; ++c) {
    const auto from = boundary_pixels(original, height, width, c);
    const auto to = boundary_pixels(corrupted, height, width, c);
    if (from.empty() || to.empty()) continue;
    for (auto p : from) {
      const double px = static_cast<double>(p % width), py = static_cast<double>(p / width);
      double best = INFINITY;
      for (auto q : to) {
        best = std::min(best, std::hypot(px - static_cast<double>(q % width),
                                         py - static_cast<double>(q / width)));
      }
      total += best;
      ++n;
    }
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

nn::Tensor batch_images(std::span<const SegSample> samples) {
  if (samples.empty()) throw DataError("empty sample batch");
  const std::size_t h = samples.front().height, w = samples.front().width;
  std::vector<double> data;
  data.reserve(samples.size() * h * w);
  for (const auto& s : samples) {
    if (s.height != h || s.width != w) throw DataError("mixed image sizes in one batch");
    data.insert(data.end(), s.image.begin(), s.image.end());
  }
  return nn::Tensor({samples.size(), 1, h, w}, std::move(data));
}

std::vector<std::uint8_t> batch_labels(std::span<const SegSample> samples) {
  std::vector<std::uint8_t> out;
  for (const auto& s : samples) out.insert(out.end(), s.mask.begin(), s.mask.end());
  return out;
}

void export_partition(const std::filesystem::path& dir, const Partition& partition) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "qasf-dataset-1";
  auto ids = [&](const std::vector<SegSample>& set) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& s : set) {
      write_sample(dir / sample_file(s.id), s);
      list.push_back(s.id);
    }
    return list;
  };
  manifest["clients"] = nlohmann::json::array();
  for (const auto& c : partition.clients) {
    manifest["clients"].push_back({{"id", c.client_id},
                                   {"corrupted", c.corrupted},
                                   {"train", ids(c.train)},
                                   {"validation", ids(c.validation)}});
  }
  manifest["test"] = ids(partition.test);
  std::ofstream f(dir / "manifest.json");
  f << manifest.dump(2) << '\n';
  if (!f) throw DataError("cannot write " + (dir / "manifest.json").string());
}

Partition import_partition(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw DataError("no manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(f);
    if (manifest.at("format") != "qasf-dataset-1") throw DataError("unknown dataset format");
    auto load = [&](const nlohmann::json& list) {
      std::vector<SegSample> out;
      for (const auto& id : list) out.push_back(read_sample(dir / sample_file(id.get<std::uint64_t>())));
      return out;
    };
    Partition p;
    for (const auto& c : manifest.at("clients")) {
      ClientDataset cd;
      cd.client_id = c.at("id").get<std::uint32_t>();
      cd.corrupted = c.at("corrupted").get<bool>();
      cd.train = load(c.at("train"));
      cd.validation = load(c.at("validation"));
      p.clients.push_back(std::move(cd));
    }
    p.test = load(manifest.at("test"));
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest in " + dir.string() + ": " + e.what());
  }
}

}  // namespace qasf::data
