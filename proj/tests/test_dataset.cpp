#include <doctest.h>

#include <filesystem>
#include <set>

#include "qasf/dataset.hpp"
#include "qasf/errors.hpp"
#include "qasf/metrics.hpp"
#include "support.hpp"

using namespace qasf;
using namespace qasf::data;

namespace {

const std::vector<std::size_t> kDeskCounts{42, 24, 17, 36, 24};

std::vector<std::size_t> class_counts(std::span<const std::uint8_t> mask) {
  std::vector<std::size_t> c(kClassCount, 0);
  for (auto v : mask) ++c[v];
  return c;
}

int rank_of(const CorruptionSpec& spec, std::uint8_t label) {
  for (int i = 0; i < 4; ++i) {
    if (spec.precedence[std::size_t(i)] == label) return 4 - i;
  }
  return 0;  // background
}

}  // namespace

TEST_SUITE("generator") {
  TEST_CASE("same seed gives bit-identical samples") {
    CHECK(generate_synthetic(5, 6, 32, 32) == generate_synthetic(5, 6, 32, 32));
    CHECK_FALSE(generate_synthetic(5, 2, 32, 32) == generate_synthetic(6, 2, 32, 32));
  }

  TEST_CASE("sample i depends only on seed and i") {
    const auto few = generate_synthetic(9, 3, 24, 20);
    const auto many = generate_synthetic(9, 8, 24, 20);
    for (std::size_t i = 0; i < 3; ++i) CHECK(few[i] == many[i]);
  }

  TEST_CASE("count zero gives an empty list") { CHECK(generate_synthetic(1, 0, 32, 32).empty()); }

  TEST_CASE("every mask has all five classes with at least 1% of pixels") {
    for (std::size_t size : {16, 32, 48}) {
      for (const auto& s : generate_synthetic(3, 60, size, size)) {
        REQUIRE(s.mask.size() == size * size);
        REQUIRE(s.image.size() == size * size);
        const auto counts = class_counts(s.mask);
        for (int c = 0; c < kClassCount; ++c) CHECK(double(counts[std::size_t(c)]) >= 0.01 * double(size * size));
        for (double v : s.image) {
          CHECK(v >= 0.0);
          CHECK(v <= 1.0);
        }
      }
    }
  }

  TEST_CASE("class intensities are ordered as rendered") {
    // Mean brightness per class, before noise dominates: ZP > TE > ICM > BL > background.
    GeneratorConfig cfg;
    cfg.noise = 0.0;
    const auto samples = generate_synthetic(4, 10, 32, 32, cfg);
    std::array<double, kClassCount> sum{}, n{};
    for (const auto& s : samples) {
      for (std::size_t i = 0; i < s.mask.size(); ++i) {
        sum[s.mask[i]] += s.image[i];
        n[s.mask[i]] += 1;
      }
    }
    std::array<double, kClassCount> mean{};
    for (int c = 0; c < kClassCount; ++c) mean[std::size_t(c)] = sum[std::size_t(c)] / n[std::size_t(c)];
    CHECK(mean[zp] > mean[te]);
    CHECK(mean[te] > mean[icm]);
    CHECK(mean[icm] > mean[bl]);
    CHECK(mean[bl] > mean[background]);
  }

  TEST_CASE("invalid sizes and impossible shares") {
    CHECK_THROWS_AS(generate_synthetic(1, 1, 15, 32), ConfigError);
    CHECK_THROWS_AS(generate_synthetic(1, 1, 32, 8), ConfigError);
    GeneratorConfig cfg;
    cfg.min_class_share = 0.5;
    cfg.max_attempts = 3;
    CHECK_THROWS_AS(generate_synthetic(1, 1, 32, 32, cfg), DataError);
  }
}

TEST_SUITE("partition") {
  TEST_CASE("desk counts leave 17 test samples") {
    const auto p = partition_clients(generate_synthetic(1, 160, 16, 16), kDeskCounts, 7);
    REQUIRE(p.clients.size() == 5);
    CHECK(p.test.size() == 17);
    for (std::size_t i = 0; i < 5; ++i) {
      const auto& c = p.clients[i];
      CHECK(c.client_id == i + 1);
      CHECK(c.train.size() + c.validation.size() == kDeskCounts[i]);
      CHECK(c.validation.size() == kDeskCounts[i] * 15 / 100);
      CHECK_FALSE(c.corrupted);
    }
  }

  TEST_CASE("split rule on a single client of ten") {
    const auto p = partition_clients(generate_synthetic(1, 10, 16, 16), std::vector<std::size_t>{10}, 1);
    CHECK(p.clients[0].train.size() == 9);
    CHECK(p.clients[0].validation.size() == 1);
    CHECK(p.test.empty());
  }

  TEST_CASE("assignment is disjoint and conserves samples") {
    Rng rng(2);
    std::uniform_int_distribution<std::size_t> pick(1, 30);
    for (int t = 0; t < 30; ++t) {
      std::vector<std::size_t> counts(1 + std::size_t(t) % 6);
      std::size_t total = 0;
      for (auto& c : counts) total += (c = pick(rng));
      const std::size_t pool = total + std::size_t(t);
      const auto p = partition_clients(generate_synthetic(std::uint64_t(t), pool, 16, 16), counts,
                                       std::uint64_t(t));
      std::set<std::uint64_t> ids;
      std::size_t seen = 0;
      auto add = [&](const std::vector<SegSample>& v) {
        for (const auto& s : v) ids.insert(s.id);
        seen += v.size();
      };
      for (const auto& c : p.clients) {
        add(c.train);
        add(c.validation);
        const std::size_t n = c.train.size() + c.validation.size();
        // 85/15 within one sample.
        CHECK(std::abs(double(c.train.size()) - 0.85 * double(n)) <= 1.0);
      }
      add(p.test);
      CHECK(seen == pool);
      CHECK(ids.size() == pool);
    }
  }

  TEST_CASE("partition is seeded") {
    const auto pool = generate_synthetic(1, 40, 16, 16);
    const std::vector<std::size_t> counts{10, 10};
    const auto a = partition_clients(pool, counts, 3), b = partition_clients(pool, counts, 3);
    const auto c = partition_clients(pool, counts, 4);
    CHECK(a.clients[0].train == b.clients[0].train);
    CHECK_FALSE(a.clients[0].train == c.clients[0].train);
  }

  TEST_CASE("bad counts") {
    const auto pool = generate_synthetic(1, 20, 16, 16);
    CHECK_THROWS_AS(partition_clients(pool, std::vector<std::size_t>{15, 6}, 1), ConfigError);
    CHECK_THROWS_AS(partition_clients(pool, std::vector<std::size_t>{5, 0}, 1), ConfigError);
  }
}

TEST_SUITE("corruption") {
  TEST_CASE("disk of radius 2 has 13 lattice points") {
    const auto d = disk_offsets(2);
    CHECK(d.size() == 13);
    std::size_t brute = 0;
    for (int y = -5; y <= 5; ++y)
      for (int x = -5; x <= 5; ++x) brute += x * x + y * y <= 4;
    CHECK(brute == 13);
    for (int r = 1; r <= 6; ++r) {
      std::size_t n = 0;
      for (int y = -r; y <= r; ++y)
        for (int x = -r; x <= r; ++x) n += x * x + y * y <= r * r;
      CHECK(disk_offsets(r).size() == n);
    }
  }

  TEST_CASE("single pixel becomes a disk") {
    std::vector<std::uint8_t> mask(9 * 9, background);
    mask[4 * 9 + 4] = zp;
    CorruptionSpec spec;
    spec.radius = 2;
    const auto out = corrupt_mask(mask, 9, 9, spec);
    for (int y = 0; y < 9; ++y) {
      for (int x = 0; x < 9; ++x) {
        const bool inside = (x - 4) * (x - 4) + (y - 4) * (y - 4) <= 4;
        CHECK(out[std::size_t(y * 9 + x)] == (inside ? zp : background));
      }
    }
    CHECK(class_counts(out)[zp] == 13);
  }

  TEST_CASE("huge radius floods with the highest-precedence class present") {
    std::vector<std::uint8_t> mask(12 * 12, background);
    mask[3] = bl;
    mask[100] = zp;
    CorruptionSpec spec;
    spec.radius = 40;
    for (auto v : corrupt_mask(mask, 12, 12, spec)) CHECK(v == zp);
    mask[50] = icm;
    for (auto v : corrupt_mask(mask, 12, 12, spec)) CHECK(v == icm);
  }

  TEST_CASE("all-background mask is unchanged") {
    const std::vector<std::uint8_t> mask(64, background);
    CHECK(corrupt_mask(mask, 8, 8, {}) == mask);
  }

  TEST_CASE("class toggles and precedence are honoured") {
    std::vector<std::uint8_t> mask(7 * 7, background);
    mask[3 * 7 + 2] = te;
    mask[3 * 7 + 4] = icm;
    CorruptionSpec spec;
    spec.radius = 1;
    spec.dilate[icm] = false;
    const auto out = corrupt_mask(mask, 7, 7, spec);
    CHECK(out[3 * 7 + 4] == icm);
    CHECK(out[3 * 7 + 3] == te);
    CHECK(out[3 * 7 + 5] == background);
    spec.precedence = {te, icm, zp, bl};
    spec.dilate[icm] = true;
    CHECK(corrupt_mask(mask, 7, 7, spec)[3 * 7 + 3] == te);
    spec.precedence = {icm, te, zp, bl};
    CHECK(corrupt_mask(mask, 7, 7, spec)[3 * 7 + 3] == icm);
  }

  TEST_CASE("invalid specs") {
    CorruptionSpec spec;
    spec.radius = 0;
    CHECK_THROWS_AS(validate(spec), ConfigError);
    spec = {};
    spec.precedence = {icm, icm, zp, bl};
    CHECK_THROWS_AS(validate(spec), ConfigError);
    spec = {};
    spec.precedence = {icm, te, zp, background};
    CHECK_THROWS_AS(validate(spec), ConfigError);
    spec = {};
    spec.dilate[background] = true;
    CHECK_THROWS_AS(validate(spec), ConfigError);
  }

  TEST_CASE("dilation is extensive and never grows background") {
    const CorruptionSpec spec;
    for (const auto& s : generate_synthetic(11, 30, 32, 32)) {
      const auto out = corrupt_mask(s.mask, s.height, s.width, spec);
      CHECK(class_counts(out)[background] <= class_counts(s.mask)[background]);
      for (std::size_t i = 0; i < out.size(); ++i) {
        if (s.mask[i] == background) continue;
        // Either kept, or taken by a class of higher precedence.
        CHECK(rank_of(spec, out[i]) >= rank_of(spec, s.mask[i]));
      }
    }
  }

  TEST_CASE("corruption moves boundaries and changes every class") {
    for (int radius : {2, 3, 5}) {
      CorruptionSpec spec;
      spec.radius = radius;
      for (const auto& s : generate_synthetic(12, 25, 32, 32)) {
        const auto out = corrupt_mask(s.mask, s.height, s.width, spec);
        CHECK(mean_boundary_shift(s.mask, out, s.height, s.width) >= 1.0);
        for (int c = zp; c <= bl; ++c) {
          const auto j = metrics::jaccard(out, s.mask, c);
          REQUIRE(j.has_value());
          CHECK(*j < 1.0);
        }
      }
    }
  }

  TEST_CASE("boundary shift of an unchanged mask is zero") {
    const auto s = generate_synthetic(1, 1, 32, 32)[0];
    CHECK(mean_boundary_shift(s.mask, s.mask, 32, 32) == 0.0);
  }

  TEST_CASE("client corruption touches train and validation only") {
    auto p = partition_clients(generate_synthetic(1, 40, 16, 16), std::vector<std::size_t>{20}, 1);
    const auto before = p.clients[0];
    const auto test_before = p.test;
    corrupt_client(p.clients[0], {});
    CHECK(p.clients[0].corrupted);
    for (std::size_t i = 0; i < before.train.size(); ++i) {
      CHECK(p.clients[0].train[i].image == before.train[i].image);
      CHECK(p.clients[0].train[i].mask == corrupt_mask(before.train[i].mask, 16, 16, {}));
    }
    for (std::size_t i = 0; i < before.validation.size(); ++i) {
      CHECK(p.clients[0].validation[i].mask == corrupt_mask(before.validation[i].mask, 16, 16, {}));
    }
    CHECK(p.test == test_before);
  }
}

TEST_SUITE("batching and export") {
  TEST_CASE("batch layout") {
    const auto s = generate_synthetic(2, 3, 16, 20);
    const auto x = batch_images(s);
    CHECK(x.shape() == nn::Shape{3, 1, 16, 20});
    CHECK(x[2 * 320 + 5] == s[2].image[5]);
    const auto y = batch_labels(s);
    CHECK(y.size() == 3 * 320);
    CHECK(y[320 + 7] == s[1].mask[7]);
  }

  TEST_CASE("export and import round trip") {
    auto p = partition_clients(generate_synthetic(3, 30, 16, 16), std::vector<std::size_t>{8, 12}, 2);
    corrupt_client(p.clients[1], {});
    const auto dir = std::filesystem::temp_directory_path() / "qasf_dataset_test";
    std::filesystem::remove_all(dir);
    export_partition(dir, p);
    CHECK(std::filesystem::exists(dir / "manifest.json"));
    const auto q = import_partition(dir);
    REQUIRE(q.clients.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
      CHECK(q.clients[i].client_id == p.clients[i].client_id);
      CHECK(q.clients[i].corrupted == p.clients[i].corrupted);
      CHECK(q.clients[i].train == p.clients[i].train);
      CHECK(q.clients[i].validation == p.clients[i].validation);
    }
    CHECK(q.test == p.test);

    std::filesystem::remove(dir / ("sample_" + std::to_string(p.test[0].id) + ".bin"));
    CHECK_THROWS_AS(import_partition(dir), DataError);
    std::filesystem::remove_all(dir);
    CHECK_THROWS_AS(import_partition(dir), DataError);
  }
}
