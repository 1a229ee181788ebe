#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>

#include "attnseries/data.hpp"
#include "testutil.hpp"

using namespace ats;

namespace {

GeneratorConfig small_config() {
  GeneratorConfig cfg;
  cfg.classes = 3;
  cfg.total_samples = 90;
  cfg.t_raw = 40;
  cfg.grid_rows = 4;
  cfg.grid_cols = 3;
  cfg.seed = 11;
  return cfg;
}

Dataset small_dataset() {
  Dataset ds = generate(small_config());
  block_split(ds, Rng(5));
  compute_standardization(ds);
  return ds;
}

}  // namespace

TEST_CASE("generate without clouds") {
  GeneratorConfig cfg = small_config();
  cfg.p_cloud = 0.0;
  Dataset ds = generate(cfg);
  REQUIRE(static_cast<int>(ds.samples.size()) == cfg.total_samples);
  for (const auto& s : ds.samples) {
    for (uint8_t c : s.cloud) CHECK(c == 0);
    for (double v : s.raw.values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.2);
      CHECK(std::isfinite(v));
    }
    CHECK(s.usable);
  }
}

TEST_CASE("generation is deterministic and clear steps ignore p_cloud") {
  GeneratorConfig cfg = small_config();
  Dataset a = generate(cfg);
  Dataset b = generate(cfg);
  REQUIRE(a.samples.size() == b.samples.size());
  for (size_t i = 0; i < a.samples.size(); ++i)
    CHECK(a.samples[i].raw.values() == b.samples[i].raw.values());

  GeneratorConfig clean = cfg;
  clean.p_cloud = 0.0;
  GeneratorConfig half = cfg;
  half.p_cloud = 0.5;
  Dataset d0 = generate(clean);
  Dataset d5 = generate(half);
  for (size_t i = 0; i < d0.samples.size(); ++i) {
    const auto& s0 = d0.samples[i];
    const auto& s5 = d5.samples[i];
    for (int t = 0; t < cfg.t_raw; ++t) {
      if (s5.cloud[static_cast<size_t>(t)]) continue;
      for (int b = 0; b < kBands; ++b)
        CHECK(s5.raw.at(t, b) == s0.raw.at(t, b));
    }
  }
}

TEST_CASE("fixed phenology and zero noise collapse within-class variation") {
  GeneratorConfig cfg = small_config();
  cfg.p_cloud = 0.0;
  cfg.sigma_obs = 0.0;
  cfg.phenology = derive_phenology(cfg.classes, cfg.seed);
  for (auto& p : cfg.phenology) {
    p.sos_lo = p.sos_hi = 0.5 * (p.sos_lo + p.sos_hi);
    p.eos_lo = p.eos_hi = 0.5 * (p.eos_lo + p.eos_hi);
    p.k1_lo = p.k1_hi = 0.5 * (p.k1_lo + p.k1_hi);
    p.k2_lo = p.k2_hi = 0.5 * (p.k2_lo + p.k2_hi);
    p.amp_lo = p.amp_hi = 0.5 * (p.amp_lo + p.amp_hi);
  }
  Dataset ds = generate(cfg);
  const SampleRecord* first = nullptr;
  for (const auto& s : ds.samples) {
    if (s.class_id != 0) continue;
    if (!first) {
      first = &s;
      continue;
    }
    CHECK(s.raw.values() == first->raw.values());
  }
}

TEST_CASE("empirical cloud fraction approaches p_cloud") {
  GeneratorConfig cfg;
  cfg.classes = 2;
  cfg.total_samples = 1500;
  cfg.t_raw = 70;
  cfg.p_cloud = 0.3;
  cfg.seed = 3;
  Dataset ds = generate(cfg);
  int64_t cloudy = 0, total = 0;
  for (const auto& s : ds.samples)
    for (uint8_t c : s.cloud) {
      cloudy += c;
      ++total;
    }
  REQUIRE(total >= 100000);
  const double frac = static_cast<double>(cloudy) / static_cast<double>(total);
  CHECK(std::fabs(frac - 0.3) < 0.01);
}

TEST_CASE("clouds appear as bright positive peaks") {
  Dataset ds = small_dataset();
  double clear_sum = 0.0, cloud_sum = 0.0;
  int64_t n_clear = 0, n_cloud = 0;
  for (const auto& s : ds.samples)
    for (int t = 0; t < s.raw.dim(0); ++t)
      for (int b = 0; b < kBands; ++b) {
        if (s.cloud[static_cast<size_t>(t)]) {
          cloud_sum += s.raw.at(t, b);
          ++n_cloud;
        } else {
          clear_sum += s.raw.at(t, b);
          ++n_clear;
        }
      }
  REQUIRE(n_cloud > 0);
  CHECK(cloud_sum / n_cloud > 2.0 * (clear_sum / n_clear));
}

TEST_CASE("preprocess is a pure temporal resampling on cloud-free input") {
  GeneratorConfig cfg = small_config();
  cfg.p_cloud = 0.0;
  Dataset ds = generate(cfg);
  const SampleRecord& s = ds.samples[0];
  auto pre = preprocess(s);
  REQUIRE(pre.has_value());
  // every output step lies between consecutive raw steps; check one bracket
  for (int j = 0; j < kPreLength; ++j) {
    const double g = 60.0 + j * 240.0 / 22.0;
    int t1 = 0;
    while (t1 < s.raw.dim(0) && s.doy[static_cast<size_t>(t1)] < g) ++t1;
    REQUIRE(t1 > 0);
    REQUIRE(t1 < s.raw.dim(0));
    const double d0 = s.doy[static_cast<size_t>(t1 - 1)];
    const double d1 = s.doy[static_cast<size_t>(t1)];
    const double w = (g - d0) / (d1 - d0);
    for (int b = 0; b < kBands; ++b) {
      const double expect = (1 - w) * s.raw.at(t1 - 1, b) + w * s.raw.at(t1, b);
      CHECK(pre->at(j, b) == Catch::Approx(expect).margin(1e-12));
    }
  }
}

TEST_CASE("preprocess interpolates across a dropped cloudy step") {
  SampleRecord s;
  s.doy = {60, 180, 300};
  s.cloud = {0, 1, 0};
  s.raw = Tensor::zeros({3, kBands});
  for (int b = 0; b < kBands; ++b) {
    s.raw.at(0, b) = 0.2;
    s.raw.at(1, b) = 0.9;  // cloud, must not leak
    s.raw.at(2, b) = 0.4;
  }
  auto pre = preprocess(s);
  REQUIRE(pre.has_value());
  // grid index 11 sits exactly at doy 180
  for (int b = 0; b < kBands; ++b)
    CHECK(pre->at(11, b) == Catch::Approx(0.3).margin(1e-12));
  // interpolation convexity keeps masked bright values out entirely
  double max_pre = 0.0;
  for (double v : pre->values()) max_pre = std::max(max_pre, v);
  CHECK(max_pre <= 0.4 + 1e-12);
}

TEST_CASE("preprocess needs at least two clear steps") {
  SampleRecord s;
  s.doy = {60, 180, 300};
  s.cloud = {1, 1, 0};
  s.raw = Tensor::full({3, kBands}, 0.5);
  CHECK_FALSE(preprocess(s).has_value());
}

TEST_CASE("block_split honours the 4:1:1 ratio") {
  GeneratorConfig cfg = small_config();
  cfg.grid_rows = 12;
  cfg.grid_cols = 12;
  cfg.total_samples = 300;
  Dataset ds = generate(cfg);
  block_split(ds, Rng(7));
  int train = 0, val = 0, test = 0;
  for (Partition p : ds.grid.labels) {
    train += p == Partition::Train;
    val += p == Partition::Val;
    test += p == Partition::Test;
  }
  CHECK(train == 96);
  CHECK(val == 24);
  CHECK(test == 24);

  // same seed, same assignment
  Dataset ds2 = generate(cfg);
  block_split(ds2, Rng(7));
  CHECK(ds.grid.labels == ds2.grid.labels);

  // partitions never share a sample, and differ at block granularity
  compute_standardization(ds);
  auto tr = ds.indices(Partition::Train);
  auto va = ds.indices(Partition::Val);
  auto te = ds.indices(Partition::Test);
  std::vector<bool> seen(ds.samples.size(), false);
  for (auto* set : {&tr, &va, &te})
    for (int i : *set) {
      CHECK_FALSE(seen[static_cast<size_t>(i)]);
      seen[static_cast<size_t>(i)] = true;
    }
  for (int i : tr)
    for (int j : va) {
      const auto& a = ds.samples[static_cast<size_t>(i)];
      const auto& b = ds.samples[static_cast<size_t>(j)];
      CHECK((a.block_i != b.block_i || a.block_j != b.block_j));
    }
}

TEST_CASE("block_split requires enough blocks") {
  GeneratorConfig cfg = small_config();
  cfg.grid_rows = 1;
  cfg.grid_cols = 5;
  CHECK_THROWS_AS(generate(cfg), ConfigError);
}

TEST_CASE("collate shapes, one-hot labels, and train standardization") {
  Dataset ds = small_dataset();
  std::vector<int> five;
  for (size_t i = 0; i < ds.samples.size() && five.size() < 5; ++i) five.push_back(static_cast<int>(i));
  Batch b = collate(ds, five, DataMode::Preprocessed, kPreLength);
  CHECK(b.x.shape() == std::vector<int>{5, kPreLength, kBands});
  CHECK(b.y.shape() == std::vector<int>{5, 3});
  for (int i = 0; i < 5; ++i) {
    double sum = 0.0;
    for (int c = 0; c < 3; ++c) sum += b.y.at(i, c);
    CHECK(sum == 1.0);
    CHECK(b.y.at(i, b.labels[static_cast<size_t>(i)]) == 1.0);
  }

  auto train_idx = ds.indices(Partition::Train);
  Batch tb = collate(ds, train_idx, DataMode::Raw, ds.config.t_raw);
  for (int band = 0; band < kBands; ++band) {
    double mean = 0.0;
    for (int i = 0; i < tb.x.dim(0); ++i)
      for (int t = 0; t < tb.x.dim(1); ++t) mean += tb.x.at(i, t, band);
    mean /= static_cast<double>(tb.x.dim(0)) * tb.x.dim(1);
    CHECK(std::fabs(mean) < 1e-8);
  }

  // padding beyond the series stays exactly zero
  Batch padded = collate(ds, {0}, DataMode::Raw, ds.config.t_raw + 10);
  for (int t = ds.config.t_raw; t < ds.config.t_raw + 10; ++t)
    for (int band = 0; band < kBands; ++band)
      CHECK(padded.x.at(0, t, band) == 0.0);
}

TEST_CASE("one-hot encodes the labelled class") {
  Dataset ds = small_dataset();
  // find a sample of class 2 (of 3)
  int idx = -1;
  for (size_t i = 0; i < ds.samples.size(); ++i)
    if (ds.samples[i].class_id == 2) {
      idx = static_cast<int>(i);
      break;
    }
  REQUIRE(idx >= 0);
  Batch b = collate(ds, {idx}, DataMode::Preprocessed, kPreLength);
  CHECK(b.y.values() == std::vector<double>{0, 0, 1});
}

TEST_CASE("save/load round-trips bit-exactly") {
  testutil::TempDir dir("dataset");
  Dataset ds = small_dataset();
  const std::string path = dir.str() + "/ds.csv";
  save(ds, path);
  Dataset loaded = load(path);
  CHECK(datasets_equal(ds, loaded));

  // and the files themselves are stable under re-save
  save(loaded, dir.str() + "/ds2.csv");
  std::ifstream f1(path), f2(dir.str() + "/ds2.csv");
  std::string s1((std::istreambuf_iterator<char>(f1)), {});
  std::string s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);
}

TEST_CASE("truncated and malformed files are rejected with line numbers") {
  testutil::TempDir dir("dataset_bad");
  Dataset ds = small_dataset();
  const std::string path = dir.str() + "/ds.csv";
  save(ds, path);

  std::ifstream in(path);
  std::string contents((std::istreambuf_iterator<char>(in)), {});
  in.close();
  // cut a row in half
  const std::string cut = contents.substr(0, contents.size() / 2);
  const size_t nl = cut.rfind('\n');
  const std::string truncated = cut.substr(0, nl + 1 + 5);
  {
    std::ofstream out(dir.str() + "/trunc.csv");
    out << truncated;
  }
  {
    std::ofstream side(dir.str() + "/trunc.csv.json");
    std::ifstream orig(sidecar_path(path));
    side << orig.rdbuf();
  }
  CHECK_THROWS_AS(load(dir.str() + "/trunc.csv"), ParseError);
  CHECK_THROWS_WITH(load(dir.str() + "/trunc.csv"),
                    Catch::Matchers::ContainsSubstring("line"));
}

TEST_CASE("header-only file loads as an empty dataset") {
  testutil::TempDir dir("dataset_empty");
  Dataset ds = small_dataset();
  const std::string path = dir.str() + "/ds.csv";
  save(ds, path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  in.close();
  {
    std::ofstream out(dir.str() + "/hdr.csv");
    out << header << "\n";
  }
  {
    std::ofstream side(dir.str() + "/hdr.csv.json");
    std::ifstream orig(sidecar_path(path));
    side << orig.rdbuf();
  }
  Dataset empty = load(dir.str() + "/hdr.csv");
  CHECK(empty.samples.empty());
}

TEST_CASE("clean default-config classes are 1-NN separable") {
  GeneratorConfig cfg;  // default: 5 classes, 2000 samples
  cfg.p_cloud = 0.0;
  Dataset ds = generate(cfg);
  block_split(ds, Rng(cfg.seed));
  compute_standardization(ds);
  auto train = ds.indices(Partition::Train);
  auto test = ds.indices(Partition::Test);
  REQUIRE(train.size() > 100);
  REQUIRE(test.size() > 50);

  int correct = 0;
  for (int ti : test) {
    const Tensor& q = ds.samples[static_cast<size_t>(ti)].raw;
    double best = INFINITY;
    int best_class = -1;
    for (int si : train) {
      const Tensor& r = ds.samples[static_cast<size_t>(si)].raw;
      double d2 = 0.0;
      for (size_t k = 0; k < q.size(); ++k) {
        const double d = q.values()[k] - r.values()[k];
        d2 += d * d;
        if (d2 >= best) break;
      }
      if (d2 < best) {
        best = d2;
        best_class = ds.samples[static_cast<size_t>(si)].class_id;
      }
    }
    correct += best_class == ds.samples[static_cast<size_t>(ti)].class_id;
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(test.size());
  INFO("1-NN accuracy " << acc);
  CHECK(acc >= 0.9);
}

TEST_CASE("sample regions derive from block rows") {
  Dataset ds = small_dataset();
  for (const auto& s : ds.samples) {
    CHECK(s.region.rfind("region_", 0) == 0);
  }
}
