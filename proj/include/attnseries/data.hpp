#pragma once

#include <array>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnseries/rng.hpp"
#include "attnseries/tensor.hpp"

namespace ats {

constexpr int kBands = 13;
constexpr int kPreLength = 23;
constexpr double kVegetationWindowStart = 60.0;  // day of year
constexpr double kVegetationWindowEnd = 300.0;

enum class DataMode { Raw, Preprocessed };
enum class Partition { Train, Val, Test };

inline const char* partition_name(Partition p) {
  switch (p) {
    case Partition::Train: return "train";
    case Partition::Val: return "val";
    case Partition::Test: return "test";
  }
  return "?";
}

// round a double through its 9-significant-digit decimal representation; the
// serialized form then reparses to the identical bit pattern
inline double quantize9(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", x);
  return std::strtod(buf, nullptr);
}

struct SampleRecord {
  int64_t id = 0;
  int class_id = 0;
  int block_i = 0, block_j = 0;
  std::string region;
  Tensor raw;                  // [T_raw x 13], top-of-atmosphere-like reflectance
  std::vector<double> doy;     // acquisition day of year per step
  std::vector<uint8_t> cloud;  // ground-truth contamination mask
  Tensor preprocessed;         // [23 x 13], cloud-free gap-filled series
  bool usable = true;
};

// per-class double-sigmoid seasonality parameters, expressed as jitter ranges
struct ClassPhenology {
  double sos_lo = 100, sos_hi = 120;  // onset of greenness
  double eos_lo = 240, eos_hi = 260;  // senescence
  double k1_lo = 0.08, k1_hi = 0.2;   // green-up slope
  double k2_lo = 0.06, k2_hi = 0.16;  // decay slope
  double amp_lo = 0.2, amp_hi = 0.3;  // amplitude scale
  std::array<double, kBands> band_profile{};

  nlohmann::json to_json() const {
    return {{"sos", {sos_lo, sos_hi}},     {"eos", {eos_lo, eos_hi}},
            {"k1", {k1_lo, k1_hi}},        {"k2", {k2_lo, k2_hi}},
            {"amp", {amp_lo, amp_hi}},
            {"band_profile", std::vector<double>(band_profile.begin(),
                                                 band_profile.end())}};
  }
  static ClassPhenology from_json(const nlohmann::json& j) {
    ClassPhenology p;
    p.sos_lo = j.at("sos")[0];
    p.sos_hi = j.at("sos")[1];
    p.eos_lo = j.at("eos")[0];
    p.eos_hi = j.at("eos")[1];
    p.k1_lo = j.at("k1")[0];
    p.k1_hi = j.at("k1")[1];
    p.k2_lo = j.at("k2")[0];
    p.k2_hi = j.at("k2")[1];
    p.amp_lo = j.at("amp")[0];
    p.amp_hi = j.at("amp")[1];
    auto bp = j.at("band_profile").get<std::vector<double>>();
    std::copy(bp.begin(), bp.end(), p.band_profile.begin());
    return p;
  }
};

struct GeneratorConfig {
  int classes = 5;
  int total_samples = 2000;
  std::vector<double> class_weights;  // empty = uniform; renormalized otherwise
  int t_raw = 70;
  double p_cloud = 0.3;
  double sigma_obs = 0.012;
  int grid_rows = 12, grid_cols = 12;
  double spatial_jitter_share = 0.5;  // fraction of phenology jitter shared per block
  uint64_t seed = 7;
  std::vector<ClassPhenology> phenology;    // derived from seed when empty
  std::array<double, kBands> soil_baseline{};  // derived when all zero

  void validate() const {
    if (classes < 2) throw ConfigError("generator: need at least 2 classes");
    if (total_samples < classes) throw ConfigError("generator: too few samples");
    if (t_raw < 2) throw ConfigError("generator: t_raw must be >= 2");
    if (p_cloud < 0.0 || p_cloud >= 1.0)
      throw ConfigError("generator: p_cloud must lie in [0,1)");
    if (sigma_obs < 0.0) throw ConfigError("generator: sigma_obs must be >= 0");
    if (grid_rows * grid_cols < 6)
      throw ConfigError("generator: need at least 6 blocks");
    if (spatial_jitter_share < 0.0 || spatial_jitter_share > 1.0)
      throw ConfigError("generator: spatial_jitter_share must lie in [0,1]");
    if (!class_weights.empty() &&
        static_cast<int>(class_weights.size()) != classes)
      throw ConfigError("generator: class_weights length must equal classes");
    for (const auto& p : phenology)
      if (!(p.sos_lo < p.eos_lo))
        throw ConfigError("generator: phenology requires sos < eos");
  }

  nlohmann::json to_json() const {
    nlohmann::json j = {{"classes", classes},
                        {"total_samples", total_samples},
                        {"class_weights", class_weights},
                        {"t_raw", t_raw},
                        {"p_cloud", p_cloud},
                        {"sigma_obs", sigma_obs},
                        {"grid_rows", grid_rows},
                        {"grid_cols", grid_cols},
                        {"spatial_jitter_share", spatial_jitter_share},
                        {"seed", seed},
                        {"soil_baseline",
                         std::vector<double>(soil_baseline.begin(), soil_baseline.end())}};
    j["phenology"] = nlohmann::json::array();
    for (const auto& p : phenology) j["phenology"].push_back(p.to_json());
    return j;
  }

  static GeneratorConfig from_json(const nlohmann::json& j) {
    GeneratorConfig c;
    c.classes = j.at("classes");
    c.total_samples = j.at("total_samples");
    c.class_weights = j.value("class_weights", std::vector<double>{});
    c.t_raw = j.at("t_raw");
    c.p_cloud = j.at("p_cloud");
    c.sigma_obs = j.at("sigma_obs");
    c.grid_rows = j.at("grid_rows");
    c.grid_cols = j.at("grid_cols");
    c.spatial_jitter_share = j.at("spatial_jitter_share");
    c.seed = j.at("seed");
    if (j.contains("soil_baseline")) {
      auto sb = j.at("soil_baseline").get<std::vector<double>>();
      std::copy(sb.begin(), sb.end(), c.soil_baseline.begin());
    }
    if (j.contains("phenology"))
      for (const auto& pj : j.at("phenology"))
        c.phenology.push_back(ClassPhenology::from_json(pj));
    return c;
  }
};

struct BlockGrid {
  int rows = 0, cols = 0;
  std::vector<Partition> labels;

  Partition label(int i, int j) const {
    return labels[static_cast<size_t>(i) * cols + j];
  }
};

struct Standardization {
  std::array<double, kBands> mean{};
  std::array<double, kBands> stddev{};
};

struct Dataset {
  GeneratorConfig config;
  std::vector<SampleRecord> samples;
  std::vector<std::string> class_names;
  BlockGrid grid;
  Standardization raw_stats, pre_stats;
  bool has_split = false;
  bool has_stats = false;

  Partition partition_of(const SampleRecord& s) const {
    if (!has_split) throw ContractError("dataset has no block split yet");
    return grid.label(s.block_i, s.block_j);
  }

  std::vector<int> indices(Partition p) const {
    std::vector<int> out;
    for (size_t i = 0; i < samples.size(); ++i)
      if (samples[i].usable && partition_of(samples[i]) == p)
        out.push_back(static_cast<int>(i));
    return out;
  }
};

// ---------------------------------------------------------------------------
// generation

namespace detail {

inline double sigmoid_s(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// three horizontal bands of the grid act as coarse "regions"
inline std::string region_of_block(int block_i, int grid_rows) {
  const int band = std::min(2, block_i * 3 / std::max(1, grid_rows));
  return "region_" + std::to_string(band);
}

// deterministic permutation of 0..n-1
inline std::vector<int> seeded_permutation(int n, Rng rng) {
  std::vector<int> p(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
  for (int i = n - 1; i > 0; --i)
    std::swap(p[static_cast<size_t>(i)],
              p[static_cast<size_t>(rng.integer(static_cast<uint64_t>(i + 1)))]);
  return p;
}

}  // namespace detail

// Stratified class parameters: onset times, season lengths, and amplitudes are
// spread over their ranges by (independently permuted) class index, so any
// class count yields temporally separable signatures.
inline std::vector<ClassPhenology> derive_phenology(int classes, uint64_t seed) {
  Rng rng = Rng(seed).fork(0xC1A55);
  const auto perm_dur = detail::seeded_permutation(classes, rng.fork(1));
  const auto perm_amp = detail::seeded_permutation(classes, rng.fork(2));
  // vegetation-like spectral response: weak visible, strong red-edge/NIR,
  // moderate short-wave infrared
  const std::array<double, kBands> veg = {0.10, 0.12, 0.18, 0.15, 0.35, 0.75,
                                          0.90, 1.00, 0.95, 0.40, 0.05, 0.55,
                                          0.35};
  std::vector<ClassPhenology> out;
  for (int c = 0; c < classes; ++c) {
    ClassPhenology p;
    const double s_pos = (c + rng.uniform(0.3, 0.7)) / classes;
    const double d_pos =
        (perm_dur[static_cast<size_t>(c)] + rng.uniform(0.3, 0.7)) / classes;
    const double a_pos =
        (perm_amp[static_cast<size_t>(c)] + rng.uniform(0.3, 0.7)) / classes;
    const double sos = 45.0 + 130.0 * s_pos;
    const double dur = 50.0 + 140.0 * d_pos;
    const double eos = std::min(sos + dur, 340.0);
    p.sos_lo = sos - 6.0;
    p.sos_hi = sos + 6.0;
    p.eos_lo = eos - 6.0;
    p.eos_hi = eos + 6.0;
    const double k1 = rng.uniform(0.09, 0.22);
    const double k2 = rng.uniform(0.07, 0.18);
    p.k1_lo = k1 * 0.85;
    p.k1_hi = k1 * 1.15;
    p.k2_lo = k2 * 0.85;
    p.k2_hi = k2 * 1.15;
    const double amp = 0.18 + 0.3 * a_pos;
    p.amp_lo = amp * 0.9;
    p.amp_hi = amp * 1.1;
    for (int b = 0; b < kBands; ++b)
      p.band_profile[static_cast<size_t>(b)] =
          std::max(0.03, veg[static_cast<size_t>(b)] * rng.uniform(0.85, 1.15));
    out.push_back(p);
  }
  return out;
}

// gap-fill a single sample onto the 23-step vegetative-window grid using only
// its cloud-free observations; nullopt when fewer than 2 clear steps exist
inline std::optional<Tensor> preprocess(const SampleRecord& s) {
  std::vector<int> clear;
  for (size_t t = 0; t < s.cloud.size(); ++t)
    if (!s.cloud[t]) clear.push_back(static_cast<int>(t));
  if (clear.size() < 2) return std::nullopt;
  Tensor out = Tensor::zeros({kPreLength, kBands});
  for (int j = 0; j < kPreLength; ++j) {
    const double g = kVegetationWindowStart +
                     j * (kVegetationWindowEnd - kVegetationWindowStart) /
                         (kPreLength - 1);
    // locate the clear-step bracket around g
    size_t hi = 0;
    while (hi < clear.size() &&
           s.doy[static_cast<size_t>(clear[hi])] < g)
      ++hi;
    for (int b = 0; b < kBands; ++b) {
      double v;
      if (hi == 0) {
        v = s.raw.at(clear.front(), b);  // clamp before the first clear step
      } else if (hi == clear.size()) {
        v = s.raw.at(clear.back(), b);  // clamp after the last clear step
      } else {
        const int t0 = clear[hi - 1], t1 = clear[hi];
        const double d0 = s.doy[static_cast<size_t>(t0)];
        const double d1 = s.doy[static_cast<size_t>(t1)];
        const double w = d1 == d0 ? 0.0 : (g - d0) / (d1 - d0);
        v = (1.0 - w) * s.raw.at(t0, b) + w * s.raw.at(t1, b);
      }
      out.at(j, b) = v;
    }
  }
  return out;
}

inline Dataset generate(GeneratorConfig config) {
  config.validate();
  if (config.phenology.empty())
    config.phenology = derive_phenology(config.classes, config.seed);
  if (static_cast<int>(config.phenology.size()) != config.classes)
    throw ConfigError("generator: phenology list length must equal classes");
  bool baseline_unset = true;
  for (double v : config.soil_baseline) baseline_unset &= v == 0.0;
  if (baseline_unset) {
    Rng soil = Rng(config.seed).fork(0x5011);
    for (int b = 0; b < kBands; ++b)
      config.soil_baseline[static_cast<size_t>(b)] =
          quantize9(soil.uniform(0.04, 0.12));
  }

  // exact per-class counts via largest remainder
  std::vector<double> weights = config.class_weights;
  if (weights.empty()) weights.assign(static_cast<size_t>(config.classes), 1.0);
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  std::vector<int> counts(static_cast<size_t>(config.classes), 0);
  std::vector<std::pair<double, int>> remainders;
  int assigned = 0;
  for (int c = 0; c < config.classes; ++c) {
    const double exact = config.total_samples * weights[static_cast<size_t>(c)] / wsum;
    counts[static_cast<size_t>(c)] = static_cast<int>(exact);
    assigned += counts[static_cast<size_t>(c)];
    remainders.push_back({exact - counts[static_cast<size_t>(c)], c});
  }
  std::sort(remainders.begin(), remainders.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int i = 0; i < config.total_samples - assigned; ++i)
    ++counts[static_cast<size_t>(remainders[static_cast<size_t>(i)].second)];

  Dataset ds;
  ds.config = config;
  for (int c = 0; c < config.classes; ++c) {
    char name[24];
    std::snprintf(name, sizeof(name), "class_%02d", c);
    ds.class_names.push_back(name);
  }

  const Rng root(config.seed);
  Rng place = root.fork(0xB10C);

  std::vector<double> doy(static_cast<size_t>(config.t_raw));
  for (int t = 0; t < config.t_raw; ++t)
    doy[static_cast<size_t>(t)] =
        quantize9(1.0 + t * 364.0 / (config.t_raw - 1));

  const double share = config.spatial_jitter_share;
  int64_t id = 0;
  for (int c = 0; c < config.classes; ++c) {
    const ClassPhenology& ph = config.phenology[static_cast<size_t>(c)];
    for (int k = 0; k < counts[static_cast<size_t>(c)]; ++k, ++id) {
      SampleRecord s;
      s.id = id;
      s.class_id = c;
      s.block_i = static_cast<int>(place.integer(static_cast<uint64_t>(config.grid_rows)));
      s.block_j = static_cast<int>(place.integer(static_cast<uint64_t>(config.grid_cols)));
      s.region = detail::region_of_block(s.block_i, config.grid_rows);
      s.doy = doy;

      // block-level jitter shared by same-class neighbours, plus an
      // individual component
      const uint64_t block_key =
          (static_cast<uint64_t>(s.block_i) << 32) ^
          (static_cast<uint64_t>(s.block_j) << 16) ^ static_cast<uint64_t>(c);
      Rng block_rng = root.fork(0xB10C2).fork(block_key);
      Rng indiv_rng = root.fork(0x1D).fork(static_cast<uint64_t>(id));
      auto draw = [&](double lo, double hi) {
        const double mid = 0.5 * (lo + hi), half = 0.5 * (hi - lo);
        const double u = share * block_rng.uniform(-1.0, 1.0) +
                         (1.0 - share) * indiv_rng.uniform(-1.0, 1.0);
        return mid + half * u;
      };
      const double sos = draw(ph.sos_lo, ph.sos_hi);
      const double eos = draw(ph.eos_lo, ph.eos_hi);
      const double k1 = draw(ph.k1_lo, ph.k1_hi);
      const double k2 = draw(ph.k2_lo, ph.k2_hi);
      const double amp = draw(ph.amp_lo, ph.amp_hi);

      Rng noise = root.fork(0x4015E).fork(static_cast<uint64_t>(id));
      s.raw = Tensor::zeros({config.t_raw, kBands});
      for (int t = 0; t < config.t_raw; ++t) {
        const double season = detail::sigmoid_s(k1 * (doy[static_cast<size_t>(t)] - sos)) -
                              detail::sigmoid_s(k2 * (doy[static_cast<size_t>(t)] - eos));
        for (int b = 0; b < kBands; ++b) {
          double v = config.soil_baseline[static_cast<size_t>(b)] +
                     amp * ph.band_profile[static_cast<size_t>(b)] * season +
                     noise.normal(0.0, config.sigma_obs);
          v = std::clamp(v, 0.0, 1.2);
          s.raw.at(t, b) = quantize9(v);
        }
      }

      // cloud contamination comes from an independent stream so clear-step
      // values are invariant under p_cloud changes
      Rng cloud_rng = root.fork(0xC10D).fork(static_cast<uint64_t>(id));
      s.cloud.assign(static_cast<size_t>(config.t_raw), 0);
      for (int t = 0; t < config.t_raw; ++t) {
        const double u = cloud_rng.uniform();
        const double bright = cloud_rng.uniform(0.6, 0.9);
        const double shared_noise = cloud_rng.normal();
        if (u < config.p_cloud) {
          s.cloud[static_cast<size_t>(t)] = 1;
          for (int b = 0; b < kBands; ++b) {
            double v = bright + 0.03 * shared_noise + 0.015 * cloud_rng.normal();
            v = std::clamp(v, 0.0, 1.2);
            s.raw.at(t, b) = quantize9(v);
          }
        } else {
          // keep the stream position aligned across p_cloud values
          for (int b = 0; b < kBands; ++b) cloud_rng.normal();
        }
      }

      auto pre = preprocess(s);
      if (pre) {
        s.preprocessed = *pre;
        s.usable = true;
      } else {
        s.preprocessed = Tensor::zeros({kPreLength, kBands});
        s.usable = false;
      }
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// block split and standardization

inline void block_split(Dataset& ds, Rng rng, int ratio_train = 4,
                        int ratio_val = 1, int ratio_test = 1) {
  const int blocks = ds.config.grid_rows * ds.config.grid_cols;
  if (blocks < 6) throw ConfigError("block_split: need at least 6 blocks");
  const int total_ratio = ratio_train + ratio_val + ratio_test;
  int n_val = static_cast<int>(std::lround(
      static_cast<double>(blocks) * ratio_val / total_ratio));
  int n_test = static_cast<int>(std::lround(
      static_cast<double>(blocks) * ratio_test / total_ratio));
  n_val = std::max(1, n_val);
  n_test = std::max(1, n_test);
  const int n_train = blocks - n_val - n_test;
  if (n_train < 1) throw ConfigError("block_split: ratio leaves no training blocks");

  std::vector<int> order(static_cast<size_t>(blocks));
  for (int i = 0; i < blocks; ++i) order[static_cast<size_t>(i)] = i;
  for (int i = blocks - 1; i > 0; --i)
    std::swap(order[static_cast<size_t>(i)],
              order[static_cast<size_t>(rng.integer(static_cast<uint64_t>(i + 1)))]);

  ds.grid.rows = ds.config.grid_rows;
  ds.grid.cols = ds.config.grid_cols;
  ds.grid.labels.assign(static_cast<size_t>(blocks), Partition::Train);
  for (int i = 0; i < blocks; ++i) {
    Partition p = i < n_train                ? Partition::Train
                  : i < n_train + n_val      ? Partition::Val
                                             : Partition::Test;
    ds.grid.labels[static_cast<size_t>(order[static_cast<size_t>(i)])] = p;
  }
  ds.has_split = true;
}

inline void compute_standardization(Dataset& ds) {
  if (!ds.has_split) throw ContractError("standardization needs a block split");
  std::array<double, kBands> sum_r{}, sq_r{}, sum_p{}, sq_p{};
  int64_t n_r = 0, n_p = 0;
  for (const auto& s : ds.samples) {
    if (!s.usable || ds.partition_of(s) != Partition::Train) continue;
    for (int t = 0; t < s.raw.dim(0); ++t)
      for (int b = 0; b < kBands; ++b) {
        const double v = s.raw.at(t, b);
        sum_r[static_cast<size_t>(b)] += v;
        sq_r[static_cast<size_t>(b)] += v * v;
      }
    n_r += s.raw.dim(0);
    for (int t = 0; t < kPreLength; ++t)
      for (int b = 0; b < kBands; ++b) {
        const double v = s.preprocessed.at(t, b);
        sum_p[static_cast<size_t>(b)] += v;
        sq_p[static_cast<size_t>(b)] += v * v;
      }
    n_p += kPreLength;
  }
  if (n_r == 0) throw ContractError("standardization: empty train partition");
  for (int b = 0; b < kBands; ++b) {
    const double mr = sum_r[static_cast<size_t>(b)] / n_r;
    const double vr = sq_r[static_cast<size_t>(b)] / n_r - mr * mr;
    ds.raw_stats.mean[static_cast<size_t>(b)] = mr;
    ds.raw_stats.stddev[static_cast<size_t>(b)] = std::sqrt(std::max(vr, 1e-12));
    const double mp = sum_p[static_cast<size_t>(b)] / n_p;
    const double vp = sq_p[static_cast<size_t>(b)] / n_p - mp * mp;
    ds.pre_stats.mean[static_cast<size_t>(b)] = mp;
    ds.pre_stats.stddev[static_cast<size_t>(b)] = std::sqrt(std::max(vp, 1e-12));
  }
  ds.has_stats = true;
}

// ---------------------------------------------------------------------------
// collation

struct Batch {
  Tensor x;                 // [N x T x 13], standardized
  Tensor y;                 // [N x C], one-hot
  std::vector<int> labels;  // class ids
};

inline Batch collate(const Dataset& ds, const std::vector<int>& sample_indices,
                     DataMode mode, int nominal_t) {
  if (!ds.has_stats) throw ContractError("collate: dataset lacks standardization");
  const int n = static_cast<int>(sample_indices.size());
  if (n == 0) throw DimensionError("collate: empty batch");
  const Standardization& st =
      mode == DataMode::Raw ? ds.raw_stats : ds.pre_stats;
  Batch batch;
  batch.x = Tensor::zeros({n, nominal_t, kBands});
  batch.y = Tensor::zeros({n, ds.config.classes});
  for (int i = 0; i < n; ++i) {
    const SampleRecord& s = ds.samples[static_cast<size_t>(sample_indices[static_cast<size_t>(i)])];
    if (s.class_id < 0 || s.class_id >= ds.config.classes)
      throw DimensionError("collate: unknown class id " + std::to_string(s.class_id));
    const Tensor& src = mode == DataMode::Raw ? s.raw : s.preprocessed;
    const int t_copy = std::min(nominal_t, src.dim(0));
    for (int t = 0; t < t_copy; ++t)
      for (int b = 0; b < kBands; ++b)
        batch.x.at(i, t, b) = (src.at(t, b) - st.mean[static_cast<size_t>(b)]) /
                              st.stddev[static_cast<size_t>(b)];
    // padding stays exactly zero: "no signal" after standardization
    batch.y.at(i, s.class_id) = 1.0;
    batch.labels.push_back(s.class_id);
  }
  return batch;
}

inline int nominal_length(const Dataset& ds, DataMode mode) {
  return mode == DataMode::Raw ? ds.config.t_raw : kPreLength;
}

// ---------------------------------------------------------------------------
// serialization: one CSV of raw observations plus a JSON sidecar

inline std::string sidecar_path(const std::string& csv_path) {
  return csv_path + ".json";
}

inline void save(const Dataset& ds, const std::string& csv_path) {
  std::ofstream os(csv_path);
  if (!os) throw ParseError("dataset: cannot open '" + csv_path + "' for writing");
  os << "sample_id,class,block_i,block_j,t_index,doy,cloud";
  for (int b = 1; b <= kBands; ++b) {
    char col[8];
    std::snprintf(col, sizeof(col), ",b%02d", b);
    os << col;
  }
  os << "\n";
  char buf[40];
  for (const auto& s : ds.samples) {
    for (int t = 0; t < s.raw.dim(0); ++t) {
      os << s.id << ',' << s.class_id << ',' << s.block_i << ',' << s.block_j
         << ',' << t << ',';
      std::snprintf(buf, sizeof(buf), "%.9g", s.doy[static_cast<size_t>(t)]);
      os << buf << ',' << static_cast<int>(s.cloud[static_cast<size_t>(t)]);
      for (int b = 0; b < kBands; ++b) {
        std::snprintf(buf, sizeof(buf), "%.9g", s.raw.at(t, b));
        os << ',' << buf;
      }
      os << '\n';
    }
  }
  if (!os) throw ParseError("dataset: write to '" + csv_path + "' failed");

  nlohmann::json j;
  j["format_version"] = 1;
  j["config"] = ds.config.to_json();
  j["class_names"] = ds.class_names;
  if (ds.has_split) {
    std::string labels;
    for (Partition p : ds.grid.labels)
      labels += p == Partition::Train ? 'T' : p == Partition::Val ? 'V' : 'E';
    j["grid"] = {{"rows", ds.grid.rows}, {"cols", ds.grid.cols}, {"labels", labels}};
  }
  if (ds.has_stats) {
    auto stats_json = [](const Standardization& st) {
      return nlohmann::json{
          {"mean", std::vector<double>(st.mean.begin(), st.mean.end())},
          {"stddev", std::vector<double>(st.stddev.begin(), st.stddev.end())}};
    };
    j["stats"] = {{"raw", stats_json(ds.raw_stats)},
                  {"preprocessed", stats_json(ds.pre_stats)}};
  }
  std::ofstream js(sidecar_path(csv_path));
  if (!js) throw ParseError("dataset: cannot write sidecar");
  js << j.dump(2) << "\n";
}

namespace detail {

inline double parse_double_field(const std::string& field, int line_no) {
  const char* begin = field.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0' || !std::isfinite(v))
    throw ParseError("dataset: line " + std::to_string(line_no) +
                     ": bad numeric field '" + field + "'");
  return v;
}

inline int64_t parse_int_field(const std::string& field, int line_no) {
  const char* begin = field.c_str();
  char* end = nullptr;
  const long long v = std::strtoll(begin, &end, 10);
  if (end == begin || *end != '\0')
    throw ParseError("dataset: line " + std::to_string(line_no) +
                     ": bad integer field '" + field + "'");
  return v;
}

}  // namespace detail

inline Dataset load(const std::string& csv_path) {
  std::ifstream js(sidecar_path(csv_path));
  if (!js)
    throw ParseError("dataset: missing sidecar '" + sidecar_path(csv_path) + "'");
  nlohmann::json j;
  try {
    js >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("dataset: bad sidecar json: ") + e.what());
  }
  Dataset ds;
  ds.config = GeneratorConfig::from_json(j.at("config"));
  ds.class_names = j.at("class_names").get<std::vector<std::string>>();
  if (j.contains("grid")) {
    ds.grid.rows = j["grid"].at("rows");
    ds.grid.cols = j["grid"].at("cols");
    const std::string labels = j["grid"].at("labels");
    if (static_cast<int>(labels.size()) != ds.grid.rows * ds.grid.cols)
      throw ParseError("dataset: grid label string has wrong length");
    for (char c : labels)
      ds.grid.labels.push_back(c == 'T'   ? Partition::Train
                               : c == 'V' ? Partition::Val
                                          : Partition::Test);
    ds.has_split = true;
  }
  if (j.contains("stats")) {
    auto read_stats = [](const nlohmann::json& sj, Standardization& st) {
      auto m = sj.at("mean").get<std::vector<double>>();
      auto d = sj.at("stddev").get<std::vector<double>>();
      std::copy(m.begin(), m.end(), st.mean.begin());
      std::copy(d.begin(), d.end(), st.stddev.begin());
    };
    read_stats(j["stats"].at("raw"), ds.raw_stats);
    read_stats(j["stats"].at("preprocessed"), ds.pre_stats);
    ds.has_stats = true;
  }

  std::ifstream is(csv_path);
  if (!is) throw ParseError("dataset: cannot open '" + csv_path + "'");
  std::string line;
  if (!std::getline(is, line))
    throw ParseError("dataset: line 1: missing header");
  {
    std::string expected = "sample_id,class,block_i,block_j,t_index,doy,cloud";
    for (int b = 1; b <= kBands; ++b) {
      char col[8];
      std::snprintf(col, sizeof(col), ",b%02d", b);
      expected += col;
    }
    if (line != expected)
      throw ParseError("dataset: line 1: unexpected header");
  }

  SampleRecord current;
  std::vector<std::array<double, kBands>> rows;
  bool in_sample = false;
  int line_no = 1;
  auto flush = [&] {
    if (!in_sample) return;
    current.raw = Tensor::zeros({static_cast<int>(rows.size()), kBands});
    for (size_t t = 0; t < rows.size(); ++t)
      for (int b = 0; b < kBands; ++b)
        current.raw.at(static_cast<int>(t), b) = rows[t][static_cast<size_t>(b)];
    current.region = detail::region_of_block(current.block_i, ds.config.grid_rows);
    auto pre = preprocess(current);
    if (pre) {
      current.preprocessed = *pre;
      current.usable = true;
    } else {
      current.preprocessed = Tensor::zeros({kPreLength, kBands});
      current.usable = false;
    }
    ds.samples.push_back(std::move(current));
    current = SampleRecord{};
    rows.clear();
  };

  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::string field;
    std::istringstream ls(line);
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.push_back("");
    if (static_cast<int>(fields.size()) != 7 + kBands)
      throw ParseError("dataset: line " + std::to_string(line_no) + ": expected " +
                       std::to_string(7 + kBands) + " fields, got " +
                       std::to_string(fields.size()));
    const int64_t id = detail::parse_int_field(fields[0], line_no);
    const int t_index = static_cast<int>(detail::parse_int_field(fields[4], line_no));
    if (!in_sample || id != current.id) {
      flush();
      in_sample = true;
      current.id = id;
      current.class_id = static_cast<int>(detail::parse_int_field(fields[1], line_no));
      current.block_i = static_cast<int>(detail::parse_int_field(fields[2], line_no));
      current.block_j = static_cast<int>(detail::parse_int_field(fields[3], line_no));
      if (current.class_id < 0 || current.class_id >= ds.config.classes)
        throw ParseError("dataset: line " + std::to_string(line_no) +
                         ": class id out of range");
    }
    if (t_index != static_cast<int>(rows.size()))
      throw ParseError("dataset: line " + std::to_string(line_no) +
                       ": t_index " + std::to_string(t_index) +
                       " out of order (expected " + std::to_string(rows.size()) + ")");
    current.doy.push_back(detail::parse_double_field(fields[5], line_no));
    const int64_t cloud = detail::parse_int_field(fields[6], line_no);
    if (cloud != 0 && cloud != 1)
      throw ParseError("dataset: line " + std::to_string(line_no) +
                       ": cloud flag must be 0 or 1");
    current.cloud.push_back(static_cast<uint8_t>(cloud));
    std::array<double, kBands> vals{};
    for (int b = 0; b < kBands; ++b) {
      const double v = detail::parse_double_field(fields[static_cast<size_t>(7 + b)], line_no);
      if (v < 0.0)
        throw ParseError("dataset: line " + std::to_string(line_no) +
                         ": negative reflectance");
      vals[static_cast<size_t>(b)] = v;
    }
    rows.push_back(vals);
  }
  flush();
  for (const auto& s : ds.samples)
    if (s.raw.dim(0) != ds.config.t_raw)
      throw ParseError("dataset: sample " + std::to_string(s.id) + " has " +
                       std::to_string(s.raw.dim(0)) + " steps, expected " +
                       std::to_string(ds.config.t_raw));
  return ds;
}

// value equality over every serialized field plus derived products
inline bool datasets_equal(const Dataset& a, const Dataset& b) {
  if (a.samples.size() != b.samples.size()) return false;
  for (size_t i = 0; i < a.samples.size(); ++i) {
    const auto& x = a.samples[i];
    const auto& y = b.samples[i];
    if (x.id != y.id || x.class_id != y.class_id || x.block_i != y.block_i ||
        x.block_j != y.block_j || x.region != y.region || x.cloud != y.cloud ||
        x.doy != y.doy || x.usable != y.usable)
      return false;
    if (x.raw.values() != y.raw.values()) return false;
    if (x.preprocessed.values() != y.preprocessed.values()) return false;
  }
  if (a.has_split != b.has_split || a.has_stats != b.has_stats) return false;
  if (a.has_split && a.grid.labels != b.grid.labels) return false;
  if (a.has_stats &&
      (a.raw_stats.mean != b.raw_stats.mean ||
       a.raw_stats.stddev != b.raw_stats.stddev ||
       a.pre_stats.mean != b.pre_stats.mean ||
       a.pre_stats.stddev != b.pre_stats.stddev))
    return false;
  return true;
}

}  // namespace ats
