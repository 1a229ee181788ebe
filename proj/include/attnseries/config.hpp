#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnseries/data.hpp"
#include "attnseries/models.hpp"
#include "attnseries/train.hpp"
#include "attnseries/tune.hpp"

namespace ats {

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& section) {
  if (!j.is_object())
    throw ConfigError("config: section '" + section + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError("config: unknown key '" + it.key() + "' in section '" +
                        section + "'");
}

}  // namespace detail

inline nlohmann::json train_config_json(const TrainConfig& tc) {
  return {{"batch_size", tc.batch_size},
          {"max_epochs", tc.max_epochs},
          {"learning_rate", tc.learning_rate},
          {"weight_decay", tc.weight_decay},
          {"scheduler", tc.scheduler == Scheduler::Warmup ? "warmup" : "constant"},
          {"warmup_steps", tc.warmup_steps},
          {"early_stopping", tc.early_stopping},
          {"stop_metric",
           tc.stop_metric == StopMetric::ValLoss ? "val_loss" : "train_loss"}};
}

// JSON experiment configuration with strict schema validation: sections
// data/model/train/tune/analysis plus a top-level seed; unknown keys rejected.
struct ExperimentConfig {
  uint64_t seed = 7;
  GeneratorConfig data;
  ModelSpec model;
  bool has_model = false;
  TrainConfig train;
  struct TuneSection {
    Architecture architecture = Architecture::Transformer;
    int budget_trials = 300;
    double train_fraction = 1.0;
    std::vector<int> rungs = {10, 20, 40, 60};
  } tune;
  bool has_tune = false;
  struct AnalysisSection {
    int limit = 100;
    int layer_index = 0;
    int components = 2;
  } analysis;

  static ExperimentConfig parse(const nlohmann::json& j) {
    detail::check_keys(j, {"seed", "data", "model", "train", "tune", "analysis"},
                       "top-level");
    ExperimentConfig cfg;
    if (j.contains("seed")) {
      if (!j["seed"].is_number_unsigned() && !j["seed"].is_number_integer())
        throw ConfigError("config: seed must be an integer");
      cfg.seed = j["seed"].get<uint64_t>();
    }

    if (j.contains("data")) {
      const auto& d = j["data"];
      detail::check_keys(d,
                         {"classes", "total_samples", "class_weights", "t_raw",
                          "p_cloud", "sigma_obs", "grid_rows", "grid_cols",
                          "spatial_jitter_share"},
                         "data");
      if (d.contains("classes")) cfg.data.classes = d["classes"].get<int>();
      if (d.contains("total_samples"))
        cfg.data.total_samples = d["total_samples"].get<int>();
      if (d.contains("class_weights"))
        cfg.data.class_weights = d["class_weights"].get<std::vector<double>>();
      if (d.contains("t_raw")) cfg.data.t_raw = d["t_raw"].get<int>();
      if (d.contains("p_cloud")) cfg.data.p_cloud = d["p_cloud"].get<double>();
      if (d.contains("sigma_obs")) cfg.data.sigma_obs = d["sigma_obs"].get<double>();
      if (d.contains("grid_rows")) cfg.data.grid_rows = d["grid_rows"].get<int>();
      if (d.contains("grid_cols")) cfg.data.grid_cols = d["grid_cols"].get<int>();
      if (d.contains("spatial_jitter_share"))
        cfg.data.spatial_jitter_share = d["spatial_jitter_share"].get<double>();
    }
    cfg.data.seed = cfg.seed;

    if (j.contains("model")) {
      const auto& m = j["model"];
      detail::check_keys(m,
                         {"architecture", "hidden_dim", "layers", "heads",
                          "kernel_size", "dropout", "warmup_steps",
                          "use_positional_encoding", "attention_projection",
                          "soft_attention_act"},
                         "model");
      if (!m.contains("architecture"))
        throw ConfigError("config: model.architecture is required");
      cfg.model.architecture = arch_from_name(m["architecture"].get<std::string>());
      if (m.contains("hidden_dim")) cfg.model.hidden_dim = m["hidden_dim"].get<int>();
      if (m.contains("layers")) cfg.model.layers = m["layers"].get<int>();
      if (m.contains("heads")) cfg.model.heads = m["heads"].get<int>();
      if (m.contains("kernel_size"))
        cfg.model.kernel_size = m["kernel_size"].get<int>();
      if (m.contains("dropout")) cfg.model.dropout = m["dropout"].get<double>();
      if (m.contains("warmup_steps"))
        cfg.model.warmup_steps = m["warmup_steps"].get<int>();
      if (m.contains("use_positional_encoding"))
        cfg.model.use_positional_encoding =
            m["use_positional_encoding"].get<bool>();
      if (m.contains("attention_projection"))
        cfg.model.attention_projection =
            act_from_name(m["attention_projection"].get<std::string>());
      if (m.contains("soft_attention_act"))
        cfg.model.soft_attention_act =
            act_from_name(m["soft_attention_act"].get<std::string>());
      cfg.has_model = true;
    }

    if (j.contains("train")) {
      const auto& t = j["train"];
      detail::check_keys(t,
                         {"batch_size", "max_epochs", "learning_rate",
                          "weight_decay", "scheduler", "warmup_steps",
                          "early_stopping", "stop_metric"},
                         "train");
      if (t.contains("batch_size")) cfg.train.batch_size = t["batch_size"].get<int>();
      if (t.contains("max_epochs")) cfg.train.max_epochs = t["max_epochs"].get<int>();
      if (t.contains("learning_rate"))
        cfg.train.learning_rate = t["learning_rate"].get<double>();
      if (t.contains("weight_decay"))
        cfg.train.weight_decay = t["weight_decay"].get<double>();
      if (t.contains("scheduler")) {
        const std::string s = t["scheduler"].get<std::string>();
        if (s == "constant") cfg.train.scheduler = Scheduler::Constant;
        else if (s == "warmup") cfg.train.scheduler = Scheduler::Warmup;
        else throw ConfigError("config: train.scheduler must be constant|warmup");
      }
      if (t.contains("warmup_steps"))
        cfg.train.warmup_steps = t["warmup_steps"].get<int>();
      if (t.contains("early_stopping"))
        cfg.train.early_stopping = t["early_stopping"].get<bool>();
      if (t.contains("stop_metric")) {
        const std::string s = t["stop_metric"].get<std::string>();
        if (s == "val_loss") cfg.train.stop_metric = StopMetric::ValLoss;
        else if (s == "train_loss") cfg.train.stop_metric = StopMetric::TrainLoss;
        else throw ConfigError("config: train.stop_metric must be val_loss|train_loss");
      }
    }
    cfg.train.seed = cfg.seed;

    if (j.contains("tune")) {
      const auto& t = j["tune"];
      detail::check_keys(
          t, {"architecture", "budget_trials", "train_fraction", "rungs"}, "tune");
      if (!t.contains("architecture"))
        throw ConfigError("config: tune.architecture is required");
      cfg.tune.architecture = arch_from_name(t["architecture"].get<std::string>());
      if (t.contains("budget_trials"))
        cfg.tune.budget_trials = t["budget_trials"].get<int>();
      if (t.contains("train_fraction"))
        cfg.tune.train_fraction = t["train_fraction"].get<double>();
      if (t.contains("rungs")) cfg.tune.rungs = t["rungs"].get<std::vector<int>>();
      if (cfg.tune.train_fraction <= 0.0 || cfg.tune.train_fraction > 1.0)
        throw ConfigError("config: tune.train_fraction must lie in (0,1]");
      cfg.has_tune = true;
    }

    if (j.contains("analysis")) {
      const auto& a = j["analysis"];
      detail::check_keys(a, {"limit", "layer_index", "components"}, "analysis");
      if (a.contains("limit")) cfg.analysis.limit = a["limit"].get<int>();
      if (a.contains("layer_index"))
        cfg.analysis.layer_index = a["layer_index"].get<int>();
      if (a.contains("components"))
        cfg.analysis.components = a["components"].get<int>();
    }
    return cfg;
  }

  static ExperimentConfig parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ParseError("config: cannot open '" + path + "'");
    nlohmann::json j;
    try {
      is >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("config: invalid JSON: ") + e.what());
    }
    try {
      return parse(j);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
};

}  // namespace ats
