// Command-line front end: dataset generation, training, hyperparameter
// search, evaluation, and the gradient/attention/embedding analyses. All
// tabular outputs are CSV; the study ledger is JSON-lines.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "attnseries/analysis.hpp"
#include "attnseries/config.hpp"
#include "attnseries/data.hpp"
#include "attnseries/models.hpp"
#include "attnseries/train.hpp"
#include "attnseries/tune.hpp"

namespace fs = std::filesystem;
using namespace ats;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitCompat = 3;
constexpr int kExitUnsupported = 4;

int thread_cap() {
  if (const char* env = std::getenv("ATTNSERIES_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? static_cast<int>(hw) : 1;
}

DataMode parse_mode(const std::string& mode) {
  if (mode == "raw") return DataMode::Raw;
  if (mode == "preprocessed") return DataMode::Preprocessed;
  throw ConfigError("--mode must be raw|preprocessed");
}

Dataset load_dataset(const std::string& path) {
  Dataset ds = load(path);
  if (!ds.has_split || !ds.has_stats)
    throw ParseError("dataset '" + path + "' lacks split or standardization");
  return ds;
}

void check_compat(const Model& model, const Dataset& ds, DataMode mode) {
  if (model.spec.input_bands != kBands)
    throw CompatError("checkpoint expects " + std::to_string(model.spec.input_bands) +
                      " bands, dataset provides " + std::to_string(kBands));
  if (model.spec.classes != ds.config.classes)
    throw CompatError("checkpoint has " + std::to_string(model.spec.classes) +
                      " classes, dataset has " +
                      std::to_string(ds.config.classes));
  const int t = nominal_length(ds, mode);
  if (model.spec.sequence_length != t)
    throw CompatError("checkpoint sequence length " +
                      std::to_string(model.spec.sequence_length) +
                      " does not match mode nominal length " + std::to_string(t));
}

std::vector<int> limited(std::vector<int> idx, int limit) {
  if (limit > 0 && static_cast<int>(idx.size()) > limit)
    idx.resize(static_cast<size_t>(limit));
  return idx;
}

Tensor standardized_series(const Dataset& ds, int index, DataMode mode, int t) {
  Batch b = collate(ds, {index}, mode, t);
  return reshape(b.x, {t, kBands});
}

int cmd_generate(const std::string& config_path, const std::string& out_dir,
                 int64_t seed_override) {
  ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{}
                                             : ExperimentConfig::parse_file(config_path);
  if (seed_override >= 0) cfg.seed = static_cast<uint64_t>(seed_override);
  cfg.data.seed = cfg.seed;
  Dataset ds = generate(cfg.data);
  block_split(ds, Rng(cfg.seed).fork(0xB10C5EED));
  compute_standardization(ds);
  fs::create_directories(out_dir);
  const std::string csv = out_dir + "/dataset.csv";
  save(ds, csv);

  std::vector<int64_t> class_counts(static_cast<size_t>(ds.config.classes), 0);
  for (const auto& s : ds.samples) ++class_counts[static_cast<size_t>(s.class_id)];
  std::printf("dataset: %s (%zu samples)\n", csv.c_str(), ds.samples.size());
  for (int c = 0; c < ds.config.classes; ++c)
    std::printf("  %s: %lld\n", ds.class_names[static_cast<size_t>(c)].c_str(),
                static_cast<long long>(class_counts[static_cast<size_t>(c)]));
  for (Partition p : {Partition::Train, Partition::Val, Partition::Test})
    std::printf("  %s: %zu samples\n", partition_name(p), ds.indices(p).size());
  return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& dataset_path,
              const std::string& out_dir, const std::string& mode_name,
              int64_t seed_override) {
  ExperimentConfig cfg = ExperimentConfig::parse_file(config_path);
  if (seed_override >= 0) cfg.seed = static_cast<uint64_t>(seed_override);
  if (!cfg.has_model) throw ConfigError("config: train needs a model section");
  const DataMode mode = parse_mode(mode_name);
  Dataset ds = load_dataset(dataset_path);

  ModelSpec spec = cfg.model;
  spec.input_bands = kBands;
  spec.classes = ds.config.classes;
  spec.sequence_length = nominal_length(ds, mode);
  spec.validate();
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;

  Rng init = Rng(cfg.seed).fork(0x400DE1);
  Model model = Model::build(spec, init);
  FitResult res = fit(model, ds, mode, tc);

  fs::create_directories(out_dir);
  save_checkpoint(res.model, out_dir + "/checkpoint.ckpt");
  write_training_log(out_dir + "/training_log.csv", res.history);
  std::printf("trained %s for %zu epochs; best val kappa %.6f at epoch %d\n",
              arch_name(spec.architecture), res.history.size(), res.best_kappa,
              res.best_epoch);
  return kExitOk;
}

int cmd_tune(const std::string& config_path, const std::string& dataset_path,
             const std::string& out_dir, const std::string& mode_name,
             int parallelism, int64_t seed_override) {
  ExperimentConfig cfg = ExperimentConfig::parse_file(config_path);
  if (seed_override >= 0) cfg.seed = static_cast<uint64_t>(seed_override);
  if (!cfg.has_tune) throw ConfigError("config: tune needs a tune section");
  const DataMode mode = parse_mode(mode_name);
  Dataset ds = load_dataset(dataset_path);

  SearchSpace space = SearchSpace::for_architecture(cfg.tune.architecture);
  ModelSpec tmpl;
  if (cfg.has_model && cfg.model.architecture == cfg.tune.architecture)
    tmpl = cfg.model;
  tmpl.architecture = cfg.tune.architecture;
  tmpl.input_bands = kBands;
  tmpl.classes = ds.config.classes;
  tmpl.sequence_length = nominal_length(ds, mode);
  TrainConfig base = cfg.train;

  fs::create_directories(out_dir);
  StudyOptions opt;
  opt.budget_trials = cfg.tune.budget_trials;
  opt.parallelism = std::min(parallelism, thread_cap());
  opt.seed = cfg.seed;
  opt.ledger_path = out_dir + "/study_ledger.jsonl";
  opt.asha = AshaState(cfg.tune.rungs);
  StudyResult res =
      run_study(space, ds, mode, tmpl, base, cfg.tune.train_fraction, opt);

  int exported = 0;
  for (const auto& trial : res.trials) {
    if (trial.status == TrialStatus::Failed || exported == 3) break;
    ModelSpec spec = tmpl;
    TrainConfig tc = base;
    space.apply(trial.config, spec, tc);
    tc.max_epochs = opt.asha.max_epochs();
    nlohmann::json out = {{"seed", cfg.seed},
                          {"model", spec.to_json()},
                          {"train", train_config_json(tc)}};
    std::ofstream os(out_dir + "/top" + std::to_string(exported + 1) + ".json");
    os << out.dump(2) << "\n";
    ++exported;
  }

  std::printf("study: %zu trials; ledger %s\n", res.trials.size(),
              opt.ledger_path.c_str());
  for (size_t i = 0; i < res.trials.size() && i < 10; ++i) {
    const Trial& t = res.trials[i];
    std::printf("  #%zu trial %d kappa %.6f status %s\n", i + 1, t.id,
                t.best_kappa, trial_status_name(t.status));
  }
  return kExitOk;
}

int cmd_evaluate(const std::string& checkpoint_path,
                 const std::string& dataset_path, const std::string& out_dir,
                 const std::string& mode_name) {
  Model model = load_checkpoint(checkpoint_path);
  Dataset ds = load_dataset(dataset_path);
  const DataMode mode = parse_mode(mode_name);
  check_compat(model, ds, mode);
  Evaluation ev = evaluate_model(model, ds, ds.indices(Partition::Test), mode);
  fs::create_directories(out_dir);
  write_confusion_csv(out_dir + "/confusion.csv", ev.report.confusion);
  std::printf("accuracy=%.6f kappa=%.6f macro_f1=%.6f\n", ev.report.accuracy,
              ev.report.kappa, ev.report.macro_f1);
  return kExitOk;
}

int cmd_attribute(const std::string& checkpoint_path,
                  const std::string& dataset_path, const std::string& out_dir,
                  const std::string& mode_name, const std::string& config_path) {
  ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{}
                                             : ExperimentConfig::parse_file(config_path);
  Model model = load_checkpoint(checkpoint_path);
  Dataset ds = load_dataset(dataset_path);
  const DataMode mode = parse_mode(mode_name);
  check_compat(model, ds, mode);
  const int t = model.spec.sequence_length;
  std::vector<int> idx = limited(ds.indices(Partition::Test), cfg.analysis.limit);
  std::vector<int64_t> ids;
  std::vector<AttributionMap> maps;
  for (int i : idx) {
    maps.push_back(input_gradients(model, standardized_series(ds, i, mode, t)));
    ids.push_back(ds.samples[static_cast<size_t>(i)].id);
  }
  fs::create_directories(out_dir);
  write_attribution_csv(out_dir + "/attribution.csv", ids, maps);
  std::printf("attribution: %zu samples -> %s/attribution.csv\n", maps.size(),
              out_dir.c_str());
  return kExitOk;
}

int cmd_attend(const std::string& checkpoint_path, const std::string& dataset_path,
               const std::string& out_dir, const std::string& mode_name,
               const std::string& config_path) {
  ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{}
                                             : ExperimentConfig::parse_file(config_path);
  Model model = load_checkpoint(checkpoint_path);
  Dataset ds = load_dataset(dataset_path);
  const DataMode mode = parse_mode(mode_name);
  check_compat(model, ds, mode);
  const int t = model.spec.sequence_length;
  std::vector<int> idx = limited(ds.indices(Partition::Test), cfg.analysis.limit);
  std::vector<int64_t> ids;
  std::vector<AttentionSummary> summaries;
  for (int i : idx) {
    summaries.push_back(
        attention_summary(model, standardized_series(ds, i, mode, t)));
    ids.push_back(ds.samples[static_cast<size_t>(i)].id);
  }
  fs::create_directories(out_dir);
  write_attention_csv(out_dir + "/attention.csv", ids, summaries);
  std::printf("attention: %zu samples -> %s/attention.csv\n", summaries.size(),
              out_dir.c_str());
  return kExitOk;
}

int cmd_embed(const std::string& checkpoint_path, const std::string& dataset_path,
              const std::string& out_dir, const std::string& mode_name,
              const std::string& config_path) {
  ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{}
                                             : ExperimentConfig::parse_file(config_path);
  Model model = load_checkpoint(checkpoint_path);
  Dataset ds = load_dataset(dataset_path);
  const DataMode mode = parse_mode(mode_name);
  check_compat(model, ds, mode);
  std::vector<int> idx = limited(ds.indices(Partition::Test), cfg.analysis.limit);
  EmbeddingSet set =
      extract_embeddings(model, ds, idx, mode, cfg.analysis.layer_index);
  PcaResult proj = pca(set.points, cfg.analysis.components);
  fs::create_directories(out_dir);
  write_embedding_csv(out_dir + "/embeddings.csv", set);
  write_embedding_csv(out_dir + "/embedding_pca.csv", set, &proj);
  write_pca_variance_csv(out_dir + "/pca_variance.csv", proj);
  std::printf("embeddings: %zu samples, layer %d -> %s\n", set.points.size(),
              cfg.analysis.layer_index, out_dir.c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attnseries: differentiable satellite time-series classification"};
  app.require_subcommand(1);

  std::string config_path, dataset_path, checkpoint_path, out_dir = ".";
  std::string mode_name = "raw";
  int parallelism = 1;
  int64_t seed_override = -1;

  auto add_common = [&](CLI::App* sub, bool needs_config, bool needs_dataset,
                        bool needs_checkpoint) {
    auto* c = sub->add_option("--config", config_path, "experiment config JSON");
    if (needs_config) c->required();
    if (needs_dataset)
      sub->add_option("--dataset", dataset_path, "dataset CSV path")->required();
    if (needs_checkpoint)
      sub->add_option("--checkpoint", checkpoint_path, "model checkpoint")
          ->required();
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--seed", seed_override, "override the config seed");
    sub->add_option("--mode", mode_name, "raw|preprocessed");
  };

  CLI::App* generate = app.add_subcommand("generate", "write a synthetic dataset");
  add_common(generate, false, false, false);
  CLI::App* train = app.add_subcommand("train", "train one model");
  add_common(train, true, true, false);
  CLI::App* tune = app.add_subcommand("tune", "hyperparameter search");
  add_common(tune, true, true, false);
  tune->add_option("--parallelism", parallelism, "concurrent trials");
  CLI::App* evaluate = app.add_subcommand("evaluate", "test-set metrics");
  add_common(evaluate, false, true, true);
  CLI::App* attribute =
      app.add_subcommand("attribute", "input-gradient attribution maps");
  add_common(attribute, false, true, true);
  CLI::App* attend = app.add_subcommand("attend", "attention score summaries");
  add_common(attend, false, true, true);
  CLI::App* embed = app.add_subcommand("embed", "hidden-feature embeddings + PCA");
  add_common(embed, false, true, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (generate->parsed())
      return cmd_generate(config_path, out_dir, seed_override);
    if (train->parsed())
      return cmd_train(config_path, dataset_path, out_dir, mode_name, seed_override);
    if (tune->parsed())
      return cmd_tune(config_path, dataset_path, out_dir, mode_name, parallelism,
                      seed_override);
    if (evaluate->parsed())
      return cmd_evaluate(checkpoint_path, dataset_path, out_dir, mode_name);
    if (attribute->parsed())
      return cmd_attribute(checkpoint_path, dataset_path, out_dir, mode_name,
                           config_path);
    if (attend->parsed())
      return cmd_attend(checkpoint_path, dataset_path, out_dir, mode_name,
                        config_path);
    if (embed->parsed())
      return cmd_embed(checkpoint_path, dataset_path, out_dir, mode_name,
                       config_path);
  } catch (const UnsupportedError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUnsupported;
  } catch (const CompatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitCompat;
  } catch (const ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitData;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitData;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitData;
  }
  return kExitUsage;
}
