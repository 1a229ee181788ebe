#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <future>
#include <limits>
#include <map>
#include <mutex>
#include <queue>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnseries/train.hpp"

namespace ats {

// ---------------------------------------------------------------------------
// search space

struct Dim {
  enum class Kind { Categorical, Uniform, LogUniform };
  std::string name;
  Kind kind = Kind::Categorical;
  std::vector<double> values;  // categorical choices
  double lo = 0.0, hi = 0.0;   // continuous bounds

  static Dim categorical(std::string name, std::vector<double> values) {
    Dim d;
    d.name = std::move(name);
    d.kind = Kind::Categorical;
    d.values = std::move(values);
    return d;
  }
  static Dim uniform(std::string name, double lo, double hi) {
    Dim d;
    d.name = std::move(name);
    d.kind = Kind::Uniform;
    d.lo = lo;
    d.hi = hi;
    return d;
  }
  static Dim log_uniform(std::string name, double lo, double hi) {
    Dim d;
    d.name = std::move(name);
    d.kind = Kind::LogUniform;
    d.lo = lo;
    d.hi = hi;
    return d;
  }

  bool contains(double v) const {
    switch (kind) {
      case Kind::Categorical:
        for (double c : values)
          if (c == v) return true;
        return false;
      case Kind::Uniform:
      case Kind::LogUniform:
        return v >= lo && v <= hi;
    }
    return false;
  }
};

using ConfigVector = std::vector<double>;

struct SearchSpace {
  Architecture architecture = Architecture::Transformer;
  std::vector<Dim> dims;

  static SearchSpace for_architecture(Architecture arch) {
    SearchSpace s;
    s.architecture = arch;
    const std::vector<double> dh = {16, 32, 64, 128, 256};
    switch (arch) {
      case Architecture::LstmRnn:
        s.dims.push_back(Dim::categorical("hidden_dim", dh));
        s.dims.push_back(Dim::categorical("layers", {1, 2, 3, 4, 5, 6, 7}));
        s.dims.push_back(Dim::uniform("dropout", 0.0, 1.0));
        s.dims.push_back(Dim::log_uniform("learning_rate", 1e-8, 1e-1));
        s.dims.push_back(Dim::log_uniform("weight_decay", 1e-12, 1e-1));
        break;
      case Architecture::Transformer:
        s.dims.push_back(Dim::categorical("hidden_dim", dh));
        s.dims.push_back(Dim::categorical("layers", {1, 2, 3, 4, 5, 6, 7, 8}));
        s.dims.push_back(Dim::categorical("heads", {1, 2, 3, 4, 5, 6, 7, 8}));
        s.dims.push_back(Dim::categorical("warmup_steps", {10, 100, 1000}));
        s.dims.push_back(Dim::log_uniform("weight_decay", 1e-12, 1e-1));
        break;
      case Architecture::MsResnet:
        s.dims.push_back(Dim::categorical("hidden_dim", dh));
        s.dims.push_back(Dim::log_uniform("learning_rate", 1e-8, 1e-1));
        s.dims.push_back(Dim::log_uniform("weight_decay", 1e-12, 1e-1));
        break;
      case Architecture::TempCnn:
        s.dims.push_back(Dim::categorical("hidden_dim", dh));
        s.dims.push_back(Dim::categorical("kernel_size", {3, 5, 7}));
        s.dims.push_back(Dim::uniform("dropout", 0.0, 1.0));
        s.dims.push_back(Dim::log_uniform("learning_rate", 1e-8, 1e-1));
        s.dims.push_back(Dim::log_uniform("weight_decay", 1e-12, 1e-1));
        break;
      case Architecture::SoftAttnGru:
        throw ConfigError("tune: softattn_gru has a fixed published architecture");
    }
    return s;
  }

  int index_of(const std::string& name) const {
    for (size_t i = 0; i < dims.size(); ++i)
      if (dims[i].name == name) return static_cast<int>(i);
    return -1;
  }

  bool contains(const ConfigVector& c) const {
    if (c.size() != dims.size()) return false;
    for (size_t i = 0; i < dims.size(); ++i)
      if (!dims[i].contains(c[i])) return false;
    return valid(c);
  }

  // cross-dimension validity: attention heads must divide the width
  bool valid(const ConfigVector& c) const {
    const int hd = index_of("hidden_dim"), hh = index_of("heads");
    if (hd < 0 || hh < 0) return true;
    const int dh = static_cast<int>(c[static_cast<size_t>(hd)]);
    const int heads = static_cast<int>(c[static_cast<size_t>(hh)]);
    return heads >= 1 && dh % heads == 0;
  }

  // redraw the heads dimension from its valid subset
  void repair(ConfigVector& c, Rng& rng) const {
    if (valid(c)) return;
    const int hd = index_of("hidden_dim"), hh = index_of("heads");
    const int dh = static_cast<int>(c[static_cast<size_t>(hd)]);
    std::vector<double> ok;
    for (double h : dims[static_cast<size_t>(hh)].values)
      if (dh % static_cast<int>(h) == 0) ok.push_back(h);
    c[static_cast<size_t>(hh)] = ok[rng.integer(ok.size())];
  }

  void apply(const ConfigVector& c, ModelSpec& spec, TrainConfig& tc) const {
    for (size_t i = 0; i < dims.size(); ++i) {
      const std::string& n = dims[i].name;
      const double v = c[i];
      if (n == "hidden_dim") spec.hidden_dim = static_cast<int>(v);
      else if (n == "layers") spec.layers = static_cast<int>(v);
      else if (n == "heads") spec.heads = static_cast<int>(v);
      else if (n == "kernel_size") spec.kernel_size = static_cast<int>(v);
      else if (n == "dropout") spec.dropout = v;
      else if (n == "warmup_steps") {
        spec.warmup_steps = static_cast<int>(v);
        tc.warmup_steps = static_cast<int>(v);
        tc.scheduler = Scheduler::Warmup;
      } else if (n == "learning_rate") tc.learning_rate = v;
      else if (n == "weight_decay") tc.weight_decay = v;
      else throw ConfigError("search space: unknown dimension '" + n + "'");
    }
    spec.architecture = architecture;
  }

  nlohmann::json config_json(const ConfigVector& c) const {
    nlohmann::json j;
    j["architecture"] = arch_name(architecture);
    for (size_t i = 0; i < dims.size(); ++i) j[dims[i].name] = c[i];
    return j;
  }

  ConfigVector config_from_json(const nlohmann::json& j) const {
    ConfigVector c(dims.size(), 0.0);
    for (size_t i = 0; i < dims.size(); ++i) c[i] = j.at(dims[i].name).get<double>();
    return c;
  }
};

// categorical dims uniform over their sets, continuous dims (log-)uniform
inline ConfigVector sample_random(const SearchSpace& space, Rng& rng) {
  ConfigVector c(space.dims.size(), 0.0);
  for (size_t i = 0; i < space.dims.size(); ++i) {
    const Dim& d = space.dims[i];
    switch (d.kind) {
      case Dim::Kind::Categorical:
        c[i] = d.values[rng.integer(d.values.size())];
        break;
      case Dim::Kind::Uniform:
        c[i] = rng.uniform(d.lo, d.hi);
        break;
      case Dim::Kind::LogUniform:
        c[i] = std::exp(rng.uniform(std::log(d.lo), std::log(d.hi)));
        break;
    }
  }
  space.repair(c, rng);
  return c;
}

// ---------------------------------------------------------------------------
// performance-weighted KDE sampler

struct Observation {
  ConfigVector config;
  double kappa = 0.0;
};

class KdeSampler {
 public:
  explicit KdeSampler(SearchSpace space, int warm_start = 34)
      : space_(std::move(space)), warm_start_(warm_start) {}

  const SearchSpace& space() const { return space_; }
  int warm_start() const { return warm_start_; }
  size_t observation_count() const { return observations_.size(); }
  void observe(ConfigVector config, double kappa) {
    observations_.push_back({std::move(config), kappa});
  }

  ConfigVector sample(Rng& rng) {
    if (static_cast<int>(observations_.size()) < warm_start_)
      return sample_random(space_, rng);
    std::vector<double> w(observations_.size());
    double total = 0.0;
    for (size_t i = 0; i < observations_.size(); ++i) {
      w[i] = std::max(observations_[i].kappa, 0.0);
      total += w[i];
    }
    if (total <= 0.0) return sample_random(space_, rng);

    // anchor observation drawn proportionally to performance
    double pick = rng.uniform() * total;
    size_t anchor = 0;
    for (; anchor + 1 < w.size(); ++anchor) {
      pick -= w[anchor];
      if (pick < 0.0) break;
    }

    ConfigVector c(space_.dims.size(), 0.0);
    for (size_t d = 0; d < space_.dims.size(); ++d) {
      const Dim& dim = space_.dims[d];
      if (dim.kind == Dim::Kind::Categorical) {
        // frequency weights scaled by performance
        std::vector<double> vw(dim.values.size(), 0.0);
        double vw_total = 0.0;
        for (size_t i = 0; i < observations_.size(); ++i)
          for (size_t v = 0; v < dim.values.size(); ++v)
            if (observations_[i].config[d] == dim.values[v]) {
              vw[v] += w[i];
              vw_total += w[i];
            }
        if (vw_total <= 0.0) {
          c[d] = dim.values[rng.integer(dim.values.size())];
        } else {
          double p = rng.uniform() * vw_total;
          size_t v = 0;
          for (; v + 1 < vw.size(); ++v) {
            p -= vw[v];
            if (p < 0.0) break;
          }
          c[d] = dim.values[v];
        }
      } else {
        const bool log_space = dim.kind == Dim::Kind::LogUniform;
        auto to_internal = [&](double x) { return log_space ? std::log(x) : x; };
        auto from_internal = [&](double x) { return log_space ? std::exp(x) : x; };
        const double bw = silverman_bandwidth(d, log_space);
        double v = to_internal(observations_[anchor].config[d]) + bw * rng.normal();
        v = std::clamp(v, to_internal(dim.lo), to_internal(dim.hi));
        c[d] = from_internal(v);
      }
    }
    space_.repair(c, rng);
    return c;
  }

 private:
  double silverman_bandwidth(size_t d, bool log_space) const {
    std::vector<double> xs;
    xs.reserve(observations_.size());
    for (const auto& o : observations_)
      xs.push_back(log_space ? std::log(o.config[d]) : o.config[d]);
    const double n = static_cast<double>(xs.size());
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= n;
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= std::max(1.0, n - 1.0);
    std::vector<double> sorted = xs;
    std::sort(sorted.begin(), sorted.end());
    const double q1 = sorted[static_cast<size_t>(0.25 * (n - 1))];
    const double q3 = sorted[static_cast<size_t>(0.75 * (n - 1))];
    const double spread = std::min(std::sqrt(var), (q3 - q1) / 1.34);
    const double bw = 0.9 * spread * std::pow(n, -0.2);
    return bw > 0.0 ? bw : 0.0;  // degenerate spread reproduces the anchor
  }

  SearchSpace space_;
  int warm_start_;
  std::vector<Observation> observations_;
};

// ---------------------------------------------------------------------------
// asynchronous successive halving

enum class TrialStatus { Running, Stopped, Completed, Failed };

inline const char* trial_status_name(TrialStatus s) {
  switch (s) {
    case TrialStatus::Running: return "running";
    case TrialStatus::Stopped: return "stopped";
    case TrialStatus::Completed: return "completed";
    case TrialStatus::Failed: return "failed";
  }
  return "?";
}

struct Trial {
  int id = 0;
  ConfigVector config;
  std::vector<std::pair<int, double>> rung_readings;  // (epoch, kappa)
  TrialStatus status = TrialStatus::Running;
  int highest_rung = -1;
  double best_kappa = -std::numeric_limits<double>::infinity();
  std::string error;
};

struct AshaState {
  std::vector<int> rungs = {10, 20, 40, 60};  // first = grace, last = max epochs
  std::vector<std::vector<double>> rung_kappas;

  AshaState() { rung_kappas.resize(rungs.size()); }
  explicit AshaState(std::vector<int> boundaries) : rungs(std::move(boundaries)) {
    for (size_t i = 1; i < rungs.size(); ++i)
      if (rungs[i] <= rungs[i - 1])
        throw ConfigError("asha: rung boundaries must be strictly increasing");
    rung_kappas.resize(rungs.size());
  }

  int max_epochs() const { return rungs.back(); }
  int grace() const { return rungs.front(); }
};

enum class AshaDecision { Continue, StopAtRung, Finished };

inline void asha_append(AshaState& state, int rung_index, double kappa) {
  state.rung_kappas[static_cast<size_t>(rung_index)].push_back(kappa);
}

// top-half rule against the readings present now: rank = 1 + #strictly better
inline AshaDecision asha_decide(const AshaState& state, int rung_index,
                                double kappa) {
  if (rung_index == static_cast<int>(state.rungs.size()) - 1)
    return AshaDecision::Finished;
  const auto& readings = state.rung_kappas[static_cast<size_t>(rung_index)];
  const int n = static_cast<int>(readings.size());
  int rank = 1;
  for (double k : readings)
    if (k > kappa) ++rank;
  const int keep = (n + 1) / 2;
  return rank <= keep ? AshaDecision::Continue : AshaDecision::StopAtRung;
}

inline AshaDecision asha_report(AshaState& state, Trial& trial, int epoch,
                                double kappa) {
  if (epoch > state.max_epochs())
    throw ContractError("asha_report: epoch beyond the final rung");
  const int expected = trial.highest_rung + 1;
  if (expected >= static_cast<int>(state.rungs.size()) ||
      state.rungs[static_cast<size_t>(expected)] != epoch)
    throw ContractError("asha_report: out-of-order rung report at epoch " +
                        std::to_string(epoch));
  asha_append(state, expected, kappa);
  trial.highest_rung = expected;
  trial.rung_readings.push_back({epoch, kappa});
  trial.best_kappa = std::max(trial.best_kappa, kappa);
  AshaDecision d = asha_decide(state, expected, kappa);
  if (d == AshaDecision::Finished) trial.status = TrialStatus::Completed;
  if (d == AshaDecision::StopAtRung) trial.status = TrialStatus::Stopped;
  return d;
}

// ---------------------------------------------------------------------------
// study execution

// Runs one trial's training in resumable segments. Implementations must allow
// concurrent calls for different trial ids; calls for one trial arrive in
// order from a single thread at a time.
class StudyRunner {
 public:
  virtual ~StudyRunner() = default;
  struct SegmentResult {
    double kappa = 0.0;           // validation kappa at the segment end
    bool exhausted = false;       // training stopped before the target epoch
    bool failed = false;
    std::string error;
  };
  virtual SegmentResult run_segment(int trial_id, const ConfigVector& config,
                                    int from_epoch, int to_epoch) = 0;
  virtual void discard(int trial_id) {}
};

struct StudyOptions {
  int budget_trials = 300;
  int parallelism = 1;
  uint64_t seed = 0;
  std::string ledger_path;  // JSON-lines rung reports; enables resumption
  AshaState asha;
};

struct StudyResult {
  std::vector<Trial> trials;  // ranked by best kappa, failures last
  AshaState asha;
};

namespace detail {

struct LedgerEntry {
  int trial_id;
  int epoch;
  double kappa;
};

struct LedgerRecord {
  double kappa = 0.0;
  bool failed = false;
  bool finished_early = false;  // trial's own stopping ended it below a rung
};

inline std::map<std::pair<int, int>, LedgerRecord> read_ledger(
    const std::string& path, const std::vector<int>& rungs) {
  std::map<std::pair<int, int>, LedgerRecord> out;
  std::ifstream is(path);
  if (!is) return out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw ParseError("study ledger: bad JSON line: " + line);
    LedgerRecord rec;
    const auto& k = j.at("kappa");
    const int epoch = j.at("epoch").get<int>();
    if (k.is_null()) {
      rec.failed = true;
    } else {
      rec.kappa = k.get<double>();
      rec.finished_early = j.at("decision").get<std::string>() == "finished" &&
                           epoch != rungs.back();
    }
    out[{j.at("trial_id").get<int>(), epoch}] = rec;
  }
  return out;
}

}  // namespace detail

// Deterministic study: trials are assigned to `parallelism` virtual workers
// and rung reports are committed in virtual-time order, so results do not
// depend on thread scheduling. Actual segment computation runs on real
// threads, one in flight per virtual worker.
inline StudyResult run_study(const SearchSpace& space, StudyRunner& runner,
                             const StudyOptions& options) {
  if (options.budget_trials < 1) throw ConfigError("study: budget must be >= 1");
  if (options.parallelism < 1) throw ConfigError("study: parallelism must be >= 1");

  KdeSampler sampler(space);
  AshaState asha = options.asha;
  std::vector<Trial> trials;
  trials.reserve(static_cast<size_t>(options.budget_trials));

  auto replay = options.ledger_path.empty()
                    ? std::map<std::pair<int, int>, detail::LedgerRecord>{}
                    : detail::read_ledger(options.ledger_path, options.asha.rungs);
  std::ofstream ledger;
  if (!options.ledger_path.empty()) {
    ledger.open(options.ledger_path, std::ios::app);
    if (!ledger) throw ParseError("study: cannot open ledger '" +
                                  options.ledger_path + "'");
  }

  struct InFlight {
    int trial_id = -1;
    int rung_index = 0;
    double finish_at = 0.0;
    std::future<StudyRunner::SegmentResult> future;
    bool replayed = false;
    StudyRunner::SegmentResult replay_result;
  };

  // min-heap over (virtual finish time, worker id)
  auto cmp = [](const std::pair<double, int>& a, const std::pair<double, int>& b) {
    return a.first > b.first || (a.first == b.first && a.second > b.second);
  };
  std::priority_queue<std::pair<double, int>, std::vector<std::pair<double, int>>,
                      decltype(cmp)>
      events(cmp);
  std::vector<InFlight> workers(static_cast<size_t>(options.parallelism));

  int next_trial = 0;
  Rng study_rng = Rng(options.seed).fork(0x57D);

  auto launch_segment = [&](int worker, int trial_id, int rung_index, double now) {
    InFlight& w = workers[static_cast<size_t>(worker)];
    w.trial_id = trial_id;
    w.rung_index = rung_index;
    const int from = rung_index == 0 ? 0 : asha.rungs[static_cast<size_t>(rung_index - 1)];
    const int to = asha.rungs[static_cast<size_t>(rung_index)];
    w.finish_at = now + static_cast<double>(to - from);
    auto it = replay.find({trial_id, to});
    if (it != replay.end()) {
      w.replayed = true;
      if (it->second.failed)
        w.replay_result = {0.0, false, true, "replayed failure"};
      else
        w.replay_result = {it->second.kappa, it->second.finished_early, false, ""};
    } else {
      w.replayed = false;
      const ConfigVector& cfg = trials[static_cast<size_t>(trial_id)].config;
      w.future = std::async(std::launch::async, [&runner, trial_id, cfg, from, to] {
        try {
          return runner.run_segment(trial_id, cfg, from, to);
        } catch (const std::exception& e) {
          StudyRunner::SegmentResult r;
          r.failed = true;
          r.error = e.what();
          return r;
        }
      });
    }
    events.push({w.finish_at, worker});
  };

  auto start_next_trial = [&](int worker, double now) {
    if (next_trial >= options.budget_trials) return false;
    const int id = next_trial++;
    Trial t;
    t.id = id;
    // pre-warm-start sampling is keyed by trial id alone, so the sampled set
    // is identical at any parallelism
    Rng trial_rng = Rng(options.seed).fork(0x7B1A1).fork(static_cast<uint64_t>(id));
    if (static_cast<int>(sampler.observation_count()) < sampler.warm_start())
      t.config = sample_random(space, trial_rng);
    else
      t.config = sampler.sample(trial_rng);
    trials.push_back(std::move(t));
    launch_segment(worker, id, 0, now);
    return true;
  };

  for (int w = 0; w < options.parallelism; ++w)
    if (!start_next_trial(w, 0.0)) break;

  while (!events.empty()) {
    auto [now, worker] = events.top();
    events.pop();
    InFlight& w = workers[static_cast<size_t>(worker)];
    StudyRunner::SegmentResult res =
        w.replayed ? w.replay_result : w.future.get();
    Trial& trial = trials[static_cast<size_t>(w.trial_id)];
    const int epoch = asha.rungs[static_cast<size_t>(w.rung_index)];

    if (res.failed) {
      trial.status = TrialStatus::Failed;
      trial.error = res.error;
      runner.discard(trial.id);
      if (ledger.is_open() && !w.replayed) {
        nlohmann::json j = {{"trial_id", trial.id},
                            {"config", space.config_json(trial.config)},
                            {"epoch", epoch},
                            {"kappa", nullptr},
                            {"decision", "failed"}};
        ledger << j.dump() << "\n" << std::flush;
      }
      start_next_trial(worker, now);
      continue;
    }

    AshaDecision decision = asha_report(asha, trial, epoch, res.kappa);
    if (decision == AshaDecision::Continue && res.exhausted) {
      // the trial's own early stopping ended training below the next rung
      decision = AshaDecision::Finished;
      trial.status = TrialStatus::Completed;
    }
    if (ledger.is_open() && !w.replayed) {
      nlohmann::json j = {{"trial_id", trial.id},
                          {"config", space.config_json(trial.config)},
                          {"epoch", epoch},
                          {"kappa", res.kappa},
                          {"decision", decision == AshaDecision::Continue
                                           ? "continue"
                                           : decision == AshaDecision::Finished
                                                 ? "finished"
                                                 : "stop"}};
      ledger << j.dump() << "\n" << std::flush;
    }

    if (decision == AshaDecision::Continue) {
      launch_segment(worker, trial.id, w.rung_index + 1, now);
    } else {
      sampler.observe(trial.config, trial.best_kappa);
      runner.discard(trial.id);
      start_next_trial(worker, now);
    }
  }

  StudyResult result;
  result.asha = asha;
  result.trials = trials;
  std::stable_sort(result.trials.begin(), result.trials.end(),
                   [](const Trial& a, const Trial& b) {
                     const bool fa = a.status == TrialStatus::Failed;
                     const bool fb = b.status == TrialStatus::Failed;
                     if (fa != fb) return fb;
                     return a.best_kappa > b.best_kappa;
                   });
  return result;
}

// trains real models on a dataset subset; one TrainSession per live trial
class FitStudyRunner : public StudyRunner {
 public:
  FitStudyRunner(const SearchSpace& space, const Dataset& ds, DataMode mode,
                 ModelSpec spec_template, TrainConfig train_template,
                 double train_fraction, uint64_t seed)
      : space_(space),
        ds_(ds),
        mode_(mode),
        spec_template_(spec_template),
        train_template_(train_template),
        seed_(seed) {
    train_idx_ = ds.indices(Partition::Train);
    val_idx_ = ds.indices(Partition::Val);
    if (train_fraction < 1.0) {
      // deterministic subset of the training partition
      Rng sub = Rng(seed).fork(0x5AB);
      for (size_t i = train_idx_.size() - 1; i > 0; --i)
        std::swap(train_idx_[i], train_idx_[static_cast<size_t>(sub.integer(i + 1))]);
      const size_t keep = std::max<size_t>(
          1, static_cast<size_t>(train_fraction * static_cast<double>(train_idx_.size())));
      train_idx_.resize(keep);
      std::sort(train_idx_.begin(), train_idx_.end());
    }
  }

  SegmentResult run_segment(int trial_id, const ConfigVector& config,
                            int from_epoch, int to_epoch) override {
    std::shared_ptr<TrainSession> session;
    {
      std::lock_guard<std::mutex> lk(mu_);
      auto it = sessions_.find(trial_id);
      if (it == sessions_.end()) {
        // fresh session; when resuming from a ledger the prefix epochs are
        // recomputed deterministically
        ModelSpec spec = spec_template_;
        TrainConfig tc = train_template_;
        space_.apply(config, spec, tc);
        tc.seed = Rng(seed_).fork(static_cast<uint64_t>(trial_id)).next_u64();
        tc.max_epochs = 1 << 20;  // rung boundaries drive the epoch budget
        Rng init(tc.seed);
        Model model = Model::build(spec, init);
        session = std::make_shared<TrainSession>(model, ds_, train_idx_, val_idx_,
                                                 mode_, tc);
        sessions_[trial_id] = session;
      } else {
        session = it->second;
      }
    }
    session->run_to(to_epoch);
    SegmentResult res;
    res.exhausted = session->stopped();
    res.kappa = session->history().empty() ? 0.0
                                           : session->history().back().val_kappa;
    return res;
  }

  void discard(int trial_id) override {
    std::lock_guard<std::mutex> lk(mu_);
    sessions_.erase(trial_id);
  }

 private:
  const SearchSpace& space_;
  const Dataset& ds_;
  DataMode mode_;
  ModelSpec spec_template_;
  TrainConfig train_template_;
  uint64_t seed_;
  std::vector<int> train_idx_, val_idx_;
  std::mutex mu_;
  std::map<int, std::shared_ptr<TrainSession>> sessions_;
};

inline StudyResult run_study(const SearchSpace& space, const Dataset& ds,
                             DataMode mode, ModelSpec spec_template,
                             TrainConfig train_template, double train_fraction,
                             const StudyOptions& options) {
  FitStudyRunner runner(space, ds, mode, spec_template, train_template,
                        train_fraction, options.seed);
  return run_study(space, runner, options);
}

}  // namespace ats
