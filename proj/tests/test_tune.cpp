#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>

#include "attnseries/tune.hpp"
#include "testutil.hpp"

using namespace ats;

namespace {

// fake objective: kappa depends only on categorical dims, no training
struct FakeRunner : StudyRunner {
  std::function<double(const ConfigVector&)> objective;
  std::function<bool(const ConfigVector&)> should_fail = [](const ConfigVector&) {
    return false;
  };

  SegmentResult run_segment(int, const ConfigVector& config, int, int) override {
    if (should_fail(config)) throw std::runtime_error("synthetic failure");
    return {objective(config), false, false, ""};
  }
};

}  // namespace

TEST_CASE("sample_random stays inside the search space") {
  for (Architecture arch : {Architecture::LstmRnn, Architecture::Transformer,
                            Architecture::MsResnet, Architecture::TempCnn}) {
    SearchSpace space = SearchSpace::for_architecture(arch);
    Rng rng(1);
    for (int i = 0; i < 25000; ++i) {
      ConfigVector c = sample_random(space, rng);
      REQUIRE(space.contains(c));
    }
  }
}

TEST_CASE("hidden_dim samples stay in the declared set") {
  SearchSpace space = SearchSpace::for_architecture(Architecture::MsResnet);
  const int hd = space.index_of("hidden_dim");
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    ConfigVector c = sample_random(space, rng);
    const double v = c[static_cast<size_t>(hd)];
    CHECK((v == 16 || v == 32 || v == 64 || v == 128 || v == 256));
  }
}

TEST_CASE("learning-rate samples are log-uniform") {
  SearchSpace space = SearchSpace::for_architecture(Architecture::MsResnet);
  const int lr_dim = space.index_of("learning_rate");
  Rng rng(3);
  const int n = 100000;
  std::vector<double> logs;
  logs.reserve(n);
  for (int i = 0; i < n; ++i)
    logs.push_back(std::log10(sample_random(space, rng)[static_cast<size_t>(lr_dim)]));
  std::sort(logs.begin(), logs.end());
  double ks = 0.0;
  for (int i = 0; i < n; ++i) {
    const double cdf = (logs[static_cast<size_t>(i)] + 8.0) / 7.0;  // U[-8,-1]
    ks = std::max(ks, std::fabs(cdf - (i + 1.0) / n));
    ks = std::max(ks, std::fabs(cdf - static_cast<double>(i) / n));
  }
  INFO("KS statistic " << ks);
  CHECK(ks < 0.01);
}

TEST_CASE("sampling is deterministic per seed") {
  SearchSpace space = SearchSpace::for_architecture(Architecture::Transformer);
  Rng a(7), b(7);
  for (int i = 0; i < 100; ++i)
    CHECK(sample_random(space, a) == sample_random(space, b));
}

TEST_CASE("transformer samples always satisfy the heads constraint") {
  SearchSpace space = SearchSpace::for_architecture(Architecture::Transformer);
  Rng rng(8);
  for (int i = 0; i < 5000; ++i) {
    ConfigVector c = sample_random(space, rng);
    const int dh = static_cast<int>(c[static_cast<size_t>(space.index_of("hidden_dim"))]);
    const int heads = static_cast<int>(c[static_cast<size_t>(space.index_of("heads"))]);
    CHECK(dh % heads == 0);
  }
}

TEST_CASE("kde sampler warm-start matches random sampling") {
  SearchSpace space = SearchSpace::for_architecture(Architecture::TempCnn);
  KdeSampler sampler(space);
  Rng fill(4);
  for (int i = 0; i < 33; ++i) sampler.observe(sample_random(space, fill), 0.5);
  Rng a(11), b(11);
  CHECK(sampler.sample(a) == sample_random(space, b));
}

TEST_CASE("kde sampler concentrates on a dominant configuration") {
  SearchSpace space = SearchSpace::for_architecture(Architecture::TempCnn);
  KdeSampler sampler(space);
  Rng fill(5);
  ConfigVector winner = sample_random(space, fill);
  for (int i = 0; i < 40; ++i) sampler.observe(winner, 1.0);
  Rng rng(6);
  int match = 0;
  const int hd = space.index_of("hidden_dim");
  const int ks = space.index_of("kernel_size");
  for (int i = 0; i < 1000; ++i) {
    ConfigVector c = sampler.sample(rng);
    match += c[static_cast<size_t>(hd)] == winner[static_cast<size_t>(hd)] &&
             c[static_cast<size_t>(ks)] == winner[static_cast<size_t>(ks)];
  }
  CHECK(match >= 900);
}

TEST_CASE("kde sampler falls back to random when all kappas are zero") {
  SearchSpace space = SearchSpace::for_architecture(Architecture::TempCnn);
  KdeSampler sampler(space);
  Rng fill(9);
  for (int i = 0; i < 40; ++i) sampler.observe(sample_random(space, fill), 0.0);
  Rng a(12), b(12);
  CHECK(sampler.sample(a) == sample_random(space, b));
}

TEST_CASE("asha decisions") {
  AshaState st;
  Trial t0;
  t0.id = 0;
  // first reporter is vacuously in the top half
  CHECK(asha_report(st, t0, 10, 0.2) == AshaDecision::Continue);

  AshaState st2;
  for (double k : {0.1, 0.2, 0.3, 0.4}) asha_append(st2, 0, k);
  Trial t1;
  t1.id = 1;
  CHECK(asha_report(st2, t1, 10, 0.05) == AshaDecision::StopAtRung);
  CHECK(t1.status == TrialStatus::Stopped);

  // terminal rung
  AshaState st3;
  Trial t2;
  t2.id = 2;
  CHECK(asha_report(st3, t2, 10, 0.5) == AshaDecision::Continue);
  CHECK(asha_report(st3, t2, 20, 0.6) == AshaDecision::Continue);
  CHECK(asha_report(st3, t2, 40, 0.7) == AshaDecision::Continue);
  CHECK(asha_report(st3, t2, 60, 0.8) == AshaDecision::Finished);
  CHECK(t2.status == TrialStatus::Completed);

  // out-of-order reports are rejected
  AshaState st4;
  Trial t3;
  t3.id = 3;
  CHECK_THROWS_AS(asha_report(st4, t3, 20, 0.5), ContractError);
  CHECK_THROWS_AS(asha_report(st4, t3, 70, 0.5), ContractError);
}

TEST_CASE("synchronous study consumes no more than the halving budget") {
  // all 64 trials report a rung before any decision is taken
  Rng rng(13);
  const int n = 64;
  AshaState st;
  std::vector<double> kappas(n);
  for (auto& k : kappas) k = rng.uniform();

  std::vector<int> alive(n);
  for (int i = 0; i < n; ++i) alive[static_cast<size_t>(i)] = i;
  int64_t epochs_consumed = 0;
  int prev_epoch = 0;
  for (size_t r = 0; r < st.rungs.size(); ++r) {
    epochs_consumed +=
        static_cast<int64_t>(alive.size()) * (st.rungs[r] - prev_epoch);
    prev_epoch = st.rungs[r];
    for (int i : alive) asha_append(st, static_cast<int>(r), kappas[static_cast<size_t>(i)]);
    std::vector<int> next;
    for (int i : alive)
      if (asha_decide(st, static_cast<int>(r), kappas[static_cast<size_t>(i)]) ==
          AshaDecision::Continue)
        next.push_back(i);
    alive = next;
  }
  const int64_t bound = 64 * 10 + 32 * 10 + 16 * 20 + 8 * 20;
  INFO("consumed " << epochs_consumed << " bound " << bound);
  CHECK(epochs_consumed <= bound);
}

TEST_CASE("study with a fake objective finds the grid optimum") {
  SearchSpace space = SearchSpace::for_architecture(Architecture::MsResnet);
  FakeRunner runner;
  runner.objective = [](const ConfigVector& c) {
    // peak at hidden_dim 64
    const double dh = c[0];
    return 1.0 - std::fabs(std::log2(dh) - 6.0) * 0.1;
  };
  StudyOptions opt;
  opt.budget_trials = 50;
  opt.parallelism = 1;
  opt.seed = 17;
  StudyResult res = run_study(space, runner, opt);
  REQUIRE(static_cast<int>(res.trials.size()) == 50);

  // brute-force evaluation over the categorical grid
  double best = -1.0, best_dh = 0.0;
  for (double dh : space.dims[0].values) {
    const double k = 1.0 - std::fabs(std::log2(dh) - 6.0) * 0.1;
    if (k > best) {
      best = k;
      best_dh = dh;
    }
  }
  CHECK(res.trials.front().config[0] == best_dh);
  CHECK(res.trials.front().best_kappa == Catch::Approx(best));

  // rank order is by best kappa
  for (size_t i = 1; i < res.trials.size(); ++i)
    CHECK(res.trials[i - 1].best_kappa >= res.trials[i].best_kappa);
}

TEST_CASE("budget one produces a single completed trial") {
  SearchSpace space = SearchSpace::for_architecture(Architecture::MsResnet);
  FakeRunner runner;
  runner.objective = [](const ConfigVector&) { return 0.5; };
  StudyOptions opt;
  opt.budget_trials = 1;
  opt.seed = 1;
  StudyResult res = run_study(space, runner, opt);
  REQUIRE(res.trials.size() == 1);
  CHECK(res.trials[0].status == TrialStatus::Completed);
  CHECK(res.trials[0].rung_readings.size() == 4);
}

TEST_CASE("pre-warm-start configurations are parallelism independent") {
  SearchSpace space = SearchSpace::for_architecture(Architecture::TempCnn);
  auto run = [&](int parallelism) {
    FakeRunner runner;
    runner.objective = [](const ConfigVector& c) { return c[0] / 256.0; };
    StudyOptions opt;
    opt.budget_trials = 30;  // below the warm-start threshold
    opt.parallelism = parallelism;
    opt.seed = 23;
    StudyResult res = run_study(space, runner, opt);
    std::vector<ConfigVector> configs;
    for (const auto& t : res.trials) configs.push_back(t.config);
    std::sort(configs.begin(), configs.end());
    return configs;
  };
  CHECK(run(1) == run(4));
}

TEST_CASE("failed trials never outrank completed ones") {
  SearchSpace space = SearchSpace::for_architecture(Architecture::MsResnet);
  FakeRunner runner;
  runner.objective = [](const ConfigVector&) { return 0.01; };
  runner.should_fail = [](const ConfigVector& c) { return c[0] >= 128; };
  StudyOptions opt;
  opt.budget_trials = 40;
  opt.seed = 31;
  StudyResult res = run_study(space, runner, opt);
  bool seen_failed = false;
  int failures = 0;
  for (const auto& t : res.trials) {
    if (t.status == TrialStatus::Failed) {
      seen_failed = true;
      ++failures;
    } else {
      CHECK_FALSE(seen_failed);  // completed/stopped all rank before failures
    }
  }
  CHECK(failures > 0);
}

TEST_CASE("no trial trains past a bottom-half rung decision") {
  SearchSpace space = SearchSpace::for_architecture(Architecture::MsResnet);
  // objective keyed to the trial's own config, rerun deterministically
  FakeRunner runner;
  runner.objective = [](const ConfigVector& c) {
    return 0.5 + 0.3 * std::sin(c[1] * 1e5);
  };
  StudyOptions opt;
  opt.budget_trials = 25;
  opt.seed = 41;
  StudyResult res = run_study(space, runner, opt);
  // replay the commit order: single worker means trials run depth-first in id
  // order, so rung lists rebuild identically
  AshaState sim;
  std::vector<Trial> by_id = res.trials;
  std::sort(by_id.begin(), by_id.end(),
            [](const Trial& a, const Trial& b) { return a.id < b.id; });
  for (const auto& t : by_id) {
    for (size_t r = 0; r < t.rung_readings.size(); ++r) {
      const double kappa = t.rung_readings[r].second;
      asha_append(sim, static_cast<int>(r), kappa);
      const AshaDecision d = asha_decide(sim, static_cast<int>(r), kappa);
      const bool trained_past = r + 1 < t.rung_readings.size();
      if (trained_past)
        CHECK(d == AshaDecision::Continue);
      if (d == AshaDecision::StopAtRung)
        CHECK_FALSE(trained_past);
    }
  }
}

TEST_CASE("interrupted studies resume to an identical ledger") {
  testutil::TempDir dir("ledger");
  SearchSpace space = SearchSpace::for_architecture(Architecture::TempCnn);
  auto make_runner = [] {
    FakeRunner r;
    r.objective = [](const ConfigVector& c) { return c[0] / 256.0 + c[2]; };
    return r;
  };
  StudyOptions opt;
  opt.budget_trials = 12;
  opt.parallelism = 2;
  opt.seed = 53;

  opt.ledger_path = dir.str() + "/full.jsonl";
  FakeRunner r1 = make_runner();
  run_study(space, r1, opt);
  std::ifstream full_in(opt.ledger_path);
  std::string full((std::istreambuf_iterator<char>(full_in)), {});

  // simulate an interrupt: keep the first 7 lines only
  std::istringstream lines(full);
  std::string line, partial;
  for (int i = 0; i < 7 && std::getline(lines, line); ++i) partial += line + "\n";
  const std::string resumed_path = dir.str() + "/resumed.jsonl";
  {
    std::ofstream out(resumed_path);
    out << partial;
  }
  opt.ledger_path = resumed_path;
  FakeRunner r2 = make_runner();
  run_study(space, r2, opt);
  std::ifstream resumed_in(resumed_path);
  std::string resumed((std::istreambuf_iterator<char>(resumed_in)), {});
  CHECK(resumed == full);
}

TEST_CASE("a real tiny study trains and ranks trials") {
  GeneratorConfig cfg;
  cfg.classes = 2;
  cfg.total_samples = 120;
  cfg.t_raw = 20;
  cfg.p_cloud = 0.0;
  cfg.grid_rows = 4;
  cfg.grid_cols = 3;
  cfg.seed = 77;
  Dataset ds = generate(cfg);
  block_split(ds, Rng(77));
  compute_standardization(ds);

  SearchSpace space = SearchSpace::for_architecture(Architecture::TempCnn);
  ModelSpec spec_template;
  spec_template.architecture = Architecture::TempCnn;
  spec_template.input_bands = kBands;
  spec_template.classes = 2;
  spec_template.sequence_length = kPreLength;
  TrainConfig train_template;
  train_template.batch_size = 16;
  train_template.early_stopping = false;

  StudyOptions opt;
  opt.budget_trials = 3;
  opt.parallelism = 2;
  opt.seed = 5;
  opt.asha = AshaState({1, 2});
  StudyResult res = run_study(space, ds, DataMode::Preprocessed, spec_template,
                              train_template, 0.8, opt);
  REQUIRE(res.trials.size() == 3);
  for (const auto& t : res.trials) {
    CHECK(t.status != TrialStatus::Running);
    CHECK_FALSE(t.rung_readings.empty());
  }
}
