#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "attnseries/models.hpp"
#include "testutil.hpp"

using namespace ats;
using testutil::random_tensor;

namespace {

ModelSpec base_spec(Architecture arch, int t = 23, int dh = 16) {
  ModelSpec s;
  s.architecture = arch;
  s.input_bands = 13;
  s.classes = 5;
  s.sequence_length = t;
  s.hidden_dim = dh;
  s.layers = arch == Architecture::Transformer ? 2 : 1;
  s.heads = 2;
  s.kernel_size = 5;
  return s;
}

// independent parameter-count formulas, kept deliberately separate from the
// layer implementations
size_t expected_param_count(const ModelSpec& s) {
  const size_t d = static_cast<size_t>(s.input_bands);
  const size_t dh = static_cast<size_t>(s.hidden_dim);
  const size_t c = static_cast<size_t>(s.classes);
  const size_t t = static_cast<size_t>(s.sequence_length);
  const size_t k = static_cast<size_t>(s.kernel_size);
  switch (s.architecture) {
    case Architecture::LstmRnn: {
      size_t n = 0;
      for (int l = 0; l < s.layers; ++l) {
        const size_t in = l == 0 ? d : 2 * dh;
        n += 2 * (in * 4 * dh + dh * 4 * dh + 4 * dh);
      }
      return n + 2 * dh * c + c;
    }
    case Architecture::Transformer: {
      size_t block = 3 * dh * dh + dh * dh + 2 * dh  // attention + ln1
                     + dh * 4 * dh + 4 * dh + 4 * dh * dh + dh + 2 * dh;
      return d * dh + static_cast<size_t>(s.layers) * block + dh * c + c;
    }
    case Architecture::MsResnet: {
      size_t n = 0;
      const size_t c1 = dh, c2 = 2 * dh, c3 = 4 * dh;
      const int windows[3] = {16, 11, 6};
      const int kernels[3] = {3, 5, 7};
      for (int i = 0; i < 3; ++i) {
        const size_t kk = static_cast<size_t>(kernels[i]);
        n += c1 * kk * d + 2 * c1 + c1 * kk * c1 + 2 * c1;
        n += c2 * kk * c1 + 2 * c2 + c2 * kk * c2 + 2 * c2;
        n += c3 * kk * c2 + 2 * c3 + c3 * kk * c3 + 2 * c3;
        const size_t pooled = (512 + windows[i] - 1) / windows[i];
        n += pooled * c3 * 256 + 256;
      }
      return n + 768 * c + c;
    }
    case Architecture::TempCnn: {
      size_t n = dh * k * d + 2 * dh + 2 * (dh * k * dh + 2 * dh);
      n += t * dh * 4 * dh + 4 * dh + 2 * (4 * dh);
      return n + 4 * dh * c + c;
    }
    case Architecture::SoftAttnGru:
      return d * 3 * dh + dh * 3 * dh + 3 * dh + dh * dh + dh + dh * c + c;
  }
  return 0;
}

}  // namespace

TEST_CASE("build produces logits of the right shape") {
  ModelSpec s = base_spec(Architecture::Transformer);
  s.hidden_dim = 64;
  s.layers = 2;
  s.heads = 4;
  Rng rng(1);
  Model m = Model::build(s, rng);
  Tensor x = random_tensor({23, 13}, rng);
  Tensor logits = m.forward(x, Mode::Eval);
  CHECK(logits.shape() == std::vector<int>{5});
  for (double v : logits.values()) CHECK(std::isfinite(v));
}

TEST_CASE("build is deterministic per seed") {
  for (Architecture arch :
       {Architecture::LstmRnn, Architecture::Transformer, Architecture::MsResnet,
        Architecture::TempCnn, Architecture::SoftAttnGru}) {
    ModelSpec s = base_spec(arch);
    Rng a(42), b(42);
    Model ma = Model::build(s, a);
    Model mb = Model::build(s, b);
    ParamList pa = ma.params(), pb = mb.params();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i].name == pb[i].name);
      CHECK(pa[i].tensor.values() == pb[i].tensor.values());
    }
  }
}

TEST_CASE("spec validation names the offending field") {
  ModelSpec s = base_spec(Architecture::Transformer);
  s.hidden_dim = 48;
  CHECK_THROWS_WITH(s.validate(), Catch::Matchers::ContainsSubstring("hidden_dim"));
  s.hidden_dim = 32;
  s.heads = 3;
  CHECK_THROWS_WITH(s.validate(), Catch::Matchers::ContainsSubstring("heads"));
  s.heads = 2;
  s.layers = 9;
  CHECK_THROWS_WITH(s.validate(), Catch::Matchers::ContainsSubstring("layers"));

  ModelSpec t = base_spec(Architecture::TempCnn);
  t.kernel_size = 4;
  CHECK_THROWS_WITH(t.validate(), Catch::Matchers::ContainsSubstring("kernel_size"));
}

TEST_CASE("eval forward is deterministic and rejects band mismatch") {
  Rng rng(2);
  for (Architecture arch :
       {Architecture::LstmRnn, Architecture::Transformer, Architecture::MsResnet,
        Architecture::TempCnn, Architecture::SoftAttnGru}) {
    ModelSpec s = base_spec(arch);
    Model m = Model::build(s, rng);
    Tensor x = random_tensor({23, 13}, rng);
    Tensor l1 = m.forward(x, Mode::Eval);
    Tensor l2 = m.forward(x, Mode::Eval);
    CHECK(l1.values() == l2.values());
    CHECK_THROWS_AS(m.forward(random_tensor({23, 7}, rng), Mode::Eval),
                    DimensionError);
  }
}

TEST_CASE("msresnet operates on a fixed internal length") {
  Rng rng(3);
  ModelSpec s = base_spec(Architecture::MsResnet);
  Model m = Model::build(s, rng);
  Tensor x = random_tensor({70, 13}, rng);
  Tensor direct = m.forward(x, Mode::Eval);
  Tensor pre = resample_nearest(x, 512);
  Tensor via = m.forward(pre, Mode::Eval);
  for (int j = 0; j < 5; ++j)
    CHECK(direct.at(j) == Catch::Approx(via.at(j)).margin(1e-12));

  // any T >= 1 is accepted
  Tensor one = random_tensor({1, 13}, rng);
  CHECK_NOTHROW(m.forward(one, Mode::Eval));
}

TEST_CASE("resample_nearest") {
  Tensor x({2, 1}, {1, 2});
  Tensor y = resample_nearest(x, 4);
  CHECK(y.values() == std::vector<double>{1, 1, 2, 2});

  Tensor same = resample_nearest(x, 2);
  CHECK(same.values() == x.values());

  Rng rng(4);
  Tensor z = random_tensor({7, 3}, rng);
  Tensor r = resample_nearest(z, 19);
  CHECK(r.at(0, 0) == z.at(0, 0));
  CHECK(r.at(18, 2) == z.at(6, 2));
  auto idx = resample_indices(7, 19);
  for (size_t i = 1; i < idx.size(); ++i) CHECK(idx[i] >= idx[i - 1]);
  for (int i = 0; i < 19; ++i)
    for (int j = 0; j < 3; ++j) CHECK(r.at(i, j) == z.at(idx[static_cast<size_t>(i)], j));

  CHECK_THROWS_AS(resample_nearest(x, 0), DimensionError);
}

TEST_CASE("parameter counts match the closed-form oracle") {
  Rng rng(5);
  for (Architecture arch :
       {Architecture::LstmRnn, Architecture::Transformer, Architecture::MsResnet,
        Architecture::TempCnn, Architecture::SoftAttnGru}) {
    ModelSpec s = base_spec(arch);
    if (arch == Architecture::LstmRnn) s.layers = 2;
    Model m = Model::build(s, rng);
    INFO(arch_name(arch));
    CHECK(m.parameter_count() == expected_param_count(s));
  }
}

TEST_CASE("transformer exposes L*H attention matrices of shape TxT") {
  Rng rng(6);
  ModelSpec s = base_spec(Architecture::Transformer);
  s.layers = 3;
  s.heads = 4;
  s.hidden_dim = 16;
  Model m = Model::build(s, rng);
  Tensor x = random_tensor({11, 13}, rng);
  ForwardHooks hooks;
  m.forward(x, Mode::Eval, nullptr, &hooks);
  REQUIRE(hooks.attention.size() == 12);
  for (const auto& rec : hooks.attention) {
    REQUIRE(rec.scores.ndim() == 3);  // batch of one
    CHECK(rec.scores.dim(1) == 11);
    CHECK(rec.scores.dim(2) == 11);
    for (int i = 0; i < 11; ++i) {
      double sum = 0.0;
      for (int j = 0; j < 11; ++j) sum += rec.scores.at(0, i, j);
      CHECK(std::fabs(sum - 1.0) < 1e-10);
    }
  }
  bool has_pooled = false;
  for (const auto& f : hooks.features) has_pooled |= f.name == "pooled";
  CHECK(has_pooled);
}

TEST_CASE("transformer without positional encoding is permutation invariant") {
  Rng rng(7);
  ModelSpec s = base_spec(Architecture::Transformer);
  s.use_positional_encoding = false;
  Model m = Model::build(s, rng);
  Tensor x = random_tensor({9, 13}, rng);
  Tensor base = m.forward(x, Mode::Eval);
  Rng perm_rng(8);
  for (int rep = 0; rep < 4; ++rep) {
    std::vector<int> perm(9);
    for (int i = 0; i < 9; ++i) perm[static_cast<size_t>(i)] = i;
    for (int i = 8; i > 0; --i)
      std::swap(perm[static_cast<size_t>(i)],
                perm[static_cast<size_t>(perm_rng.integer(static_cast<uint64_t>(i + 1)))]);
    Tensor xp = Tensor::zeros({9, 13});
    for (int i = 0; i < 9; ++i)
      for (int j = 0; j < 13; ++j) xp.at(i, j) = x.at(perm[static_cast<size_t>(i)], j);
    Tensor lp = m.forward(xp, Mode::Eval);
    for (int j = 0; j < 5; ++j)
      CHECK(std::fabs(lp.at(j) - base.at(j)) < 1e-8);
  }
}

TEST_CASE("positional encoding makes time order matter") {
  Rng rng(9);
  ModelSpec s = base_spec(Architecture::Transformer);
  s.use_positional_encoding = true;
  Model m = Model::build(s, rng);
  Tensor x = random_tensor({9, 13}, rng);
  Tensor base = m.forward(x, Mode::Eval);
  // reverse the series
  Tensor xr = Tensor::zeros({9, 13});
  for (int i = 0; i < 9; ++i)
    for (int j = 0; j < 13; ++j) xr.at(i, j) = x.at(8 - i, j);
  Tensor lr = m.forward(xr, Mode::Eval);
  double max_delta = 0.0;
  for (int j = 0; j < 5; ++j)
    max_delta = std::max(max_delta, std::fabs(lr.at(j) - base.at(j)));
  CHECK(max_delta > 1e-6);
}

TEST_CASE("checkpoint round-trip reproduces logits bit-exactly") {
  testutil::TempDir dir("ckpt");
  Rng rng(10);
  for (Architecture arch :
       {Architecture::LstmRnn, Architecture::Transformer, Architecture::MsResnet,
        Architecture::TempCnn, Architecture::SoftAttnGru}) {
    ModelSpec s = base_spec(arch);
    Model m = Model::build(s, rng);
    // nudge running stats away from init so they round-trip too
    Tensor batch = random_tensor({4, 23, 13}, rng);
    Rng drop(1);
    m.forward_batch(batch, Mode::Train, &drop);

    const std::string path = dir.str() + "/" + std::string(arch_name(arch)) + ".ckpt";
    save_checkpoint(m, path);
    Model loaded = load_checkpoint(path);
    CHECK(loaded.spec.classes == s.classes);

    Tensor x = random_tensor({23, 13}, rng);
    Tensor a = m.forward(x, Mode::Eval);
    Tensor b = loaded.forward(x, Mode::Eval);
    INFO(arch_name(arch));
    CHECK(a.values() == b.values());
  }
}

TEST_CASE("corrupt checkpoints are rejected") {
  testutil::TempDir dir("ckpt_bad");
  const std::string path = dir.str() + "/bad.ckpt";
  {
    std::ofstream os(path, std::ios::binary);
    os << "not a checkpoint";
  }
  CHECK_THROWS_AS(load_checkpoint(path), ParseError);
  CHECK_THROWS_AS(load_checkpoint(dir.str() + "/missing.ckpt"), ParseError);
}

TEST_CASE("model gradients flow end to end") {
  Rng rng(11);
  testutil::GradCheck gc;
  gc.rtol = 1e-4;
  for (Architecture arch :
       {Architecture::LstmRnn, Architecture::Transformer, Architecture::TempCnn,
        Architecture::SoftAttnGru}) {
    ModelSpec s = base_spec(arch, 8);
    Model m = Model::build(s, rng);
    Tensor x = random_tensor({8, 13}, rng);
    Tensor w = random_tensor({5}, rng);
    auto params = m.trainable_params();
    std::vector<Tensor> probe = {x, params.front(), params.back()};
    auto res = gc.run(probe, [&] {
      return sum_all(mul(m.forward(x, Mode::Eval), w));
    }, 6, rng);
    INFO(arch_name(arch) << " worst " << res.worst);
    CHECK(res.pass());
  }
}
