#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "attnseries/tensor.hpp"
#include "testutil.hpp"

using namespace ats;
using testutil::GradCheck;
using testutil::random_tensor;

TEST_CASE("matmul forward") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor b({2, 2}, {1, 2, 3, 4});
  Tensor c = matmul(eye, b);
  CHECK(c.values() == std::vector<double>{1, 2, 3, 4});

  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor v({2, 1}, {5, 6});
  Tensor r = matmul(a, v);
  CHECK(r.at(0, 0) == 17.0);
  CHECK(r.at(1, 0) == 39.0);

  CHECK_THROWS_AS(matmul(a, Tensor::zeros({3, 2})), DimensionError);
}

TEST_CASE("matmul gradient vs finite differences") {
  Rng rng(1);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  GradCheck gc;
  gc.rtol = 1e-5;
  auto res = gc.run({a, b}, [&] { return sum_all(matmul(a, b)); }, 12, rng);
  INFO("worst " << res.worst << " a=" << res.worst_analytic
                << " n=" << res.worst_numeric);
  CHECK(res.pass());
}

TEST_CASE("conv1d identity kernel") {
  Tensor x({4, 1}, {1, 2, 3, 4});
  Tensor k({1, 1, 1}, {1});
  Tensor y = conv1d(x, k, Padding::Same);
  CHECK(y.values() == x.values());
}

TEST_CASE("conv1d hand correlation") {
  Tensor x({3, 1}, {1, 2, 3});
  Tensor k({1, 3, 1}, {1, 0, -1});
  Tensor y = conv1d(x, k, Padding::Same);
  CHECK(y.at(0, 0) == Catch::Approx(-2.0));
  CHECK(y.at(1, 0) == Catch::Approx(-2.0));
  CHECK(y.at(2, 0) == Catch::Approx(2.0));
}

TEST_CASE("conv1d rejects even kernels under same padding") {
  Tensor x({4, 1}, {1, 2, 3, 4});
  Tensor k({1, 2, 1}, {1, -1});
  CHECK_THROWS_AS(conv1d(x, k, Padding::Same), ConfigError);
  CHECK_NOTHROW(conv1d(x, k, Padding::Valid));
}

TEST_CASE("conv1d gradient vs finite differences") {
  Rng rng(2);
  Tensor x = random_tensor({8, 3}, rng);
  Tensor k = random_tensor({2, 3, 3}, rng);
  GradCheck gc;
  gc.rtol = 1e-5;
  auto res = gc.run(
      {x, k}, [&] { return sum_all(mul(conv1d(x, k, Padding::Same),
                                       conv1d(x, k, Padding::Same))); },
      16, rng);
  CHECK(res.pass());
}

TEST_CASE("conv1d batched matches per-sample") {
  Rng rng(3);
  Tensor x = random_tensor({2, 6, 3}, rng);
  Tensor k = random_tensor({4, 5, 3}, rng);
  Tensor y = conv1d(x, k, Padding::Same);
  for (int b = 0; b < 2; ++b) {
    Tensor xb = Tensor::zeros({6, 3});
    for (int t = 0; t < 6; ++t)
      for (int d = 0; d < 3; ++d) xb.at(t, d) = x.at(b, t, d);
    Tensor yb = conv1d(xb, k, Padding::Same);
    for (int t = 0; t < 6; ++t)
      for (int d = 0; d < 4; ++d)
        CHECK(y.at(b, t, d) == Catch::Approx(yb.at(t, d)).margin(1e-14));
  }
}

TEST_CASE("softmax basics") {
  Tensor x({3}, {0, 0, 0});
  Tensor y = softmax(x, 0);
  for (int i = 0; i < 3; ++i) CHECK(y.at(i) == Catch::Approx(1.0 / 3));

  Tensor big({2}, {1000, 0});
  Tensor yb = softmax(big, 0);
  CHECK(yb.at(0) == Catch::Approx(1.0));
  CHECK(yb.at(1) == Catch::Approx(0.0).margin(1e-300));
  CHECK(std::isfinite(yb.at(0)));

  Tensor two({2}, {1, 2});
  Tensor yt = softmax(two, 0);
  CHECK(yt.at(0) == Catch::Approx(0.26894).margin(1e-4));
  CHECK(yt.at(1) == Catch::Approx(0.73106).margin(1e-4));
}

TEST_CASE("softmax slices sum to one and stay positive") {
  Rng rng(4);
  for (int rep = 0; rep < 50; ++rep) {
    Tensor x = random_tensor({3, 5}, rng, -30, 30);
    for (int axis = 0; axis < 2; ++axis) {
      Tensor y = softmax(x, axis);
      const int n_slices = axis == 0 ? 5 : 3;
      for (int s = 0; s < n_slices; ++s) {
        double sum = 0.0;
        for (int j = 0; j < (axis == 0 ? 3 : 5); ++j) {
          const double v = axis == 0 ? y.at(j, s) : y.at(s, j);
          CHECK(v > 0.0);
          sum += v;
        }
        CHECK(std::fabs(sum - 1.0) < 1e-12);
      }
    }
  }
}

TEST_CASE("softmax gradient") {
  Rng rng(5);
  Tensor x = random_tensor({4, 3}, rng);
  Tensor w = random_tensor({4, 3}, rng);
  GradCheck gc;
  auto res =
      gc.run({x}, [&] { return sum_all(mul(softmax(x, 1), w)); }, 12, rng);
  CHECK(res.pass());
}

TEST_CASE("activations") {
  Tensor x({3}, {-1, 0, 2});
  CHECK(relu(x).values() == std::vector<double>{0, 0, 2});
  CHECK(sigmoid(Tensor::scalar(0)).at(0) == Catch::Approx(0.5));

  Tensor p = Tensor::scalar(0.3);
  p.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor y = tanh_t(p);
    tape.backward(y);
  }
  const double expected = 1.0 - std::tanh(0.3) * std::tanh(0.3);
  CHECK(std::fabs(p.grad()[0] - expected) < 1e-10);
}

TEST_CASE("activation gradients vs finite differences") {
  Rng rng(6);
  for (Act a : {Act::Tanh, Act::Sigmoid, Act::Relu, Act::Tan}) {
    Tensor x = random_tensor({5, 3}, rng, -0.9, 0.9);
    Tensor w = random_tensor({5, 3}, rng);
    GradCheck gc;
    auto res =
        gc.run({x}, [&] { return sum_all(mul(activation(x, a), w)); }, 10, rng);
    INFO(act_name(a));
    CHECK(res.pass());
  }
}

TEST_CASE("layer_norm") {
  Tensor gain = Tensor::full({4}, 1.0);
  Tensor bias = Tensor::zeros({4});

  Tensor constant({1, 4}, {2, 2, 2, 2});
  Tensor y = layer_norm(constant, gain, bias, 1e-5);
  for (int j = 0; j < 4; ++j) CHECK(y.at(0, j) == Catch::Approx(0.0).margin(1e-12));

  Tensor g2 = Tensor::full({2}, 1.0);
  Tensor b2 = Tensor::zeros({2});
  Tensor row({1, 2}, {1, 3});
  Tensor ln = layer_norm(row, g2, b2, 0.0);
  CHECK(ln.at(0, 0) == Catch::Approx(-1.0));
  CHECK(ln.at(0, 1) == Catch::Approx(1.0));

  Rng rng(7);
  Tensor x = random_tensor({6, 4}, rng);
  Tensor bias_r = random_tensor({4}, rng);
  Tensor out = layer_norm(x, gain, bias_r, 1e-12);
  for (int r = 0; r < 6; ++r) {
    double mean = 0.0;
    for (int j = 0; j < 4; ++j) mean += out.at(r, j) - bias_r.at(j);
    CHECK(std::fabs(mean / 4.0) < 1e-10);
  }
}

TEST_CASE("layer_norm gradient") {
  Rng rng(8);
  Tensor x = random_tensor({4, 5}, rng);
  Tensor gain = random_tensor({5}, rng, 0.5, 1.5);
  Tensor bias = random_tensor({5}, rng);
  Tensor w = random_tensor({4, 5}, rng);
  GradCheck gc;
  auto res = gc.run(
      {x, gain, bias},
      [&] { return sum_all(mul(layer_norm(x, gain, bias, 1e-5), w)); }, 12, rng);
  CHECK(res.pass());
}

TEST_CASE("batch_norm train statistics") {
  // channel already standardized: biased stats are exactly (0,1)
  Tensor x({2, 1}, {-1, 1});
  BNState st(1);
  Tensor y = batch_norm(x, st, Mode::Train, 0.1, 1e-12);
  CHECK(std::fabs(y.at(0, 0) - (-1.0)) < 1e-6);
  CHECK(std::fabs(y.at(1, 0) - 1.0) < 1e-6);

  Tensor x2({2, 1}, {1, 3});
  BNState st2(1);
  Tensor y2 = batch_norm(x2, st2, Mode::Train, 0.1, 1e-15);
  CHECK(y2.at(0, 0) == Catch::Approx(-1.0));
  CHECK(y2.at(1, 0) == Catch::Approx(1.0));
}

TEST_CASE("batch_norm running stats with momentum one") {
  Rng rng(9);
  Tensor x = random_tensor({8, 3}, rng);
  BNState st(3);
  Tensor t1 = batch_norm(x, st, Mode::Train, 1.0, 1e-9);
  Tensor t2 = batch_norm(x, st, Mode::Train, 1.0, 1e-9);
  Tensor ev = batch_norm(x, st, Mode::Eval, 1.0, 1e-9);
  for (size_t i = 0; i < x.size(); ++i)
    CHECK(std::fabs(ev.values()[i] - t2.values()[i]) < 1e-6);
}

TEST_CASE("batch_norm eval before any train uses init stats") {
  Tensor x({2, 2}, {1, 2, 3, 4});
  BNState st(2);
  Tensor y = batch_norm(x, st, Mode::Eval, 0.1, 0.0);
  // running mean 0, var 1: identity transform
  for (size_t i = 0; i < x.size(); ++i)
    CHECK(y.values()[i] == Catch::Approx(x.values()[i]));
}

TEST_CASE("batch_norm gradient") {
  Rng rng(10);
  Tensor x = random_tensor({6, 3}, rng);
  BNState st(3);
  Tensor w = random_tensor({6, 3}, rng);
  GradCheck gc;
  auto res = gc.run(
      {x, st.gamma, st.beta},
      [&] { return sum_all(mul(batch_norm(x, st, Mode::Train, 0.1, 1e-5), w)); },
      10, rng);
  CHECK(res.pass());
}

TEST_CASE("pooling") {
  Tensor c({3, 2}, {5, -1, 5, -1, 5, -1});
  Tensor m = pool_global_max_time(c);
  CHECK(m.values() == std::vector<double>{5, -1});

  Tensor x({4, 1}, {1, 2, 3, 4});
  Tensor a = pool_avg1d(x, 2);
  CHECK(a.values() == std::vector<double>{1.5, 3.5});

  Tensor odd({3, 1}, {1, 2, 3});
  Tensor ap = pool_avg1d(odd, 2);
  CHECK(ap.values() == std::vector<double>{1.5, 3.0});

  CHECK_THROWS_AS(pool_global_max_time(Tensor::zeros({0, 2})), DimensionError);
}

TEST_CASE("global max pool routes gradient to first argmax only") {
  Tensor x({3, 2}, {1, 7, 4, 7, 4, 2});
  x.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = sum_all(pool_global_max_time(x));
    tape.backward(loss);
  }
  // channel 0: max 4 first at t=1; channel 1: max 7 first at t=0
  CHECK(x.grad() == std::vector<double>{0, 1, 1, 0, 0, 0});
}

TEST_CASE("pool gradients vs finite differences") {
  Rng rng(11);
  Tensor x = random_tensor({7, 3}, rng);
  Tensor w = random_tensor({4, 3}, rng);
  GradCheck gc;
  auto res = gc.run(
      {x}, [&] { return sum_all(mul(pool_avg1d(x, 2), w)); }, 10, rng);
  CHECK(res.pass());
}

TEST_CASE("dropout") {
  Rng rng(12);
  Tensor x = random_tensor({10, 3}, rng);

  Rng r0(1);
  Tensor same = dropout(x, 0.0, Mode::Train, r0);
  CHECK(same.values() == x.values());
  Tensor ev = dropout(x, 0.5, Mode::Eval, r0);
  CHECK(ev.values() == x.values());
  CHECK_THROWS_AS(dropout(x, 1.0, Mode::Train, r0), ConfigError);

  Tensor big = Tensor::full({1000, 1000}, 1.0);
  Rng r1(99);
  Tensor dropped = dropout(big, 0.3, Mode::Train, r1);
  size_t kept = 0;
  for (double v : dropped.values())
    if (v != 0.0) ++kept;
  const double frac = static_cast<double>(kept) / big.size();
  CHECK(std::fabs(frac - 0.7) < 0.005);
}

TEST_CASE("backward basics") {
  Tensor x({2}, {1, -2});
  x.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = sum_all(mul(x, x));
    tape.backward(loss);
  }
  CHECK(x.grad() == std::vector<double>{2, -4});
}

TEST_CASE("backward accumulates across fan-out") {
  Tensor x = Tensor::scalar(3.0);
  x.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor y = add(x, x);
    tape.backward(y);
  }
  CHECK(x.grad()[0] == 2.0);
}

TEST_CASE("backward contract errors") {
  Tensor x({2}, {1, 2});
  x.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), ContractError);

  Tensor loss = sum_all(y);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), ContractError);
}

TEST_CASE("loss off the tape is rejected") {
  Tensor leaf = Tensor::scalar(1.0);
  Tape tape;
  CHECK_THROWS_AS(tape.backward(leaf), ContractError);
}

TEST_CASE("detached tensors never receive gradients") {
  Tensor x({2}, {1, 2});
  x.set_requires_grad(true);
  Tensor frozen({2}, {3, 4});  // requires_grad stays false
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = sum_all(mul(x, frozen));
    tape.backward(loss);
  }
  CHECK(x.grad() == std::vector<double>{3, 4});
  CHECK_FALSE(frozen.has_grad());
}

TEST_CASE("backward is deterministic") {
  auto run = [] {
    Rng rng(77);
    Tensor a = random_tensor({5, 5}, rng);
    Tensor b = random_tensor({5, 5}, rng);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = sum_all(mul(softmax(matmul(a, b), 1), b));
    tape.backward(loss);
    auto g = a.grad();
    auto g2 = b.grad();
    g.insert(g.end(), g2.begin(), g2.end());
    return g;
  };
  CHECK(run() == run());
}

TEST_CASE("structural ops gradients") {
  Rng rng(13);
  Tensor x = random_tensor({2, 4, 3}, rng);
  Tensor w2 = random_tensor({2, 3}, rng);
  GradCheck gc;

  auto r1 = gc.run({x}, [&] { return sum_all(mul(slice_time(x, 2), w2)); }, 8, rng);
  CHECK(r1.pass());

  Tensor wf = random_tensor({2, 12}, rng);
  auto r2 =
      gc.run({x}, [&] { return sum_all(mul(reshape(x, {2, 12}), wf)); }, 8, rng);
  CHECK(r2.pass());

  Tensor y = random_tensor({2, 4, 2}, rng);
  Tensor wc = random_tensor({2, 4, 5}, rng);
  auto r3 = gc.run({x, y}, [&] {
    return sum_all(mul(concat_last({x, y}), wc));
  }, 8, rng);
  CHECK(r3.pass());

  std::vector<int> idx = {0, 0, 3, 1};
  Tensor wg = random_tensor({2, 4, 3}, rng);
  auto r4 =
      gc.run({x}, [&] { return sum_all(mul(gather_time(x, idx), wg)); }, 8, rng);
  CHECK(r4.pass());

  Tensor a = random_tensor({3, 2}, rng);
  Tensor b = random_tensor({3, 2}, rng);
  Tensor ws = random_tensor({3, 2, 2}, rng);
  auto r5 = gc.run({a, b}, [&] {
    std::vector<Tensor> steps = {a, b};
    return sum_all(mul(stack_time(steps), ws));
  }, 8, rng);
  CHECK(r5.pass());
}

TEST_CASE("bmm variants match matmul") {
  Rng rng(14);
  Tensor a = random_tensor({2, 3, 4}, rng);
  Tensor b = random_tensor({2, 4, 5}, rng);
  Tensor c = bmm(a, b);
  Tensor bt = random_tensor({2, 5, 4}, rng);
  Tensor cnt = bmm_nt(a, bt);
  for (int i = 0; i < 2; ++i) {
    Tensor ai = Tensor::zeros({3, 4});
    Tensor bi = Tensor::zeros({4, 5});
    Tensor bti = Tensor::zeros({5, 4});
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 4; ++k) ai.at(r, k) = a.at(i, r, k);
    for (int r = 0; r < 4; ++r)
      for (int k = 0; k < 5; ++k) bi.at(r, k) = b.at(i, r, k);
    for (int r = 0; r < 5; ++r)
      for (int k = 0; k < 4; ++k) bti.at(r, k) = bt.at(i, r, k);
    Tensor ci = matmul(ai, bi);
    Tensor cnti = matmul(ai, transpose(bti));
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 5; ++k) {
        CHECK(c.at(i, r, k) == Catch::Approx(ci.at(r, k)).margin(1e-13));
        CHECK(cnt.at(i, r, k) == Catch::Approx(cnti.at(r, k)).margin(1e-13));
      }
  }

  GradCheck gc;
  Tensor w = random_tensor({2, 3, 5}, rng);
  auto r1 = gc.run({a, b}, [&] { return sum_all(mul(bmm(a, b), w)); }, 10, rng);
  CHECK(r1.pass());
  auto r2 =
      gc.run({a, bt}, [&] { return sum_all(mul(bmm_nt(a, bt), w)); }, 10, rng);
  CHECK(r2.pass());
  Tensor w2 = random_tensor({4, 6}, rng);
  Tensor w3o = random_tensor({2, 3, 6}, rng);
  auto r3 =
      gc.run({a, w2}, [&] { return sum_all(mul(matmul3(a, w2), w3o)); }, 10, rng);
  CHECK(r3.pass());
}
